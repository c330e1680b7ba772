"""HTTP server speaking the /v1 generate/denoise wire protocol.

Schemas must stay field-compatible with the client side's wire contract:
tensors as base64 little-endian float32 with an explicit shape, images as
base64 PNG, errors as {"error": ...} with 400 for bad requests and 503 while
the adapter is not ready. Parity suites drive a real client against this
server, so do not drift.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image

from .adapters import Adapter, NotReady
from .geom import ViewChange
from .oracle import ResolveError

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
_MAX_BODY = 256 * 1024 * 1024


class _BadRequest(Exception):
    pass


# -- codecs ----------------------------------------------------------------


def tensor_to_wire(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return {
        "shape": list(arr.shape),
        "dtype": "f32",
        "data_b64": base64.b64encode(data).decode("ascii"),
    }


def wire_to_tensor(d: dict) -> np.ndarray:
    if d.get("dtype") != "f32":
        raise _BadRequest(f"unsupported wire dtype {d.get('dtype')!r}")
    shape = tuple(int(x) for x in d["shape"])
    raw = base64.b64decode(d["data_b64"])
    expect = 4 * int(np.prod(shape)) if shape else 4
    if len(raw) != expect:
        raise _BadRequest(f"wire payload is {len(raw)} bytes, expected {expect}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def image_to_png_b64(img: np.ndarray) -> str:
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def png_b64_to_image(s: str) -> np.ndarray:
    raw = base64.b64decode(s)
    with Image.open(io.BytesIO(raw)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.asarray(arr, dtype=np.float32) / 255.0


def _parse_denoise(body: dict):
    try:
        noisy = wire_to_tensor(body["noisy"])
        t_index = int(body["t_index"])
        if t_index < 0:
            raise ValueError(f"t_index {t_index} must be nonnegative")
        cond = png_b64_to_image(body["cond_png_b64"])
        change = ViewChange(
            d_elevation_deg=float(body["d_elevation_deg"]),
            d_azimuth_deg=float(body["d_azimuth_deg"]),
            d_radius=0.0,
        )
    except _BadRequest:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise _BadRequest(f"malformed denoise request: {exc}") from exc
    return noisy, t_index, cond, change


# -- handler ---------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    adapter: Adapter  # set on the subclass built by make_server
    gate: threading.Lock | None  # present when the adapter is single-flight

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, payload: dict) -> None:
        raw = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        if length <= 0 or length > _MAX_BODY:
            raise _BadRequest(f"bad Content-Length {length}")
        try:
            body = json.loads(self.rfile.read(length))
        except json.JSONDecodeError as exc:
            raise _BadRequest(f"invalid JSON body: {exc}") from exc
        if not isinstance(body, dict):
            raise _BadRequest("body must be a JSON object")
        if body.get("version") != PROTOCOL_VERSION:
            raise _BadRequest(
                f"unsupported protocol version {body.get('version')!r}, "
                f"server speaks {PROTOCOL_VERSION}"
            )
        return body

    def _call(self, fn, *args):
        if self.gate is not None:
            with self.gate:
                return fn(*args)
        return fn(*args)

    def do_GET(self):
        try:
            if self.path == "/v1/descriptor":
                d = self._call(self.adapter.descriptor)
                self._send_json(200, {"version": PROTOCOL_VERSION, **d})
            elif self.path == "/v1/health":
                self._send_json(200, {"ok": True})
            else:
                self._send_json(404, {"error": f"no such endpoint {self.path}"})
        except NotReady as exc:
            self._send_json(503, {"error": str(exc)})
        except Exception as exc:  # noqa: BLE001
            log.exception("internal error serving %s", self.path)
            self._send_json(500, {"error": f"internal error: {exc}"})

    def do_POST(self):
        try:
            body = self._read_body()
            if self.path == "/v1/generate":
                self._handle_generate(body)
            elif self.path == "/v1/denoise":
                self._handle_denoise(body)
            elif self.path == "/v1/denoise_batch":
                self._handle_batch(body)
            else:
                self._send_json(404, {"error": f"no such endpoint {self.path}"})
        except _BadRequest as exc:
            self._send_json(400, {"error": str(exc)})
        except NotReady as exc:
            self._send_json(503, {"error": str(exc)})
        except (ResolveError, ValueError) as exc:
            self._send_json(400, {"error": str(exc)})
        except Exception as exc:  # noqa: BLE001
            log.exception("internal error serving %s", self.path)
            self._send_json(500, {"error": f"internal error: {exc}"})

    def _handle_generate(self, body: dict) -> None:
        try:
            cond = png_b64_to_image(body["cond_png_b64"])
            change = ViewChange(
                d_elevation_deg=float(body["d_elevation_deg"]),
                d_azimuth_deg=float(body["d_azimuth_deg"]),
                d_radius=float(body["d_radius"]),
            )
            if change.d_radius != 0.0:
                raise ValueError("generation keeps the camera radius fixed (d_radius = 0)")
            seed = int(body["seed"])
        except _BadRequest:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise _BadRequest(f"malformed generate request: {exc}") from exc
        image, encoding = self._call(self.adapter.generate, cond, change, seed)
        self._send_json(
            200,
            {"image_png_b64": image_to_png_b64(image), "encoding": tensor_to_wire(encoding)},
        )

    def _handle_denoise(self, body: dict) -> None:
        eps = self._call(self.adapter.denoise, *_parse_denoise(body))
        self._send_json(200, {"epsilon": tensor_to_wire(eps)})

    def _handle_batch(self, body: dict) -> None:
        items = body.get("items")
        if not isinstance(items, list):
            raise _BadRequest("denoise_batch body needs an 'items' list")
        out = []
        for item in items:
            try:
                if not isinstance(item, dict):
                    raise _BadRequest("batch item must be an object")
                eps = self._call(self.adapter.denoise, *_parse_denoise(item))
                out.append({"ok": True, "epsilon": tensor_to_wire(eps)})
            except (_BadRequest, ResolveError, ValueError) as exc:
                # NotReady deliberately not caught here: a not-ready adapter
                # fails the whole request with 503, not item by item
                out.append({"ok": False, "error": str(exc)})
        self._send_json(200, {"items": out})


def make_server(adapter: Adapter, host: str = "127.0.0.1", port: int = 8009) -> ThreadingHTTPServer:
    """Build (but do not start) a protocol server for the given adapter."""
    gate = threading.Lock() if adapter.single_flight else None
    handler = type("BoundHandler", (_Handler,), {"adapter": adapter, "gate": gate})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


def serve(adapter: Adapter, host: str = "127.0.0.1", port: int = 8009) -> None:
    """Blocking convenience wrapper around make_server."""
    server = make_server(adapter, host, port)
    try:
        server.serve_forever()
    finally:
        server.server_close()
