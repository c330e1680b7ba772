"""Stdlib HTTP server exposing any Backend over the wire protocol.

Used by the CLI to serve the in-process oracle so the remote client can be
exercised hermetically; any object satisfying the Backend interface works.
"""

from __future__ import annotations

import json
import logging
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .backend import Backend, DenoiseRequest, GenerationRequest
from .errors import BackendUnavailable, PoseSearchError
from .geometry import ViewChange
from .wire import (
    PROTOCOL_VERSION,
    image_to_png_b64,
    png_b64_to_image,
    tensor_to_wire,
    wire_to_tensor,
)

log = logging.getLogger(__name__)

_MAX_BODY = 256 * 1024 * 1024


class _BadRequest(Exception):
    pass


def _parse_denoise(body: dict) -> DenoiseRequest:
    try:
        return DenoiseRequest(
            noisy=wire_to_tensor(body["noisy"]),
            t_index=int(body["t_index"]),
            cond=png_b64_to_image(body["cond_png_b64"]),
            change=ViewChange(
                d_elevation_deg=float(body["d_elevation_deg"]),
                d_azimuth_deg=float(body["d_azimuth_deg"]),
                d_radius=0.0,
            ),
        )
    except (KeyError, TypeError, ValueError, PoseSearchError) as exc:
        raise _BadRequest(f"malformed denoise request: {exc}") from exc


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    backend: Backend  # set by make_server on the generated subclass

    # -- plumbing ----------------------------------------------------------

    def log_message(self, fmt, *args):  # quiet by default
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

    # -- routes ------------------------------------------------------------

    def do_GET(self):
        if self.path == "/v1/descriptor":
            d = self.backend.descriptor()
            self._send_json(
                200,
                {
                    "version": PROTOCOL_VERSION,
                    "name": d.name,
                    "working_shape": list(d.working_shape),
                    "t_total": d.schedule.t_total,
                    "alpha_bar": [float(x) for x in d.schedule.alpha_bar],
                },
            )
        elif self.path == "/v1/health":
            self._send_json(200, {"ok": True})
        else:
            self._send_json(404, {"error": f"no such endpoint {self.path}"})

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
        except BackendUnavailable as exc:
            self._send_json(503, {"error": str(exc)})
        except Exception as exc:  # noqa: BLE001 - surface anything else as 500
            log.exception("internal error serving %s", self.path)
            self._send_json(500, {"error": f"internal error: {exc}"})

    def _handle_generate(self, body: dict) -> None:
        try:
            req = GenerationRequest(
                cond=png_b64_to_image(body["cond_png_b64"]),
                change=ViewChange(
                    d_elevation_deg=float(body["d_elevation_deg"]),
                    d_azimuth_deg=float(body["d_azimuth_deg"]),
                    d_radius=float(body["d_radius"]),
                ),
                seed=int(body["seed"]),
            )
        except (KeyError, TypeError, ValueError, PoseSearchError) as exc:
            raise _BadRequest(f"malformed generate request: {exc}") from exc
        result = self.backend.generate(req)
        self._send_json(
            200,
            {
                "image_png_b64": image_to_png_b64(result.image),
                "encoding": tensor_to_wire(result.encoding),
            },
        )

    def _handle_denoise(self, body: dict) -> None:
        req = _parse_denoise(body)
        eps = self.backend.denoise(req)
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
                eps = self.backend.denoise(_parse_denoise(item))
                out.append({"ok": True, "epsilon": tensor_to_wire(eps)})
            except (_BadRequest, PoseSearchError) as exc:
                out.append({"ok": False, "error": str(exc)})
        self._send_json(200, {"items": out})


def make_server(backend: Backend, host: str = "127.0.0.1", port: int = 8008) -> ThreadingHTTPServer:
    """Build (but do not start) a protocol server bound to host:port."""
    handler = type("BoundHandler", (_Handler,), {"backend": backend})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server
