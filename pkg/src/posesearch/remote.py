"""HTTP client for the generator/denoiser wire protocol.

Semantics mirror the in-process backend exactly: a server running the oracle
mirror must be indistinguishable from a local oracle up to float transport.
Retries happen only on transport failures; a well-formed server error is
final (a real diffusion server may have already paid for the generation).
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

import requests

from .backend import Backend, BackendDescriptor, DenoiseRequest, GenerationRequest, GenerationResult
from .errors import BackendUnavailable, PartialFailure, ProtocolMismatch, ServerError, Unreachable
from .imaging import NoiseSchedule, TensorBuffer
from .wire import (
    PROTOCOL_VERSION,
    image_to_png_b64,
    png_b64_to_image,
    tensor_to_wire,
    wire_to_tensor,
)

log = logging.getLogger(__name__)

_TRANSPORT_ERRORS = (requests.ConnectionError, requests.Timeout)


@dataclass(frozen=True)
class RemoteConfig:
    base_url: str
    timeout_ms: int = 30_000
    max_in_flight: int = 4
    retry_limit: int = 2

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")
        object.__setattr__(self, "base_url", self.base_url.rstrip("/"))


class _Transport:
    """Per-thread sessions, an in-flight cap, and transport-only retries."""

    def __init__(self, cfg: RemoteConfig):
        self._cfg = cfg
        self._local = threading.local()
        self._gate = threading.BoundedSemaphore(cfg.max_in_flight)

    def _session(self) -> requests.Session:
        s = getattr(self._local, "session", None)
        if s is None:
            s = requests.Session()
            self._local.session = s
        return s

    def call(self, method: str, path: str, body: dict | None = None) -> dict:
        url = self._cfg.base_url + path
        timeout = self._cfg.timeout_ms / 1000.0
        last_exc = None
        for attempt in range(self._cfg.retry_limit + 1):
            try:
                with self._gate:
                    if method == "GET":
                        resp = self._session().get(url, timeout=timeout)
                    else:
                        resp = self._session().post(url, json=body, timeout=timeout)
            except _TRANSPORT_ERRORS as exc:
                last_exc = exc
                log.debug("transport failure on %s (attempt %d): %s", path, attempt, exc)
                continue
            return _unwrap(resp, path)
        raise Unreachable(
            f"{url} unreachable after {self._cfg.retry_limit + 1} attempts: {last_exc}"
        )


def _unwrap(resp: requests.Response, path: str) -> dict:
    if resp.status_code == 200:
        return resp.json()
    try:
        message = resp.json().get("error", resp.text)
    except ValueError:
        message = resp.text
    if resp.status_code == 503:
        raise BackendUnavailable(f"{path}: {message}")
    raise ServerError(f"{path} -> HTTP {resp.status_code}: {message}")


def _denoise_body(req: DenoiseRequest) -> dict:
    return {
        "version": PROTOCOL_VERSION,
        "noisy": tensor_to_wire(req.noisy),
        "t_index": int(req.t_index),
        "cond_png_b64": image_to_png_b64(req.cond),
        "d_elevation_deg": float(req.change.d_elevation_deg),
        "d_azimuth_deg": float(req.change.d_azimuth_deg),
    }


def remote_descriptor(cfg: RemoteConfig, transport: _Transport | None = None) -> BackendDescriptor:
    t = transport if transport is not None else _Transport(cfg)
    d = t.call("GET", "/v1/descriptor")
    version = d.get("version")
    if version != PROTOCOL_VERSION:
        raise ProtocolMismatch(
            f"server speaks protocol {version!r}, client speaks {PROTOCOL_VERSION}"
        )
    return BackendDescriptor(
        name=str(d["name"]),
        working_shape=tuple(int(x) for x in d["working_shape"]),
        schedule=NoiseSchedule(d["alpha_bar"]),
        supports_batching=True,
    )


def remote_generate(
    cfg: RemoteConfig, req: GenerationRequest, transport: _Transport | None = None
) -> GenerationResult:
    t = transport if transport is not None else _Transport(cfg)
    body = {
        "version": PROTOCOL_VERSION,
        "cond_png_b64": image_to_png_b64(req.cond),
        "d_elevation_deg": float(req.change.d_elevation_deg),
        "d_azimuth_deg": float(req.change.d_azimuth_deg),
        "d_radius": float(req.change.d_radius),
        "seed": int(req.seed),
    }
    d = t.call("POST", "/v1/generate", body)
    return GenerationResult(
        image=png_b64_to_image(d["image_png_b64"]),
        encoding=wire_to_tensor(d["encoding"]),
    )


def remote_denoise(
    cfg: RemoteConfig, req: DenoiseRequest, transport: _Transport | None = None
) -> TensorBuffer:
    t = transport if transport is not None else _Transport(cfg)
    d = t.call("POST", "/v1/denoise", _denoise_body(req))
    return wire_to_tensor(d["epsilon"])


def remote_denoise_batch(
    cfg: RemoteConfig, reqs: list[DenoiseRequest], transport: _Transport | None = None
) -> list[TensorBuffer]:
    """Batched denoise; responses stay positionally aligned with requests."""
    if not reqs:
        return []
    t = transport if transport is not None else _Transport(cfg)
    body = {"version": PROTOCOL_VERSION, "items": [_denoise_body(r) for r in reqs]}
    d = t.call("POST", "/v1/denoise_batch", body)
    items = d.get("items", [])
    if len(items) != len(reqs):
        raise ServerError(f"batch returned {len(items)} items for {len(reqs)} requests")
    statuses = []
    ok_all = True
    for item in items:
        if item.get("ok"):
            statuses.append((True, wire_to_tensor(item["epsilon"])))
        else:
            ok_all = False
            statuses.append((False, str(item.get("error", "unknown server error"))))
    if not ok_all:
        raise PartialFailure(statuses)
    return [payload for _, payload in statuses]


class RemoteBackend(Backend):
    """Backend facade over the wire protocol; shareable across threads."""

    def __init__(self, cfg: RemoteConfig):
        self._cfg = cfg
        self._transport = _Transport(cfg)
        self._desc_lock = threading.Lock()
        self._desc: BackendDescriptor | None = None

    def descriptor(self) -> BackendDescriptor:
        with self._desc_lock:
            if self._desc is None:
                self._desc = remote_descriptor(self._cfg, self._transport)
            return self._desc

    def generate(self, req: GenerationRequest) -> GenerationResult:
        return remote_generate(self._cfg, req, self._transport)

    def denoise(self, req: DenoiseRequest) -> TensorBuffer:
        return remote_denoise(self._cfg, req, self._transport)

    def denoise_batch(self, reqs: list[DenoiseRequest]) -> list[TensorBuffer]:
        return remote_denoise_batch(self._cfg, reqs, self._transport)

    def health(self) -> bool:
        try:
            d = self._transport.call("GET", "/v1/health")
        except (Unreachable, ServerError, BackendUnavailable):
            return False
        return bool(d.get("ok"))
