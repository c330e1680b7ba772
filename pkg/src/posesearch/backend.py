"""Novel-view generator/denoiser interface plus the in-process synthetic oracle.

The oracle renders a procedurally generated blob object (depth-sorted shaded
sphere splats on white) and emulates an imperfect view generator by adding
pseudo-noise whose magnitude grows with the requested viewpoint change. Its
denoiser is the closed-form inversion of the forward noising around its own
generation, so matching scores have analytically known minima.

All floating-point expressions on the render path are written with a pinned
evaluation order; an independent reimplementation that follows the same
formulas reproduces renders bit-for-bit (this is what the wire-protocol
parity suite checks).
"""

from __future__ import annotations

import hashlib
import logging
import math
import threading
from abc import ABC, abstractmethod
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import rng
from .errors import InvalidConditioning, ShapeMismatch
from .geometry import (
    Viewpoint,
    ViewChange,
    apply_change,
    fibonacci_hemisphere,
    great_circle_deg,
    viewpoint_to_rotation,
)
from .imaging import ImageBuffer, NoiseSchedule, TensorBuffer, make_schedule

log = logging.getLogger(__name__)

DEFAULT_IMAGE_SIZE = 64
MIN_IMAGE_SIZE = 32

# Blob-object generation constants. Centers stay well inside the unit ball so
# every camera at radius 1 sees the whole object.
N_BLOBS = 24
BLOB_CENTER_SCALE = 0.35
BLOB_RADIUS_MIN = 0.05
BLOB_RADIUS_SPAN = 0.07
COLOR_MIN = 0.1
COLOR_SPAN = 0.8

FOCAL_FACTOR = 0.85  # focal length in pixels = FOCAL_FACTOR * image size
AMBIENT = 0.35
DIFFUSE = 0.65
LIGHT_WORLD = (0.35, 0.45, 0.82)

# Asymmetry guard: a redrawn object must differ from its own 180-degree
# azimuth rotation by more than this RMS pixel distance at every probe view.
ASYM_PROBE_VIEWS = 8
ASYM_PROBE_SIZE = 48
ASYM_MIN_RMS = 0.05
_MAX_REDRAWS = 64

_POLE_NUDGE = 1e-5
_CACHE_KEY_DIGITS = 6


def encode_image(img: ImageBuffer) -> TensorBuffer:
    """Display image -> working-space tensor (the oracle works in pixel space)."""
    return TensorBuffer.from_array(img.pixels)


def decode_tensor(t: TensorBuffer) -> ImageBuffer:
    if len(t.shape) != 3 or t.shape[2] != 3:
        raise ShapeMismatch(f"cannot decode shape {t.shape} as an RGB image")
    return ImageBuffer.from_array(np.clip(t.values, 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class BackendDescriptor:
    name: str
    working_shape: tuple[int, ...]
    schedule: NoiseSchedule
    supports_batching: bool = False


@dataclass(frozen=True, eq=False)
class GenerationRequest:
    """Ask for a novel view of the object shown in `cond`, moved by `change`."""

    cond: ImageBuffer
    change: ViewChange
    seed: int = 0

    def __post_init__(self):
        if self.change.d_radius != 0.0:
            raise ValueError("generation keeps the camera radius fixed (d_radius = 0)")


@dataclass(frozen=True, eq=False)
class GenerationResult:
    image: ImageBuffer
    encoding: TensorBuffer


@dataclass(frozen=True, eq=False)
class DenoiseRequest:
    noisy: TensorBuffer
    t_index: int
    cond: ImageBuffer
    change: ViewChange

    def __post_init__(self):
        if self.t_index < 0:
            raise ValueError(f"t_index {self.t_index} must be nonnegative")


@dataclass(frozen=True)
class DegradationModel:
    """Generation-quality decay: added-noise std = gain * (angle/180)**exponent.

    The angle is the great-circle angle between the conditioning and target
    camera positions, so small viewpoint changes generate almost perfectly and
    large ones degrade. gain = 0 is the perfect oracle.
    """

    gain: float = 0.0
    exponent: float = 1.0

    def __post_init__(self):
        if self.gain < 0.0:
            raise ValueError(f"gain {self.gain} must be >= 0")
        if not self.exponent > 0.0:
            raise ValueError(f"exponent {self.exponent} must be > 0")

    def std_for_angle(self, angle_deg: float) -> float:
        if self.gain == 0.0 or angle_deg <= 0.0:
            return 0.0
        return self.gain * (angle_deg / 180.0) ** self.exponent


class Backend(ABC):
    """Generator/denoiser pair consumed by the scoring layer."""

    @abstractmethod
    def descriptor(self) -> BackendDescriptor: ...

    @abstractmethod
    def generate(self, req: GenerationRequest) -> GenerationResult: ...

    @abstractmethod
    def denoise(self, req: DenoiseRequest) -> TensorBuffer: ...

    def denoise_batch(self, reqs: list[DenoiseRequest]) -> list[TensorBuffer]:
        return [self.denoise(r) for r in reqs]


# --------------------------------------------------------------------------
# Blob objects


@dataclass(frozen=True, eq=False)
class OracleObject:
    """Seeded bundle of shaded sphere splats; the oracle's ground-truth scene."""

    seed: int
    centers: np.ndarray  # (n, 3) float64, inside the unit ball
    radii: np.ndarray  # (n,) float64
    colors: np.ndarray  # (n, 3) float64 in (0, 1)

    @property
    def blobs(self) -> list[tuple[np.ndarray, float, np.ndarray]]:
        return [
            (self.centers[i].copy(), float(self.radii[i]), self.colors[i].copy())
            for i in range(len(self.radii))
        ]

    @classmethod
    def from_seed(cls, seed: int) -> "OracleObject":
        for attempt in range(_MAX_REDRAWS):
            centers, radii, colors = _draw_blobs(seed, attempt)
            if _is_asymmetric(centers, radii, colors):
                return cls(seed=seed, centers=centers, radii=radii, colors=colors)
        raise RuntimeError(f"no asymmetric blob draw found for seed {seed}")


def _draw_blobs(seed: int, attempt: int):
    g = rng.generator(rng.derive_seed("blob", seed, attempt))
    normals = g.standard_normal((N_BLOBS, 3))
    u_r = g.random(N_BLOBS)
    radii = BLOB_RADIUS_MIN + g.random(N_BLOBS) * BLOB_RADIUS_SPAN
    colors = COLOR_MIN + g.random((N_BLOBS, 3)) * COLOR_SPAN
    norms = np.sqrt(
        normals[:, 0] * normals[:, 0]
        + normals[:, 1] * normals[:, 1]
        + normals[:, 2] * normals[:, 2]
    )
    norms = np.maximum(norms, 1e-12)
    scale = BLOB_CENTER_SCALE * np.cbrt(u_r)
    centers = (normals / norms[:, None]) * scale[:, None]
    return centers, radii, colors


def _is_asymmetric(centers, radii, colors) -> bool:
    for v in fibonacci_hemisphere(ASYM_PROBE_VIEWS):
        flipped = Viewpoint(v.azimuth_deg + 180.0, v.elevation_deg, v.radius)
        a = _render_arrays(centers, radii, colors, v, ASYM_PROBE_SIZE)
        b = _render_arrays(centers, radii, colors, flipped, ASYM_PROBE_SIZE)
        d = a.astype(np.float64) - b.astype(np.float64)
        if math.sqrt(float(np.mean(d * d))) <= ASYM_MIN_RMS:
            return False
    return True


# --------------------------------------------------------------------------
# Renderer


@njit(cache=True)
def _splat_kernel(canvas, us, vs, rs, cols, lx, ly, lz):  # pragma: no cover
    size = canvas.shape[0]
    for b in range(us.shape[0]):
        ub = us[b]
        vb = vs[b]
        rb = rs[b]
        if rb <= 0.0:
            continue
        x0 = int(math.floor(ub - rb - 1.0))
        x1 = int(math.floor(ub + rb + 1.0))
        y0 = int(math.floor(vb - rb - 1.0))
        y1 = int(math.floor(vb + rb + 1.0))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > size - 1:
            x1 = size - 1
        if y1 > size - 1:
            y1 = size - 1
        for y in range(y0, y1 + 1):
            dy = (y + 0.5) - vb
            for x in range(x0, x1 + 1):
                dx = (x + 0.5) - ub
                dist = math.sqrt(dx * dx + dy * dy)
                cov = (rb + 0.5) - dist
                if cov <= 0.0:
                    continue
                if cov > 1.0:
                    cov = 1.0
                nx = dx / rb
                nyd = dy / rb
                n2 = nx * nx + nyd * nyd
                if n2 >= 1.0:
                    nz = 0.0
                else:
                    nz = math.sqrt(1.0 - n2)
                lam = (nx * lx + (0.0 - nyd) * ly) + nz * lz
                if lam < 0.0:
                    lam = 0.0
                shade = AMBIENT + DIFFUSE * lam
                one_m = 1.0 - cov
                canvas[y, x, 0] = canvas[y, x, 0] * one_m + (cols[b, 0] * shade) * cov
                canvas[y, x, 1] = canvas[y, x, 1] * one_m + (cols[b, 1] * shade) * cov
                canvas[y, x, 2] = canvas[y, x, 2] * one_m + (cols[b, 2] * shade) * cov


def _render_arrays(centers, radii, colors, v: Viewpoint, size: int) -> np.ndarray:
    """Perspective splat render -> float32 (size, size, 3) pixels in [0, 1]."""
    rot = viewpoint_to_rotation(v)
    cam = v.position()
    f = FOCAL_FACTOR * size
    c0 = 0.5 * size

    d0 = centers[:, 0] - cam[0]
    d1 = centers[:, 1] - cam[1]
    d2 = centers[:, 2] - cam[2]
    xc = rot[0, 0] * d0 + rot[0, 1] * d1 + rot[0, 2] * d2
    yc = rot[1, 0] * d0 + rot[1, 1] * d1 + rot[1, 2] * d2
    zc = rot[2, 0] * d0 + rot[2, 1] * d1 + rot[2, 2] * d2
    depth = 0.0 - zc

    us = np.empty(len(radii))
    vs = np.empty(len(radii))
    rs = np.empty(len(radii))
    for i in range(len(radii)):
        if depth[i] <= 1e-6:
            us[i] = 0.0
            vs[i] = 0.0
            rs[i] = -1.0  # behind the camera: kernel skips it
            continue
        us[i] = c0 + f * (xc[i] / depth[i])
        vs[i] = c0 - f * (yc[i] / depth[i])
        rs[i] = f * (radii[i] / depth[i])

    lw0, lw1, lw2 = LIGHT_WORLD
    ln = math.sqrt(lw0 * lw0 + lw1 * lw1 + lw2 * lw2)
    wx, wy, wz = lw0 / ln, lw1 / ln, lw2 / ln
    lx = rot[0, 0] * wx + rot[0, 1] * wy + rot[0, 2] * wz
    ly = rot[1, 0] * wx + rot[1, 1] * wy + rot[1, 2] * wz
    lz = rot[2, 0] * wx + rot[2, 1] * wy + rot[2, 2] * wz

    order = np.argsort(-depth, kind="stable")  # painter's: far to near
    canvas = np.ones((size, size, 3))
    _splat_kernel(canvas, us[order], vs[order], rs[order],
                  np.ascontiguousarray(colors[order]), lx, ly, lz)
    return canvas.astype(np.float32)


# --------------------------------------------------------------------------
# Conditioning-image resolution

# Digest of 8-bit-quantized pixels -> viewpoint, per (object seed, size).
# Populated by every render, so any image this process produced (or an exact
# byte-equal copy, e.g. after a PNG round trip) resolves to its viewpoint.
_RESOLVE_MEMO: dict[tuple[int, int], dict[bytes, Viewpoint]] = {}
_MEMO_LOCK = threading.Lock()


def _pixel_digest(pix: np.ndarray) -> bytes:
    q = np.round(pix * 255.0).astype(np.uint8)
    return hashlib.blake2b(q.tobytes(), digest_size=16).digest()


def _register_render(obj_seed: int, size: int, pix: np.ndarray, v: Viewpoint) -> None:
    with _MEMO_LOCK:
        _RESOLVE_MEMO.setdefault((obj_seed, size), {})[_pixel_digest(pix)] = v


def _lookup_render(obj_seed: int, size: int, pix: np.ndarray) -> Viewpoint | None:
    with _MEMO_LOCK:
        return _RESOLVE_MEMO.get((obj_seed, size), {}).get(_pixel_digest(pix))


def oracle_render(obj: OracleObject, v: Viewpoint, size: int) -> GenerationResult:
    """Clean (undegraded) render of the object from viewpoint v."""
    if size < MIN_IMAGE_SIZE:
        raise ValueError(f"render size {size} below minimum {MIN_IMAGE_SIZE}")
    pix = _render_arrays(obj.centers, obj.radii, obj.colors, v, size)
    _register_render(obj.seed, size, pix, v)
    img = ImageBuffer.from_array(pix)
    return GenerationResult(image=img, encoding=TensorBuffer.from_array(pix))


# --------------------------------------------------------------------------
# The oracle backend


def _round_key(*vals: float) -> tuple:
    return tuple(round(float(x), _CACHE_KEY_DIGITS) for x in vals)


def _quant_tenths(x: float) -> int:
    # round-half-up at 0.1-degree resolution; stable across implementations
    return int(math.floor(x * 10.0 + 0.5))


def _degradation_seed(obj_seed: int, cond: Viewpoint, change: ViewChange) -> int:
    return rng.derive_seed(
        "degrade",
        obj_seed,
        _quant_tenths(cond.azimuth_deg),
        _quant_tenths(cond.elevation_deg),
        _quant_tenths(cond.radius),
        _quant_tenths(change.d_elevation_deg),
        _quant_tenths(change.d_azimuth_deg),
        _quant_tenths(change.d_radius),
    )


class _LruCache:
    def __init__(self, cap: int):
        self._cap = cap
        self._d: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            if key in self._d:
                self._d.move_to_end(key)
                return self._d[key]
        return None

    def put(self, key, value):
        with self._lock:
            self._d[key] = value
            self._d.move_to_end(key)
            while len(self._d) > self._cap:
                self._d.popitem(last=False)


class OracleBackend(Backend):
    """Deterministic synthetic generator/denoiser around one blob object.

    generate: renders the true object at (resolved conditioning viewpoint +
    change) and adds seeded pseudo-noise per the degradation model. The
    request seed is accepted but unused: degradation noise is keyed by
    (object, conditioning viewpoint, change) so identical requests are
    consistent regardless of caller-side seeding.

    denoise: (noisy - alpha_t * G_enc) / sigma_t with G_enc the generation
    for (cond, change). With gain 0 this recovers the injected noise exactly.
    """

    def __init__(
        self,
        obj: OracleObject,
        degradation: DegradationModel,
        schedule: NoiseSchedule,
        size: int = DEFAULT_IMAGE_SIZE,
        fallback_resolve: bool = True,
    ):
        if size < MIN_IMAGE_SIZE:
            raise ValueError(f"image size {size} below minimum {MIN_IMAGE_SIZE}")
        self._obj = obj
        self._degradation = degradation
        self._schedule = schedule
        self._size = int(size)
        self._fallback_resolve = fallback_resolve
        self._render_cache = _LruCache(1500)
        self._gen_cache = _LruCache(1500)
        # id -> (pixels ref, viewpoint): the held reference keeps the id valid
        self._resolve_cache = _LruCache(16)
        self._desc = BackendDescriptor(
            name=f"oracle-blobs-{obj.seed & rng.MASK64:016x}",
            working_shape=(self._size, self._size, 3),
            schedule=schedule,
            supports_batching=False,
        )

    @property
    def size(self) -> int:
        return self._size

    @property
    def object_seed(self) -> int:
        return self._obj.seed

    def descriptor(self) -> BackendDescriptor:
        return self._desc

    def register_viewpoints(self, catalog: list[Viewpoint]) -> int:
        """Render the catalog so those conditioning images resolve exactly."""
        for v in catalog:
            self._render(v)
        return len(catalog)

    # -- internals ---------------------------------------------------------

    def _render(self, v: Viewpoint) -> np.ndarray:
        key = _round_key(v.azimuth_deg, v.elevation_deg, v.radius)
        pix = self._render_cache.get(key)
        if pix is None:
            pix = _render_arrays(
                self._obj.centers, self._obj.radii, self._obj.colors, v, self._size
            )
            _register_render(self._obj.seed, self._size, pix, v)
            self._render_cache.put(key, pix)
        return pix

    def resolve(self, cond: ImageBuffer) -> Viewpoint:
        """Map a conditioning image back to the viewpoint it was rendered from."""
        if (cond.height, cond.width) != (self._size, self._size):
            raise InvalidConditioning(
                f"conditioning image is {cond.height}x{cond.width}, "
                f"backend works at {self._size}x{self._size}"
            )
        hit = self._resolve_cache.get(id(cond.pixels))
        if hit is not None and hit[0] is cond.pixels:
            return hit[1]
        v = _lookup_render(self._obj.seed, self._size, cond.pixels)
        if v is not None:
            self._resolve_cache.put(id(cond.pixels), (cond.pixels, v))
            return v
        if not self._fallback_resolve:
            raise InvalidConditioning("conditioning image not recognized")
        log.warning("conditioning image not in render registry; fitting viewpoint")
        v = self._search_viewpoint(cond.pixels)
        # memoize under the image's own digest: repeated conditioning on the
        # same foreign image must not repeat the grid fit (every denoise of a
        # scoring pass resolves the query image)
        _register_render(self._obj.seed, self._size, cond.pixels, v)
        self._resolve_cache.put(id(cond.pixels), (cond.pixels, v))
        return v

    def _search_viewpoint(self, pix: np.ndarray) -> Viewpoint:
        """Best-effort viewpoint fit for images this process never rendered."""
        target = pix.astype(np.float64)

        def sse(v: Viewpoint) -> float:
            d = self._render(v).astype(np.float64) - target
            return float(np.sum(d * d))

        best, best_e = None, math.inf
        for el in range(-80, 81, 10):
            for az in range(0, 360, 10):
                v = Viewpoint(float(az), float(el))
                e = sse(v)
                if e < best_e:
                    best, best_e = v, e
        for step in (1.0, 0.1):
            pivot = best
            for el10 in range(-10, 11):
                for az10 in range(-10, 11):
                    el = min(85.0, max(-85.0, pivot.elevation_deg + el10 * step))
                    v = Viewpoint(pivot.azimuth_deg + az10 * step, el)
                    e = sse(v)
                    if e < best_e:
                        best, best_e = v, e
        return best

    def _target_of(self, cond_vp: Viewpoint, change: ViewChange) -> Viewpoint:
        target = apply_change(cond_vp, change)
        el = target.elevation_deg
        if abs(el) >= 90.0 - 1e-6:
            # exact-pole targets are nudged off the degenerate look-at axis
            el = math.copysign(90.0 - _POLE_NUDGE, el)
            target = Viewpoint(target.azimuth_deg, el, target.radius)
        return target

    def _generate_encoding(self, cond_vp: Viewpoint, change: ViewChange) -> np.ndarray:
        key = (
            _round_key(cond_vp.azimuth_deg, cond_vp.elevation_deg, cond_vp.radius),
            _round_key(change.d_elevation_deg, change.d_azimuth_deg, change.d_radius),
        )
        enc = self._gen_cache.get(key)
        if enc is not None:
            return enc
        target = self._target_of(cond_vp, change)
        clean = self._render(target)
        std = self._degradation.std_for_angle(great_circle_deg(cond_vp, target))
        if std == 0.0:
            enc = clean
        else:
            noise = rng.normal_array(
                _degradation_seed(self._obj.seed, cond_vp, change), clean.shape
            )
            enc = clean + noise * np.float32(std)
        self._gen_cache.put(key, enc)
        return enc

    # -- Backend interface -------------------------------------------------

    def generate(self, req: GenerationRequest) -> GenerationResult:
        cond_vp = self.resolve(req.cond)
        enc = self._generate_encoding(cond_vp, req.change)
        return GenerationResult(
            image=ImageBuffer.from_array(np.clip(enc, 0.0, 1.0)),
            encoding=TensorBuffer.from_array(enc),
        )

    def denoise(self, req: DenoiseRequest) -> TensorBuffer:
        shape = self._desc.working_shape
        if req.noisy.shape != shape:
            raise ShapeMismatch(f"noisy shape {req.noisy.shape} != {shape}")
        if req.t_index >= self._schedule.t_total:
            raise ShapeMismatch(
                f"t_index {req.t_index} outside schedule of {self._schedule.t_total}"
            )
        cond_vp = self.resolve(req.cond)
        g_enc = self._generate_encoding(cond_vp, req.change)
        a = np.float32(self._schedule.alpha(req.t_index))
        s = np.float32(self._schedule.sigma(req.t_index))
        eps = (req.noisy.values - a * g_enc) / s
        return TensorBuffer.from_array(eps)


def make_oracle_backend(
    obj: OracleObject,
    degradation: DegradationModel | None = None,
    schedule: NoiseSchedule | None = None,
    size: int = DEFAULT_IMAGE_SIZE,
) -> OracleBackend:
    return OracleBackend(
        obj=obj,
        degradation=degradation if degradation is not None else DegradationModel(),
        schedule=schedule if schedule is not None else make_schedule(),
        size=size,
    )
