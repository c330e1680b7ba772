"""Pure-numpy reimplementation of the blob-splat synthetic oracle.

The client package renders through a compiled kernel; this module re-derives
every pixel with plain numpy ufuncs. Because both sides evaluate the same
IEEE-754 double expression tree in the same order (explicit three-term dot
products, stable far-to-near sort, float64 canvas quantized to float32 at the
end), the two implementations agree bit-for-bit, not just within tolerance.
Keep it that way: any algebraic "simplification" here is a parity break.
"""

from __future__ import annotations

import hashlib
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import rng
from .geom import (
    ViewChange,
    Viewpoint,
    apply_change,
    fibonacci_hemisphere,
    great_circle_deg,
    viewpoint_to_rotation,
)

DEFAULT_IMAGE_SIZE = 64
MIN_IMAGE_SIZE = 32

N_BLOBS = 24
BLOB_CENTER_SCALE = 0.35
BLOB_RADIUS_MIN = 0.05
BLOB_RADIUS_SPAN = 0.07
COLOR_MIN = 0.1
COLOR_SPAN = 0.8

FOCAL_FACTOR = 0.85
AMBIENT = 0.35
DIFFUSE = 0.65
LIGHT_WORLD = (0.35, 0.45, 0.82)

ASYM_PROBE_VIEWS = 8
ASYM_PROBE_SIZE = 48
ASYM_MIN_RMS = 0.05
_MAX_REDRAWS = 64

_POLE_NUDGE = 1e-5
_CACHE_KEY_DIGITS = 6

DEFAULT_T_TOTAL = 1000
DEFAULT_BETA_START = 8.5e-4
DEFAULT_BETA_END = 1.2e-2


class ResolveError(ValueError):
    """Conditioning image could not be mapped back to a viewpoint."""


def make_alpha_bar(
    t_total: int = DEFAULT_T_TOTAL,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> np.ndarray:
    """Scaled-linear betas (linear in sqrt-space, then squared) -> cumprod."""
    betas = (
        np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), t_total, dtype=np.float64)
        ** 2
    )
    return np.cumprod(1.0 - betas)


# --------------------------------------------------------------------------
# Blob objects


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
        a = render_arrays(centers, radii, colors, v, ASYM_PROBE_SIZE)
        b = render_arrays(centers, radii, colors, flipped, ASYM_PROBE_SIZE)
        d = a.astype(np.float64) - b.astype(np.float64)
        if math.sqrt(float(np.mean(d * d))) <= ASYM_MIN_RMS:
            return False
    return True


@dataclass(frozen=True, eq=False)
class BlobObject:
    seed: int
    centers: np.ndarray
    radii: np.ndarray
    colors: np.ndarray

    @classmethod
    def from_seed(cls, seed: int) -> "BlobObject":
        # redraw until the object is visibly chiral, so no two viewpoints
        # produce the same image (required for digest-based resolution)
        for attempt in range(_MAX_REDRAWS):
            centers, radii, colors = _draw_blobs(seed, attempt)
            if _is_asymmetric(centers, radii, colors):
                return cls(seed=seed, centers=centers, radii=radii, colors=colors)
        raise RuntimeError(f"no asymmetric blob draw found for seed {seed}")


# --------------------------------------------------------------------------
# Renderer


def _splat(canvas, us, vs, rs, cols, lx, ly, lz) -> None:
    size = canvas.shape[0]
    for b in range(us.shape[0]):
        ub = float(us[b])
        vb = float(vs[b])
        rb = float(rs[b])
        if rb <= 0.0:
            continue
        x0 = max(int(math.floor(ub - rb - 1.0)), 0)
        x1 = min(int(math.floor(ub + rb + 1.0)), size - 1)
        y0 = max(int(math.floor(vb - rb - 1.0)), 0)
        y1 = min(int(math.floor(vb + rb + 1.0)), size - 1)
        if x0 > x1 or y0 > y1:
            continue
        dy = (np.arange(y0, y1 + 1, dtype=np.float64) + 0.5) - vb
        dx = (np.arange(x0, x1 + 1, dtype=np.float64) + 0.5) - ub
        DX = dx[None, :]
        DY = dy[:, None]
        dist = np.sqrt(DX * DX + DY * DY)
        cov = (rb + 0.5) - dist
        mask = cov > 0.0
        if not mask.any():
            continue
        cov = np.minimum(cov, 1.0)
        nx = DX / rb
        nyd = DY / rb
        n2 = nx * nx + nyd * nyd
        nz = np.where(n2 >= 1.0, 0.0, np.sqrt(np.maximum(0.0, 1.0 - n2)))
        lam = (nx * lx + (0.0 - nyd) * ly) + nz * lz
        lam = np.maximum(lam, 0.0)
        shade = AMBIENT + DIFFUSE * lam
        one_m = 1.0 - cov
        sub = canvas[y0 : y1 + 1, x0 : x1 + 1]
        for c in range(3):
            updated = sub[:, :, c] * one_m + (cols[b, c] * shade) * cov
            sub[:, :, c] = np.where(mask, updated, sub[:, :, c])


def render_arrays(centers, radii, colors, v: Viewpoint, size: int) -> np.ndarray:
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
            rs[i] = -1.0  # behind the camera: splat loop skips it
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
    _splat(canvas, us[order], vs[order], rs[order],
           np.ascontiguousarray(colors[order]), lx, ly, lz)
    return canvas.astype(np.float32)


# --------------------------------------------------------------------------
# Degradation and caches


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


def degradation_std(gain: float, exponent: float, angle_deg: float) -> float:
    if gain == 0.0 or angle_deg <= 0.0:
        return 0.0
    return gain * (angle_deg / 180.0) ** exponent


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


def _pixel_digest(pix: np.ndarray) -> bytes:
    q = np.round(pix * 255.0).astype(np.uint8)
    return hashlib.blake2b(q.tobytes(), digest_size=16).digest()


# --------------------------------------------------------------------------
# The mirror oracle


class MirrorOracle:
    """Generator/denoiser over one blob object, served behind the adapter.

    generate: render at (resolved conditioning viewpoint + change), add
    pseudo-noise with std = gain * (angle/180)**exponent seeded by the
    0.1-degree-quantized viewpoints (the request seed is accepted but unused).
    denoise: (noisy - alpha_t * G) / sigma_t around its own generation.
    """

    def __init__(
        self,
        object_seed: int,
        gain: float = 0.0,
        exponent: float = 1.0,
        size: int = DEFAULT_IMAGE_SIZE,
    ):
        if size < MIN_IMAGE_SIZE:
            raise ValueError(f"image size {size} below minimum {MIN_IMAGE_SIZE}")
        if gain < 0.0 or not exponent > 0.0:
            raise ValueError("need gain >= 0 and exponent > 0")
        self.obj = BlobObject.from_seed(object_seed)
        self.gain = float(gain)
        self.exponent = float(exponent)
        self.size = int(size)
        self.alpha_bar = make_alpha_bar()
        self._digests: dict[bytes, Viewpoint] = {}
        self._digest_lock = threading.Lock()
        self._render_cache = _LruCache(1500)
        self._gen_cache = _LruCache(1500)

    @property
    def t_total(self) -> int:
        return len(self.alpha_bar)

    @property
    def name(self) -> str:
        return f"oracle-blobs-{self.obj.seed & rng.MASK64:016x}"

    def alpha(self, t_index: int) -> float:
        return math.sqrt(float(self.alpha_bar[t_index]))

    def sigma(self, t_index: int) -> float:
        return math.sqrt(1.0 - float(self.alpha_bar[t_index]))

    def register_viewpoints(self, catalog: list[Viewpoint]) -> int:
        for v in catalog:
            self.render(v)
        return len(catalog)

    def render(self, v: Viewpoint) -> np.ndarray:
        key = _round_key(v.azimuth_deg, v.elevation_deg, v.radius)
        pix = self._render_cache.get(key)
        if pix is None:
            pix = render_arrays(self.obj.centers, self.obj.radii, self.obj.colors,
                                v, self.size)
            with self._digest_lock:
                self._digests[_pixel_digest(pix)] = v
            self._render_cache.put(key, pix)
        return pix

    def resolve(self, cond: np.ndarray) -> Viewpoint:
        if cond.shape != (self.size, self.size, 3):
            raise ResolveError(
                f"conditioning image is {cond.shape}, expected "
                f"({self.size}, {self.size}, 3)"
            )
        with self._digest_lock:
            hit = self._digests.get(_pixel_digest(cond))
        if hit is not None:
            return hit
        v = self._search_viewpoint(cond)
        # memoize under the image's own digest so repeated conditioning on
        # the same foreign image does not repeat the grid fit
        with self._digest_lock:
            self._digests[_pixel_digest(cond)] = v
        return v

    def _search_viewpoint(self, pix: np.ndarray) -> Viewpoint:
        """Coarse-to-fine grid fit for images never rendered by this process."""
        target = pix.astype(np.float64)

        def sse(v: Viewpoint) -> float:
            d = self.render(v).astype(np.float64) - target
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
        clean = self.render(target)
        std = degradation_std(self.gain, self.exponent, great_circle_deg(cond_vp, target))
        if std == 0.0:
            enc = clean
        else:
            noise = rng.normal_array(
                _degradation_seed(self.obj.seed, cond_vp, change), clean.shape
            )
            enc = clean + noise * np.float32(std)
        self._gen_cache.put(key, enc)
        return enc

    def generate(self, cond: np.ndarray, change: ViewChange) -> tuple[np.ndarray, np.ndarray]:
        """-> (display image in [0,1], working-space encoding), both float32."""
        cond_vp = self.resolve(cond)
        enc = self._generate_encoding(cond_vp, change)
        return np.clip(enc, 0.0, 1.0), enc

    def denoise(
        self, noisy: np.ndarray, t_index: int, cond: np.ndarray, change: ViewChange
    ) -> np.ndarray:
        if noisy.shape != (self.size, self.size, 3):
            raise ValueError(f"noisy shape {noisy.shape} != {(self.size, self.size, 3)}")
        if not 0 <= t_index < self.t_total:
            raise ValueError(f"t_index {t_index} outside schedule of {self.t_total}")
        cond_vp = self.resolve(cond)
        g_enc = self._generate_encoding(cond_vp, change)
        a = np.float32(self.alpha(t_index))
        s = np.float32(self.sigma(t_index))
        return (noisy - a * g_enc) / s
