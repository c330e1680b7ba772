"""Tensor/image containers, the diffusion noise schedule, and forward noising.

The forward process is variance preserving: x_t = alpha_t * x + sigma_t * eps
with alpha_t = sqrt(alpha_bar[t]) and sigma_t = sqrt(1 - alpha_bar[t]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import InvalidScheduleParams, ShapeMismatch

DEFAULT_T_TOTAL = 1000
DEFAULT_BETA_START = 8.5e-4
DEFAULT_BETA_END = 1.2e-2


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class TensorBuffer:
    """Shape-annotated float32 array; the backend's working-space payload."""

    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if any(d <= 0 for d in self.shape):
            raise ValueError(f"non-positive dimension in shape {self.shape}")
        v = np.asarray(self.values, dtype=np.float32).reshape(self.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("tensor contains non-finite values")
        object.__setattr__(self, "values", _freeze(v))

    @classmethod
    def from_array(cls, arr) -> "TensorBuffer":
        arr = np.asarray(arr, dtype=np.float32)
        return cls(arr.shape, arr)

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape))

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Display-space RGB image: float pixels clamped to [0, 1], row-major."""

    width: int
    height: int
    pixels: np.ndarray
    channels: int = 3

    def __post_init__(self):
        if self.channels != 3:
            raise ValueError("only 3-channel images are supported")
        p = np.asarray(self.pixels, dtype=np.float32).reshape(
            self.height, self.width, 3
        )
        object.__setattr__(self, "pixels", _freeze(np.clip(p, 0.0, 1.0)))

    @classmethod
    def from_array(cls, arr) -> "ImageBuffer":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) array, got {arr.shape}")
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)

    def to_uint8(self) -> np.ndarray:
        """Symmetric [0,1] -> 8-bit quantization (round half away handled by numpy)."""
        return np.round(self.pixels * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "ImageBuffer":
        return cls.from_array(np.asarray(arr, dtype=np.float32) / 255.0)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """alpha_bar cumulative products for T discrete steps."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 1:
            raise InvalidScheduleParams("alpha_bar must be a non-empty 1-D array")
        if not (np.all(ab > 0.0) and np.all(ab <= 1.0)):
            raise InvalidScheduleParams("alpha_bar values must lie in (0, 1]")
        if not np.all(np.diff(ab) < 0.0):
            raise InvalidScheduleParams("alpha_bar must be strictly decreasing")
        if ab[0] < 0.99:
            raise InvalidScheduleParams("alpha_bar[0] must be >= 0.99")
        object.__setattr__(self, "alpha_bar", _freeze(ab))

    @property
    def t_total(self) -> int:
        return len(self.alpha_bar)

    def alpha(self, t_index: int) -> float:
        return math.sqrt(float(self.alpha_bar[t_index]))

    def sigma(self, t_index: int) -> float:
        return math.sqrt(1.0 - float(self.alpha_bar[t_index]))

    def t_index_for(self, t_fraction: float) -> int:
        """Fractional timestep to discrete index: floor(t * T)."""
        if not 0.0 < t_fraction < 1.0:
            raise InvalidScheduleParams(f"t_fraction {t_fraction} outside (0, 1)")
        return int(math.floor(t_fraction * self.t_total))


@dataclass(frozen=True)
class NoiseSample:
    """Reproducible standard-normal draw: same (seed, shape) -> same bits."""

    seed: int
    tensor: TensorBuffer = field(compare=False)


def make_schedule(
    t_total: int = DEFAULT_T_TOTAL,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Scaled-linear beta schedule: betas linear in sqrt-space, then squared."""
    if t_total < 1:
        raise InvalidScheduleParams(f"t_total {t_total} must be >= 1")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise InvalidScheduleParams(
            f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = (
        np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), t_total, dtype=np.float64)
        ** 2
    )
    return NoiseSchedule(np.cumprod(1.0 - betas))


def sample_noise(seed: int, shape) -> NoiseSample:
    """Standard-normal tensor from the counter-based generator keyed by seed."""
    return NoiseSample(seed=seed, tensor=TensorBuffer.from_array(rng.normal_array(seed, shape)))


def add_noise(
    x: TensorBuffer, schedule: NoiseSchedule, t_index: int, eps: NoiseSample
) -> TensorBuffer:
    """Forward noising: alpha_t * x + sigma_t * eps, elementwise in float32."""
    if eps.tensor.shape != x.shape:
        raise ShapeMismatch(f"noise shape {eps.tensor.shape} != input shape {x.shape}")
    if not 0 <= t_index < schedule.t_total:
        raise ShapeMismatch(f"t_index {t_index} outside [0, {schedule.t_total})")
    a = np.float32(schedule.alpha(t_index))
    s = np.float32(schedule.sigma(t_index))
    return TensorBuffer(x.shape, a * x.values + s * eps.tensor.values)
