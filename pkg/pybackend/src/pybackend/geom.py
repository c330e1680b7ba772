"""Viewpoint math for the mirror oracle.

Identical conventions to the client package: z-up world, azimuth from +x
toward +y, elevation from the xy-plane toward +z, degrees everywhere.
The rotation construction and the wrap rules are part of the parity
surface — every formula here must match the client bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_POLE_EPS = 1e-6
GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0


class PoleDegenerate(ValueError):
    pass


def wrap_azimuth(deg: float) -> float:
    a = float(deg) % 360.0
    return a if a != 360.0 else 0.0


def wrap_delta(deg: float) -> float:
    d = (float(deg) + 180.0) % 360.0 - 180.0
    return 180.0 if d == -180.0 else d


@dataclass(frozen=True)
class Viewpoint:
    azimuth_deg: float
    elevation_deg: float
    radius: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "azimuth_deg", wrap_azimuth(self.azimuth_deg))
        if not -90.0 <= self.elevation_deg <= 90.0:
            raise ValueError(f"elevation {self.elevation_deg} outside [-90, 90]")
        if not self.radius > 0.0:
            raise ValueError(f"radius {self.radius} must be positive")

    def position(self) -> np.ndarray:
        el = math.radians(self.elevation_deg)
        az = math.radians(self.azimuth_deg)
        return self.radius * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )


@dataclass(frozen=True)
class ViewChange:
    d_elevation_deg: float
    d_azimuth_deg: float
    d_radius: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "d_azimuth_deg", wrap_delta(self.d_azimuth_deg))


def apply_change(v: Viewpoint, change: ViewChange) -> Viewpoint:
    """Apply a delta, continuing over the pole (elevation reflects, azimuth
    flips by 180) when pushed past +/-90."""
    el = v.elevation_deg + change.d_elevation_deg
    az = v.azimuth_deg + change.d_azimuth_deg
    if el > 90.0:
        el = 180.0 - el
        az += 180.0
    elif el < -90.0:
        el = -180.0 - el
        az += 180.0
    return Viewpoint(az, el, v.radius + change.d_radius)


def viewpoint_to_rotation(v: Viewpoint) -> np.ndarray:
    """World-to-camera look-at rotation, rows (right, up, backward)."""
    if abs(v.elevation_deg) >= 90.0 - _POLE_EPS:
        raise PoleDegenerate(f"elevation {v.elevation_deg} too close to the pole")
    pos = v.position()
    forward = -pos / np.linalg.norm(pos)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return np.stack([right, up, -forward])


def great_circle_deg(a: Viewpoint, b: Viewpoint) -> float:
    pa = a.position()
    pb = b.position()
    c = float(pa @ pb) / (np.linalg.norm(pa) * np.linalg.norm(pb))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def fibonacci_hemisphere(n: int) -> list[Viewpoint]:
    """z-stratified golden-angle spiral on the upper hemisphere."""
    if n < 1:
        raise ValueError(f"need at least one viewpoint, got {n}")
    step = 360.0 / GOLDEN_RATIO**2
    out = []
    for i in range(n):
        z = (i + 0.5) / n
        out.append(Viewpoint(wrap_azimuth(i * step), math.degrees(math.asin(z)), 1.0))
    return out
