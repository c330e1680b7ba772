"""Spherical viewpoints, look-at rotations, rotation error, hemisphere sampling.

Conventions: the world frame is z-up with gravity along -z. Azimuth is
measured from +x toward +y, elevation from the xy-plane toward +z. All angles
are stored in degrees; radians appear only inside trigonometric calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidCount, NonRotationInput, PoleDegenerate

_POLE_EPS = 1e-6
GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0


def wrap_azimuth(deg: float) -> float:
    """Canonicalize an azimuth into [0, 360)."""
    a = float(deg) % 360.0
    return a if a != 360.0 else 0.0


def wrap_delta(deg: float) -> float:
    """Canonicalize a signed azimuth difference into (-180, 180]."""
    d = (float(deg) + 180.0) % 360.0 - 180.0
    return 180.0 if d == -180.0 else d


@dataclass(frozen=True)
class Viewpoint:
    """Object-centric camera pose: azimuth/elevation in degrees, radius > 0."""

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
        """Camera position r * (cos el cos az, cos el sin az, sin el)."""
        el = math.radians(self.elevation_deg)
        az = math.radians(self.azimuth_deg)
        return self.radius * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )


@dataclass(frozen=True)
class ViewChange:
    """Signed viewpoint delta; azimuth component canonical in (-180, 180]."""

    d_elevation_deg: float
    d_azimuth_deg: float
    d_radius: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "d_azimuth_deg", wrap_delta(self.d_azimuth_deg))

    def angular_magnitude(self) -> float:
        return math.hypot(self.d_elevation_deg, self.d_azimuth_deg)


def relative_change(src: Viewpoint, dst: Viewpoint) -> ViewChange:
    """Componentwise dst - src with the azimuth delta canonicalized."""
    return ViewChange(
        d_elevation_deg=dst.elevation_deg - src.elevation_deg,
        d_azimuth_deg=wrap_delta(dst.azimuth_deg - src.azimuth_deg),
        d_radius=dst.radius - src.radius,
    )


def apply_change(v: Viewpoint, change: ViewChange) -> Viewpoint:
    """Apply a delta to a viewpoint, continuing over the pole if needed.

    Elevations pushed past +/-90 wrap onto the far side of the sphere
    (elevation reflects, azimuth flips by 180).
    """
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
    """World-to-camera rotation for a camera at ``v`` looking at the origin.

    Rows are (right, up, backward) so the matrix is a proper rotation:
    forward = -position/|position|, right = normalize(forward x z_world),
    up = right x forward. Raises PoleDegenerate near |elevation| = 90 where
    the look-at basis is undefined.
    """
    if abs(v.elevation_deg) >= 90.0 - _POLE_EPS:
        raise PoleDegenerate(f"elevation {v.elevation_deg} too close to the pole")
    pos = v.position()
    forward = -pos / np.linalg.norm(pos)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return np.stack([right, up, -forward])


def _check_rotation(m: np.ndarray, tol: float) -> None:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise NonRotationInput(f"expected 3x3 matrix, got {m.shape}")
    if not np.allclose(m.T @ m, np.eye(3), atol=tol):
        raise NonRotationInput("matrix is not orthonormal")
    if not abs(np.linalg.det(m) - 1.0) <= tol:
        raise NonRotationInput("matrix determinant is not +1")


def rotation_error_deg(r_gt: np.ndarray, r_pr: np.ndarray, tol: float = 1e-6) -> float:
    """Geodesic angle in degrees between two rotations, in [0, 180]."""
    _check_rotation(r_gt, tol)
    _check_rotation(r_pr, tol)
    rel = np.asarray(r_gt).T @ np.asarray(r_pr)
    c = (np.trace(rel) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def great_circle_deg(a: Viewpoint, b: Viewpoint) -> float:
    """Angle in degrees between the two unit camera-position vectors."""
    pa = a.position()
    pb = b.position()
    c = float(pa @ pb) / (np.linalg.norm(pa) * np.linalg.norm(pb))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def fibonacci_hemisphere(n: int) -> list[Viewpoint]:
    """n evenly spread upper-hemisphere viewpoints at radius 1.

    z-stratified golden-angle spiral restricted to z in (0, 1):
    z_i = (i + 0.5)/n, elevation_i = asin(z_i),
    azimuth_i = i * 360/golden_ratio^2 mod 360.
    """
    if n < 1:
        raise InvalidCount(f"need at least one viewpoint, got {n}")
    step = 360.0 / GOLDEN_RATIO**2
    out = []
    for i in range(n):
        z = (i + 0.5) / n
        out.append(Viewpoint(wrap_azimuth(i * step), math.degrees(math.asin(z)), 1.0))
    return out
