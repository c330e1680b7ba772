"""Coarse-to-fine viewpoint search: azimuth/elevation grid rounds followed by
finite-difference gradient descent on the matching score.

The coarse stage keeps a global best across all rounds. Refinement resamples
the noise set each iteration (so descent is not stuck matching one noise
draw) but ranks every visited candidate under the original common-random-
number context before returning, keeping the final comparison unbiased.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

from . import rng
from .backend import Backend
from .geometry import Viewpoint
from .imaging import ImageBuffer
from .scoring import (
    ReferenceContext,
    ScoreConfig,
    build_reference_context,
    naive_score,
    resample_noises,
    two_side_score,
)

_EL_CLAMP = 85.0
_FINAL_STEP_DEG = 1.0

SCHEMES = ("two-side", "naive")


def _symmetric(offsets: tuple[float, ...]) -> bool:
    return all(-x in offsets for x in offsets)


@dataclass(frozen=True)
class SearchSchedule:
    azimuth_round0: tuple[float, ...] = (0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0)
    round1_offsets: tuple[float, ...] = (-30.0, -15.0, 15.0, 30.0)
    round2_offsets: tuple[float, ...] = (-10.0, -5.0, 5.0, 10.0)
    elevation_offsets: tuple[float, ...] = (-20.0, -10.0, 10.0, 20.0)

    def __post_init__(self):
        if not self.azimuth_round0:
            raise ValueError("round 0 needs at least one azimuth")
        for name in ("round1_offsets", "round2_offsets", "elevation_offsets"):
            offs = getattr(self, name)
            if not _symmetric(offs):
                raise ValueError(f"{name} must be symmetric around 0, got {offs}")


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 3
    steps_per_iteration: int = 10
    step_deg: float = 3.0  # decayed linearly to 1 degree across iterations
    fd_h_deg: float = 2.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.steps_per_iteration < 1:
            raise ValueError("steps_per_iteration must be >= 1")
        if not self.step_deg > 0.0:
            raise ValueError("step_deg must be > 0")
        if not self.fd_h_deg > 0.0:
            raise ValueError("fd_h_deg must be > 0")

    def step_for(self, iteration: int) -> float:
        if self.iterations <= 1:
            return self.step_deg
        frac = iteration / (self.iterations - 1)
        return self.step_deg + (_FINAL_STEP_DEG - self.step_deg) * frac


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    viewpoint: Viewpoint
    score: float
    trace: tuple[tuple[Viewpoint, float], ...]


ScoreFn = Callable[[Viewpoint], float]


def _clamp_el(el: float) -> float:
    return min(_EL_CLAMP, max(-_EL_CLAMP, el))


def _coarse(score_fn: ScoreFn, elevation_init: float, schedule: SearchSchedule) -> PoseEstimate:
    el0 = _clamp_el(elevation_init)
    trace: list[tuple[Viewpoint, float]] = []
    best_vp: Viewpoint | None = None
    best_s = math.inf

    def ev(az: float, el: float) -> None:
        nonlocal best_vp, best_s
        vp = Viewpoint(az, _clamp_el(el), 1.0)
        s = score_fn(vp)
        trace.append((vp, s))
        if s < best_s:
            best_vp, best_s = vp, s

    for az in schedule.azimuth_round0:
        ev(az, el0)
    anchor = best_vp.azimuth_deg
    for off in schedule.round1_offsets:
        ev(anchor + off, el0)
    anchor = best_vp.azimuth_deg
    for off in schedule.round2_offsets:
        ev(anchor + off, el0)
    az_best = best_vp.azimuth_deg
    for off in schedule.elevation_offsets:
        ev(az_best, el0 + off)
    return PoseEstimate(best_vp, best_s, tuple(trace))


def _refine(
    estimate: PoseEstimate,
    ctx_score_fn: ScoreFn,
    iter_score_fn: Callable[[int], ScoreFn],
    rcfg: RefineConfig,
) -> PoseEstimate:
    if rcfg.iterations == 0:
        return estimate
    h = rcfg.fd_h_deg
    az = estimate.viewpoint.azimuth_deg
    el = estimate.viewpoint.elevation_deg
    visited: list[Viewpoint] = []
    for it in range(rcfg.iterations):
        f = iter_score_fn(it)
        step = rcfg.step_for(it)
        for _ in range(rcfg.steps_per_iteration):
            g_az = f(Viewpoint(az + h, el)) - f(Viewpoint(az - h, el))
            g_el = f(Viewpoint(az, _clamp_el(el + h))) - f(Viewpoint(az, _clamp_el(el - h)))
            norm = math.hypot(g_az, g_el)
            if norm == 0.0:
                break
            az = az - step * (g_az / norm)
            el = _clamp_el(el - step * (g_el / norm))
            vp = Viewpoint(az, el, 1.0)
            az = vp.azimuth_deg
            visited.append(vp)
    best_vp, best_s = estimate.viewpoint, estimate.score
    extra: list[tuple[Viewpoint, float]] = []
    for vp in visited:
        s = ctx_score_fn(vp)
        extra.append((vp, s))
        if s < best_s:
            best_vp, best_s = vp, s
    return PoseEstimate(best_vp, best_s, estimate.trace + tuple(extra))


# --------------------------------------------------------------------------
# Two-side public entry points


def coarse_search(
    ctx: ReferenceContext,
    query_image: ImageBuffer,
    elevation_init: float,
    schedule: SearchSchedule,
    cfg: ScoreConfig,
    backend: Backend,
) -> PoseEstimate:
    def fn(vp: Viewpoint) -> float:
        return two_side_score(ctx, query_image, vp, cfg, backend).value

    return _coarse(fn, elevation_init, schedule)


def refine(
    estimate: PoseEstimate,
    ctx: ReferenceContext,
    query_image: ImageBuffer,
    rcfg: RefineConfig,
    cfg: ScoreConfig,
    backend: Backend,
) -> PoseEstimate:
    def ctx_fn(vp: Viewpoint) -> float:
        return two_side_score(ctx, query_image, vp, cfg, backend).value

    def iter_fn(iteration: int) -> ScoreFn:
        ictx = resample_noises(ctx, rng.derive_seed("refine", cfg.seed, iteration))

        def fn(vp: Viewpoint) -> float:
            return two_side_score(ictx, query_image, vp, cfg, backend).value

        return fn

    return _refine(estimate, ctx_fn, iter_fn, rcfg)


def estimate_pose(
    ref_image: ImageBuffer,
    ref_viewpoint: Viewpoint,
    query_image: ImageBuffer,
    elevation_init: float,
    cfg: ScoreConfig,
    backend: Backend,
    search_schedule: SearchSchedule | None = None,
    refine_cfg: RefineConfig | None = None,
    scheme: str = "two-side",
) -> PoseEstimate:
    """Full pipeline: reference expansion (two-side only), coarse rounds, then
    gradient refinement. The trace holds every candidate scored under the
    original noise context, so its minimum is the returned estimate."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    schedule = search_schedule if search_schedule is not None else SearchSchedule()
    rcfg = refine_cfg if refine_cfg is not None else RefineConfig()

    if scheme == "two-side":
        ctx = build_reference_context(ref_image, ref_viewpoint, cfg, backend)
        est = coarse_search(ctx, query_image, elevation_init, schedule, cfg, backend)
        return refine(est, ctx, query_image, rcfg, cfg, backend)

    def ctx_fn(vp: Viewpoint) -> float:
        return naive_score(ref_image, ref_viewpoint, query_image, vp, cfg, backend).value

    def iter_fn(iteration: int) -> ScoreFn:
        icfg = replace(cfg, seed=rng.derive_seed("refine", cfg.seed, iteration))

        def fn(vp: Viewpoint) -> float:
            return naive_score(ref_image, ref_viewpoint, query_image, vp, icfg, backend).value

        return fn

    est = _coarse(ctx_fn, elevation_init, schedule)
    return _refine(est, ctx_fn, iter_fn, rcfg)
