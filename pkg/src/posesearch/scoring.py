"""Matching scores: the two-side Monte-Carlo denoising residual and the
one-side (naive) baseline.

The reference side is expanded once into generations at N intermediate
viewpoints, noised with M seeded draws. Scoring a candidate never regenerates
that set — every candidate is compared under the same noise realizations, so
score differences between candidates carry no resampling variance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .backend import Backend, DenoiseRequest, GenerationRequest, encode_image
from .errors import PoleDegenerate
from .geometry import Viewpoint, ViewChange, fibonacci_hemisphere, relative_change
from .imaging import ImageBuffer, NoiseSample, NoiseSchedule, TensorBuffer, add_noise, sample_noise

DEFAULT_SEED = 1234

_POLE_LIMIT = 90.0 - 1e-6


@dataclass(frozen=True)
class ScoreConfig:
    n_intermediate: int = 64
    m_samples: int = 4
    t_fraction: float = 0.4
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.n_intermediate < 1:
            raise ValueError("n_intermediate must be >= 1")
        if self.m_samples < 1:
            raise ValueError("m_samples must be >= 1")
        if not 0.0 < self.t_fraction < 1.0:
            raise ValueError(f"t_fraction {self.t_fraction} outside (0, 1)")


@dataclass(frozen=True, eq=False)
class ReferenceContext:
    """Candidate-independent reference-side state, computed once per query."""

    ref_image: ImageBuffer
    ref_viewpoint: Viewpoint
    intermediates: tuple[Viewpoint, ...]
    generations: tuple  # N GenerationResult
    noisy: tuple  # N x M TensorBuffer
    noises: tuple  # N x M NoiseSample
    schedule: NoiseSchedule
    t_index: int

    @property
    def n_intermediate(self) -> int:
        return len(self.intermediates)

    @property
    def m_samples(self) -> int:
        return len(self.noises[0])


@dataclass(frozen=True)
class ScoreValue:
    """Score plus its marginals.

    value       = (1/M) * sum_j sum_i (raw squared-L2 residual of term i, j)
    per_sample  = M raw inner sums (sum over i at fixed j); mean equals value
    per_viewpoint = N per-element diagnostics: residual averaged over j and
                    normalized by element count; numel * sum equals value
    """

    value: float
    per_viewpoint: tuple[float, ...]
    per_sample: tuple[float, ...]
    numel: int


def _score_from_terms(r: np.ndarray, numel: int) -> ScoreValue:
    # r is (N, M) float64 of raw per-term residuals, filled in (i, j) order
    m = r.shape[1]
    value = float(np.sum(r) / m)
    per_sample = tuple(float(np.sum(r[:, j])) for j in range(m))
    per_viewpoint = tuple(float(np.sum(r[i, :]) / m / numel) for i in range(r.shape[0]))
    return ScoreValue(value, per_viewpoint, per_sample, numel)


def _residual(eps_hat: TensorBuffer, eps: NoiseSample) -> float:
    d = (eps_hat.values - eps.tensor.values).astype(np.float64).ravel()
    return float(np.dot(d, d))


def _check_candidate(candidate: Viewpoint) -> None:
    if abs(candidate.elevation_deg) >= _POLE_LIMIT:
        raise PoleDegenerate(
            f"candidate elevation {candidate.elevation_deg} too close to the pole"
        )


def build_reference_context(
    ref_image: ImageBuffer,
    ref_viewpoint: Viewpoint,
    cfg: ScoreConfig,
    backend: Backend,
) -> ReferenceContext:
    """Generate the reference side at N intermediate viewpoints and noise it."""
    if ref_viewpoint.radius != 1.0:
        raise ValueError(
            "reference viewpoint must sit at radius 1 (intermediate viewpoints "
            "are unit-radius and generation keeps the radius fixed)"
        )
    desc = backend.descriptor()
    schedule = desc.schedule
    t_index = schedule.t_index_for(cfg.t_fraction)
    intermediates = tuple(fibonacci_hemisphere(cfg.n_intermediate))
    generations = tuple(
        backend.generate(
            GenerationRequest(
                cond=ref_image,
                change=relative_change(ref_viewpoint, inter),
                seed=rng.derive_seed("gen", cfg.seed, i),
            )
        )
        for i, inter in enumerate(intermediates)
    )
    noises = tuple(
        tuple(
            sample_noise(rng.derive_seed("eps", cfg.seed, i, j), desc.working_shape)
            for j in range(cfg.m_samples)
        )
        for i in range(cfg.n_intermediate)
    )
    noisy = tuple(
        tuple(
            add_noise(generations[i].encoding, schedule, t_index, noises[i][j])
            for j in range(cfg.m_samples)
        )
        for i in range(cfg.n_intermediate)
    )
    return ReferenceContext(
        ref_image=ref_image,
        ref_viewpoint=ref_viewpoint,
        intermediates=intermediates,
        generations=generations,
        noisy=noisy,
        noises=noises,
        schedule=schedule,
        t_index=t_index,
    )


def resample_noises(ctx: ReferenceContext, seed: int) -> ReferenceContext:
    """Same generations, fresh noise set drawn from `seed`."""
    shape = ctx.generations[0].encoding.shape
    noises = tuple(
        tuple(
            sample_noise(rng.derive_seed("eps", seed, i, j), shape)
            for j in range(ctx.m_samples)
        )
        for i in range(ctx.n_intermediate)
    )
    noisy = tuple(
        tuple(
            add_noise(ctx.generations[i].encoding, ctx.schedule, ctx.t_index, noises[i][j])
            for j in range(ctx.m_samples)
        )
        for i in range(ctx.n_intermediate)
    )
    return replace(ctx, noises=noises, noisy=noisy)


def two_side_score(
    ctx: ReferenceContext,
    query_image: ImageBuffer,
    candidate: Viewpoint,
    cfg: ScoreConfig,
    backend: Backend,
) -> ScoreValue:
    """Denoise the reference-side noisy set conditioned on the query at the
    candidate pose; low residual means the candidate explains the query."""
    _check_candidate(candidate)
    if ctx.n_intermediate != cfg.n_intermediate or ctx.m_samples != cfg.m_samples:
        raise ValueError(
            f"context built for N={ctx.n_intermediate}, M={ctx.m_samples}; "
            f"config asks N={cfg.n_intermediate}, M={cfg.m_samples}"
        )
    reqs = []
    for i, inter in enumerate(ctx.intermediates):
        change = relative_change(candidate, inter)
        change = ViewChange(change.d_elevation_deg, change.d_azimuth_deg, 0.0)
        for j in range(ctx.m_samples):
            reqs.append(
                DenoiseRequest(
                    noisy=ctx.noisy[i][j],
                    t_index=ctx.t_index,
                    cond=query_image,
                    change=change,
                )
            )
    eps_hats = backend.denoise_batch(reqs)
    numel = ctx.noisy[0][0].numel
    r = np.empty((ctx.n_intermediate, ctx.m_samples))
    k = 0
    for i in range(ctx.n_intermediate):
        for j in range(ctx.m_samples):
            r[i, j] = _residual(eps_hats[k], ctx.noises[i][j])
            k += 1
    return _score_from_terms(r, numel)


def naive_score(
    ref_image: ImageBuffer,
    ref_viewpoint: Viewpoint,
    query_image: ImageBuffer,
    candidate: Viewpoint,
    cfg: ScoreConfig,
    backend: Backend,
    image_space: bool = False,
) -> ScoreValue:
    """One-side baseline: generate ref -> candidate once and match it against
    the query. image_space=True compares pixels directly instead of denoising."""
    _check_candidate(candidate)
    desc = backend.descriptor()
    change = relative_change(ref_viewpoint, candidate)
    change = ViewChange(change.d_elevation_deg, change.d_azimuth_deg, 0.0)
    gen = backend.generate(
        GenerationRequest(cond=ref_image, change=change, seed=rng.derive_seed("gen", cfg.seed, 0))
    )
    numel = gen.encoding.numel
    if image_space:
        d = (gen.encoding.values - encode_image(query_image).values).astype(np.float64)
        d = d.ravel()
        sse = float(np.dot(d, d))
        return ScoreValue(sse, (sse / numel,), (sse,), numel)
    schedule = desc.schedule
    t_index = schedule.t_index_for(cfg.t_fraction)
    noises = [
        sample_noise(rng.derive_seed("eps", cfg.seed, 0, j), desc.working_shape)
        for j in range(cfg.m_samples)
    ]
    reqs = [
        DenoiseRequest(
            noisy=add_noise(gen.encoding, schedule, t_index, eps),
            t_index=t_index,
            cond=query_image,
            change=ViewChange(0.0, 0.0, 0.0),
        )
        for eps in noises
    ]
    eps_hats = backend.denoise_batch(reqs)
    r = np.empty((1, cfg.m_samples))
    for j in range(cfg.m_samples):
        r[0, j] = _residual(eps_hats[j], noises[j])
    return _score_from_terms(r, numel)
