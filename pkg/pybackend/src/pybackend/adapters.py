"""Adapter seam between the wire server and whatever serves generate/denoise.

Two adapters ship: the oracle mirror (used by cross-implementation parity
suites) and a stub documenting how to mount a real novel-view diffusion
model. The server only ever talks to this interface.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from .geom import ViewChange, fibonacci_hemisphere
from .oracle import DEFAULT_IMAGE_SIZE, MirrorOracle


class NotReady(RuntimeError):
    """Adapter cannot serve yet (weights missing, model not mounted, ...)."""


class Adapter(ABC):
    """Deterministic generate/denoise provider behind the wire protocol.

    Implementations that are not safe under concurrent calls set
    ``single_flight = True``; the server then serializes access.
    """

    single_flight: bool = False

    @abstractmethod
    def descriptor(self) -> dict:
        """-> {"name", "working_shape", "t_total", "alpha_bar"}."""

    @abstractmethod
    def generate(
        self, cond: np.ndarray, change: ViewChange, seed: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """-> (display image in [0,1], working-space encoding), float32."""

    @abstractmethod
    def denoise(
        self, noisy: np.ndarray, t_index: int, cond: np.ndarray, change: ViewChange
    ) -> np.ndarray: ...


class MirrorAdapter(Adapter):
    def __init__(self, oracle: MirrorOracle):
        self.oracle = oracle

    def descriptor(self) -> dict:
        o = self.oracle
        return {
            "name": o.name,
            "working_shape": [o.size, o.size, 3],
            "t_total": o.t_total,
            "alpha_bar": [float(x) for x in o.alpha_bar],
        }

    def generate(self, cond, change, seed):
        # seed accepted for protocol compatibility; the oracle keys its
        # degradation noise on the quantized viewpoints instead
        del seed
        return self.oracle.generate(cond, change)

    def denoise(self, noisy, t_index, cond, change):
        return self.oracle.denoise(noisy, t_index, cond, change)


def oracle_mirror_adapter(
    object_seed: int,
    gain: float = 0.0,
    exponent: float = 1.0,
    size: int = DEFAULT_IMAGE_SIZE,
    catalog_views: int = 0,
) -> MirrorAdapter:
    """Build the mirror and pre-register a hemisphere catalog so conditioning
    images rendered elsewhere resolve by digest instead of grid search."""
    oracle = MirrorOracle(object_seed, gain=gain, exponent=exponent, size=size)
    if catalog_views > 0:
        oracle.register_viewpoints(fibonacci_hemisphere(catalog_views))
    return MirrorAdapter(oracle)


class DiffusionAdapter(Adapter):
    """Mounting point for a real novel-view latent diffusion model.

    To serve a Zero123-family checkpoint here:

    1. Load the pipeline (UNet + VAE + CLIP image encoder) from ``model_dir``
       in ``__init__`` and keep it resident; declare the latent shape and the
       scheduler's cumulative alpha products in ``descriptor()``.
    2. ``generate``: encode ``cond``, run the full sampling loop conditioned
       on the viewpoint change, decode to an RGB image, and also return the
       model's working-space encoding (the clean latent) so noising happens
       in the space the denoiser expects.
    3. ``denoise``: single epsilon prediction at ``t_index`` for the supplied
       noisy encoding, conditioned on ``cond`` and the change. No sampling
       loop, no guidance rescaling — the caller scores raw predictions.
    4. Normalize the model's conditioning convention to this package's
       ViewChange (degrees; d_elevation/d_azimuth signed as documented in
       geom.py; d_radius relative). Zero123 checkpoints differ in sign and
       radian/degree conventions — verify per checkpoint before serving.
    5. Diffusion pipelines hold GPU state; leave ``single_flight = True``
       unless the pipeline is replicated per worker.

    Until that is done every call raises NotReady, which the server reports
    as HTTP 503.
    """

    single_flight = True

    def __init__(self, model_dir: str | None = None):
        self.model_dir = model_dir

    def _not_ready(self) -> NotReady:
        where = self.model_dir if self.model_dir else "<unset>"
        return NotReady(
            f"no diffusion model mounted (model_dir={where}); "
            "see DiffusionAdapter docstring for mounting instructions"
        )

    def descriptor(self) -> dict:
        raise self._not_ready()

    def generate(self, cond, change, seed):
        raise self._not_ready()

    def denoise(self, noisy, t_index, cond, change):
        raise self._not_ready()
