"""Standalone wire-protocol server for novel-view generate/denoise backends.

Ships a deterministic oracle mirror (bit-compatible with the client side's
in-process oracle, for cross-implementation parity testing) and a documented
stub where a real novel-view diffusion model can be mounted.
"""

from .adapters import Adapter, DiffusionAdapter, MirrorAdapter, NotReady, oracle_mirror_adapter
from .oracle import MirrorOracle, ResolveError
from .server import PROTOCOL_VERSION, make_server, serve

__all__ = [
    "Adapter",
    "DiffusionAdapter",
    "MirrorAdapter",
    "MirrorOracle",
    "NotReady",
    "PROTOCOL_VERSION",
    "ResolveError",
    "make_server",
    "oracle_mirror_adapter",
    "serve",
]

__version__ = "0.1.0"
