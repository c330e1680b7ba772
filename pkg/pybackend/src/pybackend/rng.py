"""Seed derivation and counter-based noise draws.

This must stay stream-identical to the client side: seeds are blake2b-8
digests over tag strings and little-endian 64-bit words, feeding a Philox
generator. Any drift here breaks cross-implementation parity, which is the
whole point of this package.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF


def derive_seed(*parts: int | str) -> int:
    """Mix a tag and integer components into a 64-bit seed.

    Strings are NUL-terminated domain tags; integers are packed as 64-bit
    two's-complement little-endian words.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        if isinstance(p, str):
            h.update(p.encode("utf-8"))
            h.update(b"\x00")
        else:
            h.update(struct.pack("<Q", int(p) & MASK64))
    return int.from_bytes(h.digest(), "little")


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed & MASK64))


def normal_array(seed: int, shape) -> np.ndarray:
    """Standard-normal float32 array; bit-identical for equal (seed, shape)."""
    return generator(seed).standard_normal(tuple(shape), dtype=np.float32)
