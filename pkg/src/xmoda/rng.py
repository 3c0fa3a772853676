"""Platform-stable random numbers and seed derivation.

Phantom bytes must not depend on numpy's bit-generator internals, so the
generator here is a counter-based SplitMix64:

    z  = key + (counter + 1) * 0x9E3779B97F4A7C15      (mod 2**64)
    z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

A uniform double is ``(out >> 11) * 2**-53``.  Normals use Box-Muller on
two consecutive uniforms.  The ``key`` of a stream is obtained by folding
integers (seed, case index, stream id, ...) through the same finalizer, so
any implementation with 64-bit unsigned wrap-around arithmetic reproduces
the exact stream.

Stage seeds for the pipeline come from :func:`derive_seed`, the first 8
bytes (little endian) of BLAKE2b over ``"<master>:<stage>"``.
"""
from __future__ import annotations

import hashlib

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix(*values: int) -> int:
    """Fold a sequence of integers into a single 64-bit stream key."""
    acc = np.zeros(1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for v in values:
            acc = _finalize(acc + np.uint64(int(v) & _MASK64) + GOLDEN)
    return int(acc[0])


class SplitMix64:
    """Counter-based stream; ``draw`` advances the counter by ``n``."""

    def __init__(self, *key: int):
        self.key = mix(*key)
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * GOLDEN
            return _finalize(z)

    def uniform(self, size=1, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return (low + (high - low) * u).reshape(shape)

    def scalar(self, low: float = 0.0, high: float = 1.0) -> float:
        return float(self.uniform(1, low, high)[0])

    def normal(self, size=1) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        u = self.uniform(2 * n)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)).reshape(shape)

    def choice_sign(self) -> int:
        return 1 if self.scalar() < 0.5 else -1


def derive_seed(master_seed: int, stage: str) -> int:
    digest = hashlib.blake2b(f"{master_seed}:{stage}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def torch_seed(seed: int) -> int:
    """Fold an arbitrary non-negative seed into torch's accepted range."""
    return int(seed) % (2**63 - 1)
