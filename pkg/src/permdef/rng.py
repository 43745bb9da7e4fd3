"""Deterministic random streams shared by every seeded component.

The generator is counter-based SplitMix64: output ``i`` of stream ``seed`` is

    x = (seed + (i + 1) * 0x9E3779B97F4A7C15) mod 2**64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) mod 2**64
    out_i = x ^ (x >> 31)

which is the published SplitMix64 sequence for ``seed``.  Uniform doubles
take the top 53 bits (``out >> 11`` times 2**-53), and standard normals come
from the Box-Muller transform applied to consecutive uniform pairs.  The
integer pipeline is exact on any platform; the normal variates additionally
go through libm's log/sqrt/cos/sin, so they are bitwise reproducible for a
given math library and reproducible up to the last ulp elsewhere.

Test vectors (first three outputs of ``splitmix64_stream(42, 3)``) are pinned
in the test suite against a scalar reimplementation.
"""

from __future__ import annotations

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_U53_SCALE = 2.0 ** -53


def _check_seed(seed: int) -> np.uint64:
    if not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    if not 0 <= int(seed) < 2 ** 64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.uint64(seed)


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def splitmix64_stream(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Outputs ``offset .. offset+n-1`` of the SplitMix64 stream for ``seed``."""
    s = _check_seed(seed)
    if n < 0:
        raise ValueError("n must be non-negative")
    idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(s + idx * _GOLDEN)


def derive_seed(seed: int, *indices: int) -> int:
    """Fold integer labels into a child seed (documented, order-sensitive)."""
    s = _check_seed(seed)
    with np.errstate(over="ignore"):
        for k in indices:
            if not isinstance(k, (int, np.integer)) or k < 0:
                raise ValueError(f"derivation indices must be non-negative ints, got {k!r}")
            s = _mix(np.uint64((int(s) + int(_GOLDEN) + int(k)) % 2 ** 64))
    return int(s)


def uniform_vector(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """n doubles in [0, 1) with 53-bit resolution."""
    bits = splitmix64_stream(seed, n, offset)
    return (bits >> np.uint64(11)).astype(np.float64) * _U53_SCALE


def gaussian_vector(seed: int, n: int) -> np.ndarray:
    """n i.i.d. standard normal doubles via Box-Muller on uniform pairs."""
    if n < 0:
        raise ValueError("n must be non-negative")
    pairs = (n + 1) // 2
    u = uniform_vector(seed, 2 * pairs)
    u1 = np.maximum(u[0::2], _U53_SCALE)  # keep log() finite
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]


def permutation_vector(seed: int, n: int) -> np.ndarray:
    """Seeded permutation of range(n): stable argsort of the uniform stream."""
    return np.argsort(uniform_vector(seed, n), kind="stable")
