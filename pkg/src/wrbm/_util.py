"""Shared numeric helpers: stable nonlinearities, bit-vector utilities, RNG streams."""

from __future__ import annotations

import numpy as np

MAX_ENUM_BITS = 20


def softplus(z: np.ndarray) -> np.ndarray:
    """log(1 + e^z), computed as max(z,0) + log1p(e^-|z|) to avoid overflow."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic map, stable on both tails."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def all_states(d: int) -> np.ndarray:
    """All 2^d binary vectors as a (2^d, d) uint8 array.

    Row n holds the bits of n, least-significant bit in column 0. Guarded by
    MAX_ENUM_BITS since the table grows exponentially.
    """
    if d < 1:
        raise ValueError(f"need at least one variable, got d={d}")
    if d > MAX_ENUM_BITS:
        raise ValueError(f"refusing to enumerate 2^{d} states (limit d<={MAX_ENUM_BITS})")
    n = np.arange(1 << d, dtype=np.uint32)
    return ((n[:, None] >> np.arange(d, dtype=np.uint32)) & 1).astype(np.uint8)


def hamming_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between rows of two 0/1 matrices.

    Uses H(x,y) = <x, 1-y> + <1-x, y>, which turns the whole computation into
    two matrix products. Exact for integer bit counts representable in float64.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"incompatible shapes {x.shape} vs {y.shape}")
    return x @ (1.0 - y).T + (1.0 - x) @ y.T


# Stream tags for auxiliary generators. Chain indices occupy [0, 2^40), so
# anything keyed here can share a user-facing seed with a chain population
# without ever reusing a stream.
STREAM_FILTER = (1 << 40) + 1
STREAM_SPLIT = (1 << 40) + 2
STREAM_INIT = (1 << 40) + 3
STREAM_BOOTSTRAP = (1 << 40) + 4
STREAM_MASK = (1 << 40) + 5
STREAM_NOISE = (1 << 40) + 6


def tagged_rng(seed: int, tag: int) -> np.random.Generator:
    """Counter-based generator on the stream keyed by (seed, tag)."""
    return np.random.Generator(np.random.Philox(key=[seed, tag]))


def chain_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent counter-based generators, one per chain index.

    Philox streams keyed by (seed, index) so any chain can be reproduced in
    isolation and batched updates match chain-at-a-time execution bit for bit.
    """
    return [np.random.Generator(np.random.Philox(key=[seed, i])) for i in range(n)]


def fill_uniform(rngs: list[np.random.Generator], width: int) -> np.ndarray:
    """One row of uniforms per generator; each row consumes only its own stream."""
    out = np.empty((len(rngs), width), dtype=np.float64)
    for i, g in enumerate(rngs):
        out[i] = g.random(width)
    return out
