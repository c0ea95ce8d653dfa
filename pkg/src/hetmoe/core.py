"""Numeric primitives shared by every module.

All arithmetic is float64. Matrix-vector products go through :func:`affine_rows`,
which reduces each output element with numpy's pairwise sum over one contiguous
row, so a request scored alone gets bit-identical numbers to the same request
scored inside a batch.

The seeded generator is SplitMix64 (Steele, Lea & Flood 2014, as published by
Vigna). It is pure integer arithmetic, so streams are identical on every
platform.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / (1 << 53)

# rows per chunk in affine_rows; bounds the (rows, m, n) temporary
_CHUNK_ELEMS = 1 << 22


class DimensionError(ValueError):
    """Operand shapes do not conform."""


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def mix64_array(z: np.ndarray) -> np.ndarray:
    """Vectorised SplitMix64 finalizer over a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def u64_to_unit(z: np.ndarray) -> np.ndarray:
    """Map uint64 values to doubles in [0, 1) using the top 53 bits."""
    return (np.asarray(z, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * _INV_2_53


def hash64(text: str, seed: int = 0) -> int:
    """FNV-1a over UTF-8 bytes, folded with ``seed`` and finished with SplitMix64."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return mix64(h ^ mix64(seed + GOLDEN_GAMMA))


class Rng:
    """Seeded SplitMix64 stream. Single owner; never share between threads."""

    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return low + (high - low) * ((self.next_u64() >> 11) * _INV_2_53)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def normal(self) -> float:
        # Box-Muller; 1 - u keeps the log argument in (0, 1]
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Fill an array in C order from the stream."""
        n = int(np.prod(shape))
        vals = np.fromiter((self.uniform(low, high) for _ in range(n)), dtype=np.float64, count=n)
        return vals.reshape(shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def fork(self, tag: int) -> "Rng":
        """Independent child stream keyed by ``tag``; does not advance this stream."""
        return Rng(mix64(self.state ^ mix64(tag + GOLDEN_GAMMA)))


def affine_rows(W: np.ndarray, X: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Row-wise ``X @ W.T + b`` with batch-size-independent rounding.

    ``W`` is (m, n), ``X`` is (rows, n). Each output element is the pairwise sum of
    ``W[j] * X[i]``; the same row therefore yields the same bits regardless of how
    many other rows accompany it.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if W.ndim != 2 or X.ndim != 2 or W.shape[1] != X.shape[1]:
        raise DimensionError(f"cannot apply {W.shape} matrix to rows of shape {X.shape}")
    m, n = W.shape
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (m,):
            raise DimensionError(f"bias shape {b.shape} does not match output width {m}")
    rows = X.shape[0]
    out = np.empty((rows, m), dtype=np.float64)
    step = max(1, _CHUNK_ELEMS // max(1, m * n))
    for start in range(0, rows, step):
        stop = min(rows, start + step)
        out[start:stop] = (X[start:stop, None, :] * W[None, :, :]).sum(axis=2)
    if b is not None:
        out += b
    return out


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``W x + b`` for a single vector; same rounding as :func:`affine_rows`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {x.shape}")
    return affine_rows(W, x[None, :], b)[0]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x):
    """Logistic function, stable for large |x|. Accepts scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 1:
        raise DimensionError("softmax needs at least one logit")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)
