"""Deterministic numeric kernels: matmul, stable row softmax, top-k, PRNG.

Float discipline: values are stored as float32 while reductions (matrix
products, softmax sums) accumulate in float64. Determinism is guaranteed
within one build; cross-platform bit-exactness is not a goal.

All functions here are pure and safe to call from any execution context.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

__all__ = ["matmul", "row_softmax", "topk_indices", "prng_stream"]


def _as_matrix(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractViolation(f"{name} contains non-finite values")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense matrix product with float64 accumulation, float32 result."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"inner dimensions disagree: {a.shape} @ {b.shape}"
        )
    out = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise ContractViolation("matmul overflowed to non-finite values")
    return out


def row_softmax(
    m: np.ndarray, prefix_lengths: np.ndarray | list[int] | None = None
) -> np.ndarray:
    """Row-wise softmax with max-subtraction stability.

    When ``prefix_lengths`` is given, row ``i`` is normalised over its first
    ``prefix_lengths[i]`` entries only and the remaining entries are exactly
    zero (causal masking). Every cutoff must be at least 1.
    """
    m = _as_matrix(m, "m")
    rows, cols = m.shape
    if prefix_lengths is None:
        lengths = np.full(rows, cols, dtype=np.int64)
    else:
        lengths = np.asarray(prefix_lengths, dtype=np.int64)
        if lengths.shape != (rows,):
            raise ContractViolation(
                f"expected {rows} prefix lengths, got shape {lengths.shape}"
            )
    if rows == 0 or np.any(lengths < 1) or np.any(lengths > cols):
        raise ContractViolation("each row needs an active prefix of >= 1 entries")

    work = m.astype(np.float64)
    active = np.arange(cols)[None, :] < lengths[:, None]
    work[~active] = -np.inf
    work -= work.max(axis=1, keepdims=True)
    np.exp(work, out=work)
    work[~active] = 0.0
    work /= work.sum(axis=1, keepdims=True)
    return work.astype(np.float32)


def topk_indices(scores: np.ndarray | list[float], k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ascending, ties to lowest index.

    Returns ``min(k, len(scores))`` indices. Deterministic: a stable sort on
    descending score keeps the lowest index first among equal scores.
    """
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ContractViolation("cannot take top-k of an empty score list")
    order = np.argsort(-arr, kind="stable")[: min(k, arr.size)]
    return np.sort(order).astype(np.int64)


def prng_stream(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the package-wide source of randomness.

    Identical seeds reproduce identical streams within one build. Draw
    standard normals via ``.standard_normal(n)``.
    """
    return np.random.Generator(np.random.PCG64(seed))
