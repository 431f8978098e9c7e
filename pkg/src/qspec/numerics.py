"""Deterministic dense float32 kernels.

Every kernel here is pure, operates on float32 ndarrays, and accumulates in an
order that depends only on the reduced axis length and operand strides, never
on how rows are grouped into batches.  That makes a forward pass over n tokens
bit-identical to n chained single-token passes, which is what lets greedy
equivalence be checked exactly instead of within a tolerance.

A "matrix" throughout this package is a C-contiguous ``np.float32`` ndarray of
shape ``(rows, cols)``; row vectors are 1-D float32 arrays.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

F32 = np.float32


def ensure_f32(a: np.ndarray, name: str, ndim: int | None = None) -> np.ndarray:
    """Validate dtype (and optionally rank) of a kernel operand."""
    if not isinstance(a, np.ndarray) or a.dtype != np.float32:
        raise ShapeError(f"{name} must be a float32 ndarray, got {getattr(a, 'dtype', type(a))}")
    if ndim is not None and a.ndim != ndim:
        raise ShapeError(f"{name} must have ndim={ndim}, got ndim={a.ndim}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a [m,k] @ b [k,n]`` with a batch-invariant reduction order.

    Uses ``np.einsum`` with optimization disabled: the per-element accumulation
    over ``k`` is a fixed function of ``k`` and the operand strides, so the
    same output row is produced bit-for-bit whether rows are computed one at a
    time or all at once.  (Verified by the determinism property tests.)
    """
    ensure_f32(a, "a", 2)
    ensure_f32(b, "b", 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    """Root-mean-square normalization along the last axis.

    ``y_i = x_i / sqrt(mean(x^2) + eps) * weight_i``.  Accepts a row vector or
    a matrix of rows; each row is normalized independently.
    """
    ensure_f32(x, "x")
    ensure_f32(weight, "weight", 1)
    if x.ndim not in (1, 2):
        raise ShapeError(f"rmsnorm expects a vector or matrix, got ndim={x.ndim}")
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"rmsnorm length mismatch: x {x.shape} vs weight {weight.shape}")
    if eps <= 0:
        raise ShapeError("rmsnorm eps must be positive")
    ms = np.mean(x * x, axis=-1, keepdims=True, dtype=np.float32)
    inv = F32(1.0) / np.sqrt(ms + F32(eps))
    return x * inv * weight


def softmax_row(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a row vector (max-subtraction applied)."""
    ensure_f32(logits, "logits", 1)
    if logits.size == 0:
        raise ShapeError("softmax_row on empty input")
    return softmax_lastaxis(logits)


def softmax_lastaxis(scores: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis of an arbitrary-rank float32 array."""
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - m)
    z = np.sum(e, axis=-1, keepdims=True, dtype=np.float32)
    return e / z


def argmax_row(values: np.ndarray) -> int:
    """Index of the maximum value; ties break to the lowest index."""
    ensure_f32(values, "values", 1)
    if values.size == 0:
        raise ShapeError("argmax_row on empty input")
    return int(np.argmax(values))


def silu(x: np.ndarray) -> np.ndarray:
    """SiLU activation ``x * sigmoid(x)`` in float32."""
    ensure_f32(x, "x")
    # exp overflow for very negative x yields an inf denominator and a correct 0.
    with np.errstate(over="ignore"):
        return x / (F32(1.0) + np.exp(-x))


def _inv_freq(head_dim: int, theta: float) -> np.ndarray:
    # float64 angles; cast to float32 only after cos/sin.
    return 1.0 / (theta ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim))


def rope_rotation(position: int, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Cos/sin rows (length head_dim/2, float32) for one absolute position."""
    if head_dim % 2 != 0:
        raise ShapeError(f"rope head dimension must be even, got {head_dim}")
    ang = np.float64(position) * _inv_freq(head_dim, theta)
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def rope_tables(max_positions: int, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Precomputed cos/sin tables of shape [max_positions, head_dim/2]."""
    if head_dim % 2 != 0:
        raise ShapeError(f"rope head dimension must be even, got {head_dim}")
    pos = np.arange(max_positions, dtype=np.float64)[:, None]
    ang = pos * _inv_freq(head_dim, theta)[None, :]
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def rope_apply_tables(x: np.ndarray, cos_row: np.ndarray, sin_row: np.ndarray) -> np.ndarray:
    """Rotate adjacent pairs ``(x[2i], x[2i+1])`` of the last axis by the given angles.

    ``x`` may carry leading axes (e.g. heads); the last axis must be even and
    equal to ``2 * len(cos_row)``.
    """
    ensure_f32(x, "x")
    if x.shape[-1] % 2 != 0 or x.shape[-1] != 2 * cos_row.shape[0]:
        raise ShapeError(f"rope pair mismatch: last axis {x.shape[-1]} vs {2 * cos_row.shape[0]}")
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos_row - odd * sin_row
    out[..., 1::2] = even * sin_row + odd * cos_row
    return out


def rope_apply(x: np.ndarray, position: int, theta: float) -> np.ndarray:
    """Rotary position embedding of ``x`` (last axis = head dimension) at one position."""
    cos_row, sin_row = rope_rotation(position, x.shape[-1], theta)
    return rope_apply_tables(x, cos_row, sin_row)
