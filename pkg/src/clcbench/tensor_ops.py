"""Dense float32 kernels with a fixed left-to-right summation order.

Every reduction in this module accumulates strictly left-to-right so that
results are bit-identical across runs and platforms. All operations are
pure functions over float32 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

F32 = np.float32


@dataclass(frozen=True)
class RopeParams:
    """Rotary-embedding parameters: rotation base and (even) head width."""

    theta: float
    d_head: int

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError(f"rope theta must be positive, got {self.theta}")
        if self.d_head <= 0 or self.d_head % 2 != 0:
            raise ValueError(f"d_head must be a positive even integer, got {self.d_head}")


def _as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=F32)


def sum_lr(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Sum along `axis` accumulating left-to-right (index 0 upward)."""
    x = np.asarray(x)
    xm = np.moveaxis(x, axis, -1)
    if xm.shape[-1] == 0:
        acc = np.zeros(xm.shape[:-1], dtype=x.dtype)
    else:
        acc = xm[..., 0].copy()
        for i in range(1, xm.shape[-1]):
            np.add(acc, xm[..., i], out=acc)
    if keepdims:
        acc = np.expand_dims(acc, axis)
    return acc


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product [m,k] @ [k,n] summing over k strictly left-to-right.

    Bit-identical to a naive triple loop with the k loop innermost.
    """
    a = _as_f32(a)
    b = _as_f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=F32)
    tmp = np.empty((m, n), dtype=F32)
    for i in range(k):
        np.multiply(a[:, i : i + 1], b[i], out=tmp)
        np.add(out, tmp, out=out)
    return out


def softmax_rows(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of logits/temperature, stabilized by max subtraction.

    Rows may contain -inf entries (masked positions) but each row needs at
    least one finite entry.
    """
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    x = _as_f32(logits)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D array, got shape {x.shape}")
    z = x / F32(temperature)
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = sum_lr(e, axis=-1, keepdims=True)
    return e / s


def softmax_rows_two_bucket(
    logits: np.ndarray, scaled_cols: np.ndarray, t: float, s: float
) -> np.ndarray:
    """Row-wise softmax with a scaled column bucket.

    Columns flagged in `scaled_cols` have their logits divided by `t` before
    exponentiation and their exponentials multiplied by `s`; the remaining
    columns use t=1, s=1. The union is normalized to sum to 1 per row.

    With t=1 and s=1 this is bit-identical to softmax_rows(logits, 1.0).
    """
    if t <= 0 or s <= 0:
        raise ValueError(f"reshaping factors must be positive, got t={t}, s={s}")
    x = _as_f32(logits)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows_two_bucket expects a 2-D array, got {x.shape}")
    cols = np.asarray(scaled_cols, dtype=bool)
    if cols.shape != (x.shape[1],):
        raise ShapeError(f"bucket mask shape {cols.shape} does not match {x.shape[1]} columns")
    z = np.where(cols, x / F32(t), x)
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    e = np.where(cols, F32(s) * e, e)
    total = sum_lr(e, axis=-1, keepdims=True)
    return e / total


def _rope_cos_sin(positions: np.ndarray, params: RopeParams) -> tuple[np.ndarray, np.ndarray]:
    half = params.d_head // 2
    # Angle table in float64, cast once; pair i rotates by pos * theta^(-2i/d_head).
    inv_freq = params.theta ** (-2.0 * np.arange(half, dtype=np.float64) / params.d_head)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(F32), np.sin(angles).astype(F32)


def rope_apply(v: np.ndarray, positions, params: RopeParams) -> np.ndarray:
    """Rotate each row pairwise: element 2i pairs with 2i+1 (interleaved)."""
    v = _as_f32(v)
    if v.ndim != 2 or v.shape[1] != params.d_head:
        raise ShapeError(f"rope_apply expects [n, {params.d_head}], got {v.shape}")
    pos = np.asarray(positions, dtype=np.int64)
    if pos.shape != (v.shape[0],):
        raise ShapeError(f"positions length {pos.shape} does not match {v.shape[0]} rows")
    cos, sin = _rope_cos_sin(pos, params)
    x1 = v[:, 0::2]
    x2 = v[:, 1::2]
    out = np.empty_like(v)
    out[:, 0::2] = x1 * cos - x2 * sin
    out[:, 1::2] = x1 * sin + x2 * cos
    return out


def rope_shift(k: np.ndarray, delta: int, params: RopeParams) -> np.ndarray:
    """Apply an extra rotation of `delta` positions to every head row of k.

    By rotation additivity this moves K built at base positions b to
    positions b+delta. delta may be negative (inverse rotation, used to
    re-base prefixed chunk caches). V tensors must never be shifted.
    """
    k = _as_f32(k)
    if k.shape[-1] != params.d_head:
        raise ShapeError(f"rope_shift expects trailing dim {params.d_head}, got {k.shape}")
    if delta == 0:
        return k.copy()
    flat = k.reshape(-1, params.d_head)
    cos, sin = _rope_cos_sin(np.array([delta], dtype=np.int64), params)
    x1 = flat[:, 0::2]
    x2 = flat[:, 1::2]
    out = np.empty_like(flat)
    out[:, 0::2] = x1 * cos - x2 * sin
    out[:, 1::2] = x1 * sin + x2 * cos
    return out.reshape(k.shape)


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    """Scale each row to unit RMS (eps-regularized), then multiply by weight."""
    if eps <= 0:
        raise ValueError(f"rmsnorm eps must be positive, got {eps}")
    x = _as_f32(x)
    w = _as_f32(weight)
    if x.shape[-1] != w.shape[0] or w.ndim != 1:
        raise ShapeError(f"rmsnorm weight shape {w.shape} does not match rows of {x.shape}")
    sq = x * x
    ms = sum_lr(sq, axis=-1, keepdims=True) / F32(x.shape[-1])
    denom = np.sqrt(ms + F32(eps))
    return x / denom * w


def l2sq_diff(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of squared elementwise differences."""
    a = _as_f32(a)
    b = _as_f32(b)
    if a.shape != b.shape:
        raise ShapeError(f"l2sq_diff shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(sum_lr((d * d).reshape(-1), axis=-1))
