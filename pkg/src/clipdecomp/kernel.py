"""Small dense linear-algebra kernel.

Tensors are plain numpy arrays. Storage is float32; every reduction is carried
out in float64 and the result is cast back to the widest input storage type
(float32 in, float32 out; float64 in, float64 out).
"""

from __future__ import annotations

import math

import numpy as np

STORAGE = np.float32
ACCUM = np.float64

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def _out_dtype(*arrays: np.ndarray) -> np.dtype:
    return np.result_type(STORAGE, *(np.asarray(a).dtype for a in arrays))


def as_storage(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=STORAGE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.astype(ACCUM, copy=False) @ b.astype(ACCUM, copy=False)
    return out.astype(_out_dtype(a, b), copy=False)


def softmax_row(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (the last one by default)."""
    v = np.asarray(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    x = v.astype(ACCUM, copy=False)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return out.astype(_out_dtype(v), copy=False)


def gelu(v: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    v = np.asarray(v)
    x = v.astype(ACCUM, copy=False)
    out = 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x**3)))
    return out.astype(_out_dtype(v), copy=False)


def gelu_erf(v: np.ndarray) -> np.ndarray:
    from scipy.special import erf

    v = np.asarray(v)
    x = v.astype(ACCUM, copy=False)
    out = 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))
    return out.astype(_out_dtype(v), copy=False)


def quick_gelu(v: np.ndarray) -> np.ndarray:
    """``x * sigmoid(1.702 x)``, the activation of the original OpenAI CLIP weights."""
    v = np.asarray(v)
    x = v.astype(ACCUM, copy=False)
    out = x / (1.0 + np.exp(-1.702 * x))
    return out.astype(_out_dtype(v), copy=False)


ACTIVATIONS = {"gelu_tanh": gelu, "gelu_erf": gelu_erf, "quick_gelu": quick_gelu}


def layer_norm_affine(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray]:
    """Rewrite layer norm of ``x`` as an elementwise affine map.

    Returns ``(scale, bias)`` with ``LN(x) == scale * x + bias``, where
    ``scale = gamma / sqrt(var + eps)`` and ``bias = beta - mean * scale``.
    Works on the last axis, so a stack of tokens gives a stack of maps.
    """
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] < 2:
        raise DimensionError(f"layer norm needs at least 2 features, got shape {x.shape}")
    xd = x.astype(ACCUM, copy=False)
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    scale = np.asarray(gamma, dtype=ACCUM) / np.sqrt(var + eps)
    bias = np.asarray(beta, dtype=ACCUM) - mu * scale
    dt = _out_dtype(x, gamma, beta)
    return scale.astype(dt, copy=False), bias.astype(dt, copy=False)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    scale, bias = layer_norm_affine(x, gamma, beta, eps)
    return scale * np.asarray(x, dtype=scale.dtype) + bias


def layer_norm_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population standard deviation over the last axis, in float64."""
    xd = np.asarray(x, dtype=ACCUM)
    mu = xd.mean(axis=-1)
    sd = np.sqrt(((xd - mu[..., None]) ** 2).mean(axis=-1))
    return mu, sd


def orthonormal_basis(rows: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Orthonormal basis of the row space of ``rows``.

    Modified Gram-Schmidt with one re-orthogonalization pass, rows taken in
    order. A row whose residual norm falls below ``tol * max_row_norm`` is
    treated as dependent and dropped. An all-zero input yields an empty
    ``(0, d)`` basis.
    """
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise DimensionError(f"orthonormal_basis expects a non-empty matrix, got {rows.shape}")
    a = rows.astype(ACCUM)
    d = a.shape[1]
    scale = float(np.linalg.norm(a, axis=1).max()) if a.size else 0.0
    basis: list[np.ndarray] = []
    if scale > 0.0:
        cutoff = tol * scale
        for v in a:
            w = v.copy()
            for _ in range(2):
                for q in basis:
                    w -= (q @ w) * q
            n = math.sqrt(float(w @ w))
            if n >= cutoff and n > 0.0:
                basis.append(w / n)
            if len(basis) == d:
                break
    out = np.array(basis, dtype=ACCUM).reshape(len(basis), d)
    return out.astype(_out_dtype(rows), copy=False)


def variance(v: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    """Population variance (divide by the count), two-pass, float64."""
    x = np.asarray(v, dtype=ACCUM)
    if axis is None:
        x = x.ravel()
        mu = x.sum() / x.size
        return float(((x - mu) ** 2).sum() / x.size)
    mu = x.mean(axis=axis, keepdims=True)
    return ((x - mu) ** 2).mean(axis=axis)
