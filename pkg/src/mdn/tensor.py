"""Dense tensor primitives shared by the recurrent and chunkwise kernels.

Tensors are plain row-major numpy arrays of dtype float32 or float64. Every
function here is pure; leading axes are treated as independent batch lanes.
"""
from __future__ import annotations

import numpy as np

SUPPORTED_DTYPES = (np.float32, np.float64)
DTYPES = {"f32": np.float32, "f64": np.float64}


def as_dtype(name_or_dtype) -> np.dtype:
    if isinstance(name_or_dtype, str):
        try:
            return np.dtype(DTYPES[name_or_dtype])
        except KeyError:
            raise ValueError(f"unknown dtype {name_or_dtype!r}, expected one of {sorted(DTYPES)}")
    dt = np.dtype(name_or_dtype)
    if dt.type not in SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def _check_axis(x: np.ndarray, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for tensor of rank {x.ndim}")
    return axis % x.ndim


def cumsum(x, axis: int = -1) -> np.ndarray:
    """Inclusive prefix sum, accumulated left to right along ``axis``."""
    x = np.asarray(x)
    axis = _check_axis(x, axis)
    # np.add.accumulate is a sequential scan, so rounding is reproducible.
    return np.add.accumulate(x, axis=axis)


def log_cumsum_exp_tril(log_x, chunk_index: int = 0, C: int | None = None) -> np.ndarray:
    """``out[i] = log(sum_{j<=i} exp(log_x[j]))`` over the last axis.

    Broadcasts the chunk vector into a causally masked ``C x C`` matrix,
    subtracts each row's maximum, sums, and adds the maximum back. ``-inf``
    entries are allowed; a row made only of ``-inf`` yields ``-inf``.
    """
    log_x = np.asarray(log_x)
    if C is None:
        C = log_x.shape[-1]
    if log_x.shape[-1] != C:
        raise ValueError(f"last axis has {log_x.shape[-1]} entries, expected C={C}")
    offs = chunk_index * C + np.arange(C)
    causal = offs[:, None] >= offs[None, :]
    neg_inf = np.array(-np.inf, dtype=log_x.dtype)
    L = np.where(causal, log_x[..., None, :], neg_inf)
    r = L.max(axis=-1)
    r_safe = np.where(np.isfinite(r), r, 0).astype(log_x.dtype)
    s = np.exp(L - r_safe[..., None]).sum(axis=-1)
    with np.errstate(divide="ignore"):
        return np.log(s) + r_safe


def _check_unit_lower(A: np.ndarray) -> None:
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expected square trailing dims, got shape {A.shape}")
    diag = np.diagonal(A, axis1=-2, axis2=-1)
    if not np.all(diag == 1):
        raise ValueError("matrix is not unit lower triangular (diagonal must be exactly 1)")


def unit_lower_tri_inverse(A) -> np.ndarray:
    """Inverse of a unit lower triangular matrix by forward substitution.

    Solves ``A X = I`` column block by column block: row ``i`` of the
    inverse only needs rows ``< i``, so one sweep down the rows suffices.
    Only the strictly lower part of ``A`` is read. Batched over leading axes.
    """
    A = np.asarray(A)
    _check_unit_lower(A)
    C = A.shape[-1]
    X = np.zeros_like(A)
    idx = np.arange(C)
    X[..., idx, idx] = 1
    for i in range(1, C):
        # X[i, :i] = -sum_{k<i} A[i, k] X[k, :i]
        X[..., i, :i] = -np.matmul(A[..., i : i + 1, :i], X[..., :i, :i])[..., 0, :]
    return X


def unit_lower_tri_inverse_iterative(A) -> np.ndarray:
    """In-place row update scheme used by reference PyTorch code.

    Starts from ``-(A - I)`` and folds earlier rows into row ``i``; numerically
    a different association order from :func:`unit_lower_tri_inverse`, kept as
    a cross-check.
    """
    A = np.asarray(A)
    _check_unit_lower(A)
    C = A.shape[-1]
    inv = -np.tril(A, k=-1)
    for i in range(1, C):
        inv[..., i, :i] += (inv[..., i, :, None] * inv[..., :, :i]).sum(-2)
    return inv + np.eye(C, dtype=A.dtype)


def matmul(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ValueError("matmul needs at least 1-d operands")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def hadamard(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch for element-wise product: {a.shape} vs {b.shape}")
    return a * b


def transpose(a) -> np.ndarray:
    """Swap the two trailing axes."""
    a = np.asarray(a)
    if a.ndim < 2:
        raise ValueError("transpose needs a matrix")
    return np.swapaxes(a, -1, -2)


def frobenius_norm(a, axis=None) -> np.ndarray | float:
    a = np.asarray(a)
    if axis is None:
        return float(np.sqrt(np.sum(a * a)))
    return np.sqrt(np.sum(a * a, axis=axis))


def max_rel_err(actual, expected) -> float:
    """Norm-wise relative error: ``max|actual - expected| / max|expected|``."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ValueError(f"shape mismatch {actual.shape} vs {expected.shape}")
    if actual.size == 0:
        return 0.0
    denom = float(np.max(np.abs(expected)))
    diff = float(np.max(np.abs(actual - expected)))
    if denom == 0.0:
        return diff
    return diff / denom
