"""Small tensor layer over numpy arrays.

Tensors are plain ndarrays (float32 in production, float64 when checking
gradients). This module owns the matrix product and the 3x3 column
rearrangements that convolution lowers to, plus a few elementwise helpers
and the finiteness guard used between pipeline stages.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


def _check_float2d(name: str, x: np.ndarray) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2D, got shape {x.shape}")
    if x.dtype not in _FLOAT_DTYPES:
        raise ShapeError(f"{name} must be float32 or float64, got {x.dtype}")


def gemm(
    a: np.ndarray,
    b: np.ndarray,
    transpose_a: bool = False,
    transpose_b: bool = False,
) -> np.ndarray:
    """Matrix product with optional operand transposes.

    Transposed operands are materialized contiguous before the kernel
    runs, so the inner loops always see row-major data.
    """
    _check_float2d("gemm operand a", a)
    _check_float2d("gemm operand b", b)
    if a.dtype != b.dtype:
        raise ShapeError(f"gemm dtype mismatch: {a.dtype} vs {b.dtype}")
    if transpose_a:
        a = np.ascontiguousarray(a.T)
    if transpose_b:
        b = np.ascontiguousarray(b.T)
    m, ka = a.shape
    kb, n = b.shape
    if ka != kb:
        raise ShapeError(
            f"gemm inner dimensions disagree: a is {a.shape}, b is {b.shape}"
        )
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    out = np.empty((m, n), dtype=a.dtype)
    kernels.gemm_into(a, b, out)
    return out


def im2col(x: np.ndarray) -> np.ndarray:
    """Lower a (C, H, W) map to (C*9, H*W) columns for the 3x3 stencil.

    Stride 1, zero padding 1, so there is one column per output pixel and
    the spatial size is preserved by the convolution built on top.
    """
    if x.ndim != 3:
        raise ShapeError(f"im2col expects (C, H, W), got shape {x.shape}")
    if x.dtype not in _FLOAT_DTYPES:
        raise ShapeError(f"im2col expects float input, got {x.dtype}")
    return kernels.im2col_3x3(np.ascontiguousarray(x))


def col2im(cols: np.ndarray, channels: int, height: int, width: int) -> np.ndarray:
    """Adjoint of `im2col`: scatter-add (C*9, H*W) columns back to (C, H, W)."""
    _check_float2d("col2im input", cols)
    if cols.shape != (channels * 9, height * width):
        raise ShapeError(
            f"col2im input shape {cols.shape} does not match "
            f"(channels*9, height*width) = ({channels * 9}, {height * width})"
        )
    return kernels.col2im_3x3(
        np.ascontiguousarray(cols), channels, height, width
    )


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeError(f"add shape mismatch: {x.shape} vs {y.shape}")
    return x + y


def scale(x: np.ndarray, factor: float) -> np.ndarray:
    return x * x.dtype.type(factor)


def clamp01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0, 1)


def ensure_finite(x: np.ndarray, context: str) -> np.ndarray:
    """Raise NumericError if x holds NaN or Inf; return x unchanged."""
    if not np.isfinite(x).all():
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericError(
            f"{context}: {bad} non-finite value(s) in tensor of shape {x.shape}"
        )
    return x
