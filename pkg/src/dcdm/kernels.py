"""Hot numeric kernels: GEMM, im2col, col2im.

Each kernel has a numba-compiled variant and a pure-numpy variant; the
active one is picked per call via `backend.active_backend()`. Both
variants produce bitwise-identical results run-to-run at a fixed thread
count. The numba GEMM accumulates each output element over k in a fixed
ascending order inside row tiles, so it is reproducible even across
thread counts.
"""

from __future__ import annotations

import numpy as np

from . import backend

_ROW_TILE = 64  # gemm parallelizes over tiles of this many output rows


# -- numpy variants ----------------------------------------------------------


def _gemm_numpy(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    np.matmul(a, b, out=out)


def _im2col_numpy(x: np.ndarray, cols: np.ndarray) -> None:
    c, h, w = x.shape
    padded = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
    padded[:, 1 : 1 + h, 1 : 1 + w] = x
    view = cols.reshape(c, 9, h * w)
    for ky in range(3):
        for kx in range(3):
            view[:, ky * 3 + kx, :] = padded[:, ky : ky + h, kx : kx + w].reshape(
                c, h * w
            )


def _col2im_numpy(cols: np.ndarray, out: np.ndarray) -> None:
    c, h, w = out.shape
    padded = np.zeros((c, h + 2, w + 2), dtype=cols.dtype)
    view = cols.reshape(c, 9, h, w)
    for ky in range(3):
        for kx in range(3):
            padded[:, ky : ky + h, kx : kx + w] += view[:, ky * 3 + kx]
    out += padded[:, 1 : 1 + h, 1 : 1 + w]


# -- numba variants ----------------------------------------------------------

if backend.HAS_NUMBA:
    from numba import njit, prange

    @njit(parallel=True, cache=True)
    def _gemm_numba(a, b, out):
        m, k = a.shape
        n = b.shape[1]
        ntiles = (m + _ROW_TILE - 1) // _ROW_TILE
        for t in prange(ntiles):
            i0 = t * _ROW_TILE
            i1 = min(i0 + _ROW_TILE, m)
            for i in range(i0, i1):
                for j in range(n):
                    out[i, j] = 0.0
                for kk in range(k):
                    aik = a[i, kk]
                    for j in range(n):
                        out[i, j] += aik * b[kk, j]

    @njit(parallel=True, cache=True)
    def _im2col_numba(x, cols):
        c, h, w = x.shape
        for ci in prange(c):
            for ky in range(3):
                for kx in range(3):
                    row = ci * 9 + ky * 3 + kx
                    for oy in range(h):
                        iy = oy + ky - 1
                        base = oy * w
                        if 0 <= iy < h:
                            for ox in range(w):
                                ix = ox + kx - 1
                                if 0 <= ix < w:
                                    cols[row, base + ox] = x[ci, iy, ix]
                                else:
                                    cols[row, base + ox] = 0.0
                        else:
                            for ox in range(w):
                                cols[row, base + ox] = 0.0

    @njit(parallel=True, cache=True)
    def _col2im_numba(cols, out):
        c, h, w = out.shape
        for ci in prange(c):
            for ky in range(3):
                for kx in range(3):
                    row = ci * 9 + ky * 3 + kx
                    for oy in range(h):
                        iy = oy + ky - 1
                        if 0 <= iy < h:
                            base = oy * w
                            for ox in range(w):
                                ix = ox + kx - 1
                                if 0 <= ix < w:
                                    out[ci, iy, ix] += cols[row, base + ox]


# -- dispatch ----------------------------------------------------------------


def gemm_into(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    """out = a @ b for C-contiguous 2D arrays of matching float dtype."""
    if backend.active_backend() == backend.NUMBA:
        _gemm_numba(a, b, out)
    else:
        _gemm_numpy(a, b, out)


def im2col_3x3(x: np.ndarray) -> np.ndarray:
    """Rearrange (C, H, W) into (C*9, H*W) columns of 3x3 receptive fields.

    Stride 1, zero padding 1: column j holds the field centered at output
    pixel j; row index is c*9 + ky*3 + kx.
    """
    c, h, w = x.shape
    cols = np.empty((c * 9, h * w), dtype=x.dtype)
    if backend.active_backend() == backend.NUMBA:
        _im2col_numba(x, cols)
    else:
        _im2col_numpy(x, cols)
    return cols


def col2im_3x3(cols: np.ndarray, channels: int, height: int, width: int) -> np.ndarray:
    """Adjoint of im2col_3x3: scatter-add columns back to (C, H, W)."""
    out = np.zeros((channels, height, width), dtype=cols.dtype)
    if backend.active_backend() == backend.NUMBA:
        _col2im_numba(cols, out)
    else:
        _col2im_numpy(cols, out)
    return out
