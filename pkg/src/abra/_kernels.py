"""Convolution unfolding kernels.

Two implementations of ``im2col`` / ``col2im`` live here: a numba ``@njit``
path and a pure-numpy path.  The numba path is used when numba imports and
``ABRA_NUMBA`` is not set to ``0``; both produce bitwise-identical results
(they perform the same additions in the same order).
"""
from __future__ import annotations

import os

import numpy as np

_WANT_NUMBA = os.environ.get("ABRA_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError("disabled by ABRA_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------------
# pure numpy
# --------------------------------------------------------------------------

def im2col_numpy(x, kh, kw, stride, pad):
    """(N, C, H, W) -> (C*kh*kw, N*Ho*Wo), rows ordered (c, i, j)."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im_numpy(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w].copy()
    return xp


# --------------------------------------------------------------------------
# numba
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, kh, kw, stride, pad, ho, wo):
        n, c, h, w = x.shape
        out = np.zeros((c * kh * kw, n * ho * wo), dtype=x.dtype)
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    for ni in range(n):
                        base = ni * ho * wo
                        for oy in range(ho):
                            y = oy * stride + i - pad
                            if y < 0 or y >= h:
                                continue
                            for ox in range(wo):
                                xx = ox * stride + j - pad
                                if xx < 0 or xx >= w:
                                    continue
                                out[row, base + oy * wo + ox] = x[ni, ci, y, xx]
        return out

    @njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, kh, kw, stride, pad, ho, wo):
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        # loop order (i, j) outermost matches the numpy path's accumulation order
        for i in range(kh):
            for j in range(kw):
                for ci in range(c):
                    row = (ci * kh + i) * kw + j
                    for ni in range(n):
                        base = ni * ho * wo
                        for oy in range(ho):
                            y = oy * stride + i - pad
                            if y < 0 or y >= h:
                                continue
                            for ox in range(wo):
                                xx = ox * stride + j - pad
                                if xx < 0 or xx >= w:
                                    continue
                                out[ni, ci, y, xx] += cols[row, base + oy * wo + ox]
        return out

    def im2col_numba(x, kh, kw, stride, pad):
        _, _, h, w = x.shape
        ho = conv_out_size(h, kh, stride, pad)
        wo = conv_out_size(w, kw, stride, pad)
        return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad, ho, wo)

    def col2im_numba(cols, x_shape, kh, kw, stride, pad):
        n, c, h, w = x_shape
        ho = conv_out_size(h, kh, stride, pad)
        wo = conv_out_size(w, kw, stride, pad)
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad, ho, wo)

    im2col = im2col_numba
    col2im = col2im_numba
else:
    im2col_numba = col2im_numba = None
    im2col = im2col_numpy
    col2im = col2im_numpy


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
