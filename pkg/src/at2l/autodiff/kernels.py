"""Hot convolution kernels (patch extraction and its adjoint).

Two implementations live here: numba ``@njit`` loops and a pure-numpy path
built on ``sliding_window_view``. The numba scatter-add in :func:`col2im` is
used when numba imports cleanly and ``AT2L_NUMBA`` is not ``0``. Patch
extraction always takes the numpy strided copy (see ``im2col_numba``). Both
paths produce bit-identical results; ``benchmarks/bench_kernels.py``
compares their speed.
"""

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def numba_enabled():
    return _HAVE_NUMBA and os.environ.get("AT2L_NUMBA", "1") != "0"


def im2col_numpy(x, kh, kw):
    """(N, H, W, C) -> (N, H-kh+1, W-kw+1, kh, kw, C), contiguous."""
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    # sliding_window_view puts the window axes last: (N, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def col2im_numpy(cols, h, w):
    n, ho, wo, kh, kw, c = cols.shape
    out = np.zeros((n, h, w, c), dtype=cols.dtype)
    for p in range(kh):
        for q in range(kw):
            out[:, p:p + ho, q:q + wo, :] += cols[:, :, :, p, q, :]
    return out


if _HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def im2col_numba(x, kh, kw):
        # kept for benchmarks/bench_kernels.py: measured 2-3x slower than the
        # strided copy in im2col_numpy, so im2col() never dispatches here
        n, h, w, c = x.shape
        ho = h - kh + 1
        wo = w - kw + 1
        out = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for p in range(kh):
                        for q in range(kw):
                            for ch in range(c):
                                out[b, i, j, p, q, ch] = x[b, i + p, j + q, ch]
        return out

    @njit(cache=True, nogil=True)
    def col2im_numba(cols, h, w):
        n, ho, wo, kh, kw, c = cols.shape
        out = np.zeros((n, h, w, c), dtype=cols.dtype)
        # same summation order as col2im_numpy so both paths agree bitwise
        for p in range(kh):
            for q in range(kw):
                for b in range(n):
                    for i in range(ho):
                        for j in range(wo):
                            src = cols[b, i, j, p, q]
                            dst = out[b, i + p, j + q]
                            for ch in range(c):
                                dst[ch] += src[ch]
        return out


def im2col(x, kh, kw):
    return im2col_numpy(x, kh, kw)


def col2im(cols, h, w):
    if numba_enabled():
        return col2im_numba(np.ascontiguousarray(cols), h, w)
    return col2im_numpy(cols, h, w)
