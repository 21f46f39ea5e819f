"""Scatter-add kernel shared by conv backward and transposed-conv forward."""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _col2im_numpy(cols: np.ndarray, out: np.ndarray, stride: int) -> np.ndarray:
    _, h, w, kh, kw, _ = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * h:stride, j:j + stride * w:stride, :] += cols[:, :, :, i, j, :]
    return out


if numba is not None:

    @numba.njit(cache=True)
    def _col2im_numba(cols, out, stride):
        n, h, w, kh, kw, c = cols.shape
        for b in range(n):
            for y in range(h):
                for x in range(w):
                    for i in range(kh):
                        oy = y * stride + i
                        for j in range(kw):
                            ox = x * stride + j
                            for k in range(c):
                                out[b, oy, ox, k] += cols[b, y, x, i, j, k]
        return out

    def col2im(cols: np.ndarray, out: np.ndarray, stride: int) -> np.ndarray:
        """out[:, y*s+i, x*s+j, :] += cols[:, y, x, i, j, :] for all taps."""
        return _col2im_numba(np.ascontiguousarray(cols), out, stride)

else:  # pragma: no cover
    col2im = _col2im_numpy
