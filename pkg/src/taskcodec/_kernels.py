"""Hot inner loops for the convolution and activation ops.

Two interchangeable implementations live here: numba ``@njit`` loops and a
pure-numpy path built from strided slices.  The active one is picked from
the ``TASKCODEC_KERNELS`` environment variable (``numba`` or ``numpy``) at
import time and can be switched later with :func:`set_backend`.  Without
numba installed the numpy path is always used.

All kernels work on C-contiguous NCHW arrays and keep the input dtype, so
the float64 gradient-check mode runs through the same code.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

_ENV_FLAG = "TASKCODEC_KERNELS"


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def _im2col_numpy(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + hspan:stride, j:j + wspan:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im_numpy(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + hspan:stride, j:j + wspan:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return xp


def _prelu_forward_numpy(x, slope):
    a = slope.reshape((1, -1) + (1,) * (x.ndim - 2)) if x.ndim > 1 else slope
    return np.where(x >= 0, x, a * x).astype(x.dtype, copy=False)


def _prelu_backward_numpy(x, slope, g):
    a = slope.reshape((1, -1) + (1,) * (x.ndim - 2)) if x.ndim > 1 else slope
    neg = x < 0
    dx = np.where(neg, a * g, g).astype(x.dtype, copy=False)
    contrib = np.where(neg, g * x, 0).astype(x.dtype, copy=False)
    if slope.shape[0] == 1:
        da = np.array([contrib.sum()], dtype=x.dtype)
    else:
        axes = (0,) + tuple(range(2, x.ndim))
        da = contrib.sum(axis=axes)
    return dx, da


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
        for ci in range(c):
            for b in range(n):
                for y in range(ho):
                    for i in range(kh):
                        row = xp[b, ci, i + stride * y]
                        for j in range(kw):
                            dst = cols[ci, i, j, b, y]
                            for x in range(wo):
                                dst[x] = row[j + stride * x]
        return cols.reshape(c * kh * kw, n * ho * wo)

    @njit(cache=True)
    def _col2im_nb(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
        xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    src = cols[(ci * kh + i) * kw + j]
                    k = 0
                    for b in range(n):
                        for y in range(ho):
                            row = xp[b, ci, i + stride * y]
                            for x in range(wo):
                                row[j + stride * x] += src[k + x]
                            k += wo
        return xp

    @njit(cache=True)
    def _prelu_forward_nb4(x, slope):
        out = np.empty_like(x)
        n, c, h, w = x.shape
        shared = slope.shape[0] == 1
        for b in range(n):
            for ci in range(c):
                a = slope[0] if shared else slope[ci]
                for y in range(h):
                    for z in range(w):
                        v = x[b, ci, y, z]
                        out[b, ci, y, z] = v if v >= 0 else a * v
        return out

    @njit(cache=True)
    def _prelu_backward_nb4(x, slope, g):
        dx = np.empty_like(x)
        n, c, h, w = x.shape
        shared = slope.shape[0] == 1
        da = np.zeros(slope.shape[0], dtype=x.dtype)
        for b in range(n):
            for ci in range(c):
                k = 0 if shared else ci
                a = slope[k]
                acc = 0.0
                for y in range(h):
                    for z in range(w):
                        v = x[b, ci, y, z]
                        gv = g[b, ci, y, z]
                        if v >= 0:
                            dx[b, ci, y, z] = gv
                        else:
                            dx[b, ci, y, z] = a * gv
                            acc += gv * v
                da[k] += acc
        return dx, da

    def _im2col_numba(xp, kh, kw, stride, ho, wo):
        # unit stride is a plain block copy; numpy slicing is already at memory bandwidth
        if stride == 1:
            return _im2col_numpy(xp, kh, kw, stride, ho, wo)
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)

    def _col2im_numba(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
        return _col2im_nb(np.ascontiguousarray(cols), n, c, hp, wp, kh, kw, stride, ho, wo)

    def _prelu_forward_numba(x, slope):
        if x.ndim != 4:
            return _prelu_forward_numpy(x, slope)
        return _prelu_forward_nb4(np.ascontiguousarray(x), slope.astype(x.dtype))

    def _prelu_backward_numba(x, slope, g):
        if x.ndim != 4:
            return _prelu_backward_numpy(x, slope, g)
        return _prelu_backward_nb4(
            np.ascontiguousarray(x), slope.astype(x.dtype), np.ascontiguousarray(g, dtype=x.dtype)
        )


_TABLES = {
    "numpy": {
        "im2col": _im2col_numpy,
        "col2im": _col2im_numpy,
        "prelu_forward": _prelu_forward_numpy,
        "prelu_backward": _prelu_backward_numpy,
    },
}
if HAVE_NUMBA:
    _TABLES["numba"] = {
        "im2col": _im2col_numba,
        "col2im": _col2im_numba,
        "prelu_forward": _prelu_forward_numba,
        "prelu_backward": _prelu_backward_numba,
    }

_active = {}
BACKEND = ""


def available_backends():
    return sorted(_TABLES)


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels for subsequent calls."""
    global BACKEND
    if name not in _TABLES:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active.clear()
    _active.update(_TABLES[name])
    BACKEND = name


def _default_backend():
    requested = os.environ.get(_ENV_FLAG, "").strip().lower()
    if requested:
        if requested not in ("numba", "numpy"):
            raise ValueError(f"{_ENV_FLAG} must be 'numba' or 'numpy', got {requested!r}")
        return requested if requested in _TABLES else "numpy"
    return "numba" if HAVE_NUMBA else "numpy"


set_backend(_default_backend())


def im2col(xp, kh, kw, stride, ho, wo):
    """Unfold padded ``(N, C, Hp, Wp)`` input into ``(C*kh*kw, N*ho*wo)`` columns."""
    return _active["im2col"](xp, kh, kw, stride, ho, wo)


def col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    """Scatter-add columns back into a zeroed ``(N, C, hp, wp)`` array."""
    return _active["col2im"](cols, n, c, hp, wp, kh, kw, stride, ho, wo)


def prelu_forward(x, slope):
    return _active["prelu_forward"](x, slope)


def prelu_backward(x, slope, g):
    return _active["prelu_backward"](x, slope, g)
