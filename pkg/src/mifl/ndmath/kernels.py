"""Convolution and max-pooling kernels, the hot inner loops of training.

Two interchangeable implementations are provided:

* a numba ``@njit`` path (default when numba is importable), and
* a pure-NumPy path using strided windows.

Set the environment variable ``MIFL_NUMBA=0`` before import to force the
NumPy path.  Both paths accumulate in float64 and cast back to the input
dtype, so they agree to the last float32 bit in practice; within either
path results are bit-reproducible run to run.

``benchmarks/kernel_bench.py`` times the two paths against each other.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("MIFL_NUMBA", "1").strip().lower()
_NUMBA_REQUESTED = _FLAG not in ("0", "false", "off", "no")

try:
    if _NUMBA_REQUESTED:
        from numba import njit

        HAS_NUMBA = True
    else:
        HAS_NUMBA = False
except ImportError:  # pragma: no cover - exercised only without numba installed
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# Pure-NumPy implementations
# ---------------------------------------------------------------------------

def _windows(x, kh, kw, sh=1, sw=1):
    """Read-only sliding windows of shape (B, C, OH, OW, kh, kw)."""
    b, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    sb, sc, srow, scol = x.strides
    shape = (b, c, oh, ow, kh, kw)
    strides = (sb, sc, srow * sh, scol * sw, srow, scol)
    return np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides, writeable=False)


def conv2d_forward_numpy(x, w, b):
    """Valid, stride-1 cross-correlation: (B,C,H,W) * (F,C,KH,KW) -> (B,F,OH,OW)."""
    win = _windows(x, w.shape[2], w.shape[3]).astype(np.float64)
    out = np.einsum("bcijkl,fckl->bfij", win, w.astype(np.float64))
    out += b.astype(np.float64)[None, :, None, None]
    return out.astype(x.dtype)


def conv2d_backward_numpy(x, w, gout):
    """Gradients of conv2d_forward w.r.t. input, weights, and bias."""
    kh, kw = w.shape[2], w.shape[3]
    g64 = gout.astype(np.float64)
    win = _windows(x, kh, kw).astype(np.float64)
    gw = np.einsum("bcijkl,bfij->fckl", win, g64)
    gb = g64.sum(axis=(0, 2, 3))
    # full correlation of gout with the spatially flipped kernel
    gpad = np.pad(g64, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    gwin = _windows(gpad, kh, kw)
    wflip = w[:, :, ::-1, ::-1].astype(np.float64)
    gx = np.einsum("bfijkl,fckl->bcij", gwin, wflip)
    return gx.astype(x.dtype), gw.astype(w.dtype), gb.astype(w.dtype)


def maxpool2d_forward_numpy(x, kernel, stride):
    """Max pooling; returns (out, argmax) with argmax as flat (h*W + w) indices.

    Ties resolve to the first maximum in row-major window order, matching
    the numba path.
    """
    b, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    win = _windows(x, kernel, kernel, stride, stride).reshape(b, c, oh, ow, kernel * kernel)
    flat_arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, flat_arg[..., None], axis=-1)[..., 0]
    ki, kj = flat_arg // kernel, flat_arg % kernel
    rows = np.arange(oh)[None, None, :, None] * stride + ki
    cols = np.arange(ow)[None, None, None, :] * stride + kj
    argmax = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(out), argmax


def maxpool2d_backward_numpy(argmax, gout, in_shape):
    """Scatter-add pooled gradients back to the chosen input positions."""
    b, c, h, w = in_shape
    gx = np.zeros((b, c, h * w), dtype=gout.dtype)
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(gx, (bi, ci, argmax), gout)
    return gx.reshape(in_shape)


# ---------------------------------------------------------------------------
# Numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True, nogil=True)
    def conv2d_forward_numba(x, w, b):
        bn, c, h, wd = x.shape
        f, _, kh, kw = w.shape
        oh = h - kh + 1
        ow = wd - kw + 1
        out = np.empty((bn, f, oh, ow), dtype=x.dtype)
        for n in range(bn):
            for fo in range(f):
                for i in range(oh):
                    for j in range(ow):
                        acc = 0.0
                        for ch in range(c):
                            for ki in range(kh):
                                for kj in range(kw):
                                    acc += x[n, ch, i + ki, j + kj] * w[fo, ch, ki, kj]
                        out[n, fo, i, j] = acc + b[fo]
        return out

    @njit(cache=True, nogil=True)
    def conv2d_backward_numba(x, w, gout):
        bn, c, h, wd = x.shape
        f, _, kh, kw = w.shape
        oh = h - kh + 1
        ow = wd - kw + 1
        gx = np.zeros((bn, c, h, wd), dtype=np.float64)
        gw = np.zeros((f, c, kh, kw), dtype=np.float64)
        gb = np.zeros(f, dtype=np.float64)
        for n in range(bn):
            for fo in range(f):
                for i in range(oh):
                    for j in range(ow):
                        g = gout[n, fo, i, j]
                        gb[fo] += g
                        for ch in range(c):
                            for ki in range(kh):
                                for kj in range(kw):
                                    gw[fo, ch, ki, kj] += g * x[n, ch, i + ki, j + kj]
                                    gx[n, ch, i + ki, j + kj] += g * w[fo, ch, ki, kj]
        return gx.astype(x.dtype), gw.astype(w.dtype), gb.astype(w.dtype)

    @njit(cache=True, nogil=True)
    def maxpool2d_forward_numba(x, kernel, stride):
        bn, c, h, w = x.shape
        oh = (h - kernel) // stride + 1
        ow = (w - kernel) // stride + 1
        out = np.empty((bn, c, oh, ow), dtype=x.dtype)
        argmax = np.empty((bn, c, oh, ow), dtype=np.int64)
        for n in range(bn):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        bi = i * stride
                        bj = j * stride
                        best = x[n, ch, bi, bj]
                        besti = bi * w + bj
                        for ki in range(kernel):
                            for kj in range(kernel):
                                v = x[n, ch, bi + ki, bj + kj]
                                if v > best:
                                    best = v
                                    besti = (bi + ki) * w + (bj + kj)
                        out[n, ch, i, j] = best
                        argmax[n, ch, i, j] = besti
        return out, argmax

    @njit(cache=True, nogil=True)
    def maxpool2d_backward_numba(argmax, gout, b, c, h, w):
        gx = np.zeros((b, c, h * w), dtype=gout.dtype)
        oh, ow = gout.shape[2], gout.shape[3]
        for n in range(b):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        gx[n, ch, argmax[n, ch, i, j]] += gout[n, ch, i, j]
        return gx.reshape((b, c, h, w))


# ---------------------------------------------------------------------------
# Active-path selection
# ---------------------------------------------------------------------------

def _pool_backward_np(argmax, gout, in_shape):
    return maxpool2d_backward_numpy(argmax, gout, in_shape)


if HAS_NUMBA:

    def conv2d_forward(x, w, b):
        return conv2d_forward_numba(np.ascontiguousarray(x), np.ascontiguousarray(w), b)

    def conv2d_backward(x, w, gout):
        return conv2d_backward_numba(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(gout)
        )

    def maxpool2d_forward(x, kernel, stride):
        return maxpool2d_forward_numba(np.ascontiguousarray(x), kernel, stride)

    def maxpool2d_backward(argmax, gout, in_shape):
        b, c, h, w = in_shape
        return maxpool2d_backward_numba(argmax, np.ascontiguousarray(gout), b, c, h, w)

    ACTIVE_PATH = "numba"
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward = conv2d_backward_numpy
    maxpool2d_forward = maxpool2d_forward_numpy
    maxpool2d_backward = _pool_backward_np
    ACTIVE_PATH = "numpy"


def warmup():
    """Trigger JIT compilation on tiny arrays so later timings are clean."""
    x = np.zeros((1, 1, 4, 4), dtype=np.float32)
    w = np.zeros((1, 1, 2, 2), dtype=np.float32)
    b = np.zeros(1, dtype=np.float32)
    out = conv2d_forward(x, w, b)
    conv2d_backward(x, w, out)
    pooled, idx = maxpool2d_forward(x, 2, 2)
    maxpool2d_backward(idx, pooled, x.shape)
