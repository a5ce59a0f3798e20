"""Numpy fallbacks for the compiled kernels in ``_ckernels.pyx``.

Signatures and results match the compiled versions to round-off.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _patches(x, k):
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (N, C, H, W, k, k)
    return sliding_window_view(xp, (k, k), axis=(2, 3))


def conv2d_forward(x, w, b):
    k = w.shape[2]
    cols = _patches(x, k)
    out = np.einsum("nchwij,ocij->nohw", cols, w, optimize=True)
    return out + b[None, :, None, None]


def conv2d_backward(x, w, g):
    k = w.shape[2]
    pad = k // 2
    cols = _patches(x, k)
    gw = np.einsum("nchwij,nohw->ocij", cols, g, optimize=True)
    gb = g.sum(axis=(0, 2, 3))
    # full correlation with the flipped kernel
    gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gcols = sliding_window_view(gp, (k, k), axis=(2, 3))
    gx = np.einsum("nohwij,ocij->nchw", gcols, w[:, :, ::-1, ::-1], optimize=True)
    return gx, gw, gb


def substitute_pixels(out, src, dst_rows, dst_cols, src_rows, src_cols):
    out[:, dst_rows, dst_cols] = src[:, src_rows, src_cols]
