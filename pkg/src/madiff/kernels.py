"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports cleanly. Set
``MADIFF_PURE_PYTHON=1`` to force the fallback. Large convolutions go to
the numpy path anyway: its einsum contraction reaches BLAS and beats the
plain compiled loops once a batch holds more than a few images (see
``benchmarks/bench_kernels.py``).
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MADIFF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


# multiply-adds per kernel tap above which numpy wins
CONV_CROSSOVER = 50_000


def _conv_impl(x, w, backend):
    if backend is None and BACKEND == "cython":
        work = x.shape[0] * x.shape[1] * w.shape[0] * x.shape[2] * x.shape[3]
        return _pykernels if work > CONV_CROSSOVER else _impl
    return _select(backend)


def conv2d_forward(x, w, b, backend=None):
    """Same-padded stride-1 convolution. ``x`` is (N, C, H, W), ``w`` is (O, C, k, k)."""
    impl = _conv_impl(x, w, backend)
    return impl.conv2d_forward(_c(x), _c(w), _c(b))


def conv2d_backward(x, w, grad_out, backend=None):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv2d_forward`."""
    impl = _conv_impl(x, w, backend)
    return impl.conv2d_backward(_c(x), _c(w), _c(grad_out))


def substitute_pixels(out, src, dst, src_idx, backend=None):
    """Copy full channel vectors ``src[:, src_idx[i]]`` into ``out[:, dst[i]]`` in place.

    ``dst`` and ``src_idx`` are (n, 2) integer arrays of (row, col).
    """
    impl = _select(backend)
    dst = np.asarray(dst, dtype=np.intp).reshape(-1, 2)
    src_idx = np.asarray(src_idx, dtype=np.intp).reshape(-1, 2)
    if not out.flags.c_contiguous or out.dtype != np.float64:
        raise ValueError("out must be a C-contiguous float64 array")
    impl.substitute_pixels(
        out,
        _c(src),
        np.ascontiguousarray(dst[:, 0]),
        np.ascontiguousarray(dst[:, 1]),
        np.ascontiguousarray(src_idx[:, 0]),
        np.ascontiguousarray(src_idx[:, 1]),
    )
    return out


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        if BACKEND != "cython":
            raise RuntimeError("compiled kernels are not available")
        return _impl
    raise ValueError(f"unknown backend {backend!r}")
