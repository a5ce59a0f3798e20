"""Attention maps and the Attention Processor that builds the refined noise map."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .errors import ParameterError
from .seeding import rng_for

NATIVE_RESOLUTION = 16


def average_attention(maps):
    if len(maps) == 0:
        raise ParameterError("no attention maps to average")
    shape = np.shape(maps[0])
    if any(np.shape(m) != shape for m in maps):
        raise ParameterError("attention maps have mixed resolutions")
    return np.mean(np.stack(maps).astype(np.float64), axis=0)


def resize_attention(A, H, W):
    """Bilinear resize with half-pixel centres and edge clamping."""
    if H <= 0 or W <= 0:
        raise ParameterError("target size must be positive")
    A = np.asarray(A, dtype=np.float64)
    h, w = A.shape
    if (h, w) == (H, W):
        return A.copy()

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, H)
    c0, c1, fc = axis(w, W)
    top = A[r0][:, c0] * (1 - fc) + A[r0][:, c1] * fc
    bot = A[r1][:, c0] * (1 - fc) + A[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


@dataclass
class PixelSets:
    g_ed: np.ndarray  # (N, 2) row-major over the mask support
    g_pr: np.ndarray  # (ceil(N/2), 2) by descending attention
    v_min: float

    @property
    def n(self):
        return len(self.g_ed)


def build_pixel_sets(A, m) -> PixelSets:
    A = np.asarray(A, dtype=np.float64)
    m = np.asarray(m)
    if A.shape != m.shape:
        raise ParameterError(f"attention {A.shape} and mask {m.shape} differ in resolution")
    g_ed = np.argwhere(m > 0)
    n = len(g_ed)
    if n == 0:
        empty = np.zeros((0, 2), dtype=np.intp)
        return PixelSets(empty, empty, math.nan)
    n_pr = (n + 1) // 2
    # stable sort on -A keeps row-major order among ties
    order = np.argsort(-A.ravel(), kind="stable")[:n_pr]
    g_pr = np.column_stack(np.unravel_index(order, A.shape))
    return PixelSets(g_ed, g_pr, float(A.ravel()[order[-1]]))


def attention_process(x_S, x_S_no, A, m, seed, backend=None, return_sources=False):
    """Replace in-mask pixels of ``x_S`` with high-attention pixels of ``x_S_no``.

    The i-th in-mask site takes the i-th pixel of G_pr; sites beyond
    ``|G_pr|`` take a seeded uniform draw from G_pr. Full channel vectors are
    copied.
    """
    x_S = np.asarray(x_S, dtype=np.float64)
    x_S_no = np.asarray(x_S_no, dtype=np.float64)
    if x_S.shape != x_S_no.shape:
        raise ParameterError(f"noise maps differ: {x_S.shape} vs {x_S_no.shape}")
    if x_S.shape[1:] != np.shape(A) or np.shape(A) != np.shape(m):
        raise ParameterError("noise maps, attention and mask must share spatial resolution")
    sets = build_pixel_sets(A, m)
    out = np.array(x_S, dtype=np.float64, order="C", copy=True)
    n, n_pr = sets.n, len(sets.g_pr)
    if n == 0:
        return (out, sets, np.zeros((0, 2), dtype=np.intp)) if return_sources else out
    rng = rng_for(seed, "attention-processor")
    extra = rng.integers(n_pr, size=n - n_pr)
    src = np.concatenate([sets.g_pr, sets.g_pr[extra]], axis=0)
    kernels.substitute_pixels(out, x_S_no, sets.g_ed, src, backend=backend)
    return (out, sets, src) if return_sources else out


def downsample(grid, size):
    """Block-mean downsample of a square-ish grid to ``size`` x ``size``."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    if (h, w) == (size, size):
        return grid.copy()
    if h % size or w % size:
        return resize_attention(grid, size, size)
    return grid.reshape(size, h // size, size, w // size).mean(axis=(1, 3))


class SyntheticAttention:
    """Stand-in for U-Net cross-attention.

    Each emitted map is the target-region indicator plus
    ``noise_level * (field + 0.5 * jitter_t)``, clipped at zero and scaled to
    a peak of one. ``field`` is a smooth per-run distractor shared by all
    steps; ``jitter_t`` is fresh white noise per timestep.
    """

    def __init__(self, region, noise_level=0.0, seed=0, resolution=NATIVE_RESOLUTION):
        if noise_level < 0:
            raise ParameterError("noise_level must be non-negative")
        self.indicator = downsample((np.asarray(region) > 0).astype(np.float64), resolution)
        self.noise_level = float(noise_level)
        self.seed = seed
        self.resolution = resolution
        if self.noise_level > 0:
            raw = rng_for(seed, "attention-field").standard_normal((resolution, resolution))
            smooth = gaussian_filter(raw, sigma=1.5, mode="wrap")
            self.field = (smooth - smooth.mean()) / smooth.std()
        else:
            self.field = np.zeros((resolution, resolution))

    def emit(self, x_t=None, t=0, c=None):
        if self.noise_level == 0:
            return self.indicator.copy()
        jitter = rng_for(self.seed, "attention-step", int(t)).standard_normal(self.field.shape)
        raw = np.maximum(self.indicator + self.noise_level * (self.field + 0.5 * jitter), 0.0)
        peak = raw.max()
        return raw / peak if peak > 0 else raw


def synthetic_attention(task, noise_level=0.0, seed=0) -> SyntheticAttention:
    return SyntheticAttention(task.region, noise_level=noise_level, seed=seed)


def save_attention(A, path):
    """Write ``A`` as a 16-bit grayscale PNG plus a JSON sidecar with min/max."""
    from PIL import Image

    A = np.asarray(A, dtype=np.float64)
    lo, hi = float(A.min()), float(A.max())
    span = hi - lo
    q = np.zeros(A.shape, dtype=np.uint16) if span == 0 else np.round((A - lo) / span * 65535).astype(np.uint16)
    path = Path(path)
    Image.fromarray(q).save(path)
    path.with_suffix(".json").write_text(
        json.dumps({"min": lo, "max": hi, "shape": list(A.shape)}, sort_keys=True) + "\n"
    )


def load_attention(path):
    from PIL import Image

    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    q = np.asarray(Image.open(path), dtype=np.float64)
    return meta["min"] + q / 65535.0 * (meta["max"] - meta["min"])
