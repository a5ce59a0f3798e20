"""Analytic stand-ins for text alignment, preservation and perceptual
distance, plus benchmark, ablation and attention-statistics harnesses."""
from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .datagen import EditTask, cloth_mask, garment_colors, render
from .errors import ParameterError

COLOR_TOLERANCE = 0.25
SUCCESS_THRESHOLD = 0.5
PATTERN_SCALE = 0.3
PATCH = 4


def _pixels_within(img, colors, tol):
    """(H, W) bool: pixel RGB within ``tol`` of any of ``colors`` (k, 3)."""
    d = np.linalg.norm(img[None, :, :, :] - colors[:, :, None, None], axis=1)
    return (d <= tol).any(axis=0)


def color_score(x_out, task: EditTask, tol=COLOR_TOLERANCE):
    region = task.region > 0
    if not region.any():
        return 1.0
    target = render(task.target_spec, task.input.body_seed).image
    close = np.linalg.norm(x_out - target, axis=0) <= tol
    return float(close[region].mean())


def detail_score(x_out, task: EditTask, tol=COLOR_TOLERANCE):
    region = task.region > 0
    garment = _pixels_within(x_out, garment_colors(task.target_spec), tol) & region
    truth = (cloth_mask(task.target_spec, task.input.body_seed) > 0) & region
    union = (garment | truth).sum()
    return 1.0 if union == 0 else float((garment & truth).sum() / union)


def pattern_stats(img, where):
    """Mean absolute vertical and horizontal neighbour differences over ``where``."""
    v_pairs = where[:-1, :] & where[1:, :]
    h_pairs = where[:, :-1] & where[:, 1:]
    dv = np.abs(np.diff(img, axis=1)).mean(axis=0)
    dh = np.abs(np.diff(img, axis=2)).mean(axis=0)
    sv = float(dv[v_pairs].mean()) if v_pairs.any() else 0.0
    sh = float(dh[h_pairs].mean()) if h_pairs.any() else 0.0
    return sv, sh


def material_score(x_out, task: EditTask, scale=PATTERN_SCALE):
    where = (task.region > 0) & (cloth_mask(task.target_spec, task.input.body_seed) > 0)
    target = render(task.target_spec, task.input.body_seed).image
    sv, sh = pattern_stats(x_out, where)
    tv, th = pattern_stats(target, where)
    return float(max(0.0, 1.0 - (abs(sv - tv) + abs(sh - th)) / scale))


def alignment_score(result, task: EditTask, tol=COLOR_TOLERANCE) -> float:
    """Task-specific agreement of the edit with the target prompt, in [0, 1].

    Reads only pixels inside the task's editing region.
    """
    x_out = getattr(result, "x_out", result)
    x_out = np.asarray(x_out, dtype=np.float64)
    if task.task_type == "color":
        return color_score(x_out, task, tol)
    if task.task_type == "detail":
        return detail_score(x_out, task, tol)
    if task.task_type == "material":
        return material_score(x_out, task)
    changed = task.changed
    parts = []
    if "color" in changed:
        parts.append(color_score(x_out, task, tol))
    if "sleeve" in changed or "collar" in changed:
        parts.append(detail_score(x_out, task, tol))
    if "pattern" in changed:
        parts.append(material_score(x_out, task))
    return float(np.mean(parts)) if parts else 1.0


def preservation_score(result, task: EditTask, x_org=None) -> float:
    """``1 - mean|x_out - x_org| / 2`` over pixels outside the editing region."""
    x_out = np.asarray(getattr(result, "x_out", result), dtype=np.float64)
    x_org = task.input.image if x_org is None else np.asarray(x_org, dtype=np.float64)
    outside = task.region <= 0
    if not outside.any():
        return 1.0
    diff = np.abs(x_out - x_org)[:, outside]
    return float(np.clip(1.0 - diff.mean() / 2.0, 0.0, 1.0))


def _patch_stats(img, patch=PATCH):
    c, h, w = img.shape
    if h % patch or w % patch:
        raise ParameterError(f"image {h}x{w} is not a multiple of the {patch}-pixel patch")
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[:, :, :-1] = img[:, :, 1:] - img[:, :, :-1]
    dy[:, :-1, :] = img[:, 1:, :] - img[:, :-1, :]
    grad = np.sqrt(dx**2 + dy**2)

    def blocks(a):
        return a.reshape(c, h // patch, patch, w // patch, patch)

    b = blocks(img)
    return b.mean(axis=(2, 4)), b.var(axis=(2, 4)), blocks(grad).mean(axis=(2, 4))


def perceptual_distance(a, b) -> float:
    """Mean over 4x4 patches and channels of |d mean| + |d variance| + |d gradient magnitude|, / 3."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    sa, sb = _patch_stats(a), _patch_stats(b)
    return float(sum(np.abs(x - y).mean() for x, y in zip(sa, sb)) / 3.0)


@dataclass
class MetricReport:
    per_task: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    per_type: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    config_digest: str = ""

    def to_dict(self, include_timings=True):
        data = asdict(self)
        if not include_timings:
            for row in data["per_task"]:
                row.pop("time", None)
            data["aggregate"].pop("time", None)
            for row in data["per_type"].values():
                row.pop("time", None)
        return data

    def to_json(self, include_timings=True):
        return json.dumps(self.to_dict(include_timings), sort_keys=True, indent=1)

    def to_markdown(self, title="Results"):
        cols = ("alignment", "preservation", "perceptual", "time")
        lines = [f"### {title}", "", "| group | n | " + " | ".join(cols) + " |",
                 "|---|---|" + "---|" * len(cols)]
        rows = [("all", self.aggregate)] + sorted(self.per_type.items())
        for name, row in rows:
            vals = " | ".join(f"{row[c]:.4f}" if c in row else "-" for c in cols)
            lines.append(f"| {name} | {row.get('n', 0)} | {vals} |")
        return "\n".join(lines) + "\n"


def _summarize(rows):
    keys = ("alignment", "preservation", "perceptual", "time")
    out = {"n": len(rows)}
    for k in keys:
        vals = [r[k] for r in rows if k in r]
        if vals:
            out[k] = float(np.mean(vals))
    return out


def config_digest(cfg_dict) -> str:
    return hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()[:16]


def score_task(task: EditTask, cfg, masknet=None, noise_level=None, keep_result=False):
    from .editor import edit_task

    t0 = time.perf_counter()
    result = edit_task(task, cfg, masknet, noise_level=noise_level)
    elapsed = time.perf_counter() - t0
    row = {
        "task_id": task.id,
        "task_type": task.task_type,
        "alignment": alignment_score(result, task),
        "preservation": preservation_score(result, task),
        "perceptual": perceptual_distance(result.x_out, task.input.image),
        "time": elapsed,
    }
    return (row, result) if keep_result else (row, None)


def _score_safe(args):
    task, cfg, masknet = args
    try:
        return score_task(task, cfg, masknet)[0]
    except Exception as exc:  # recorded, run continues
        return {"task_id": task.id, "task_type": task.task_type, "error": f"{type(exc).__name__}: {exc}"}


def run_benchmark(tasks, cfg, masknet=None, jobs=1) -> MetricReport:
    if not tasks:
        raise ParameterError("no tasks to run")
    work = [(t, cfg, masknet) for t in tasks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_score_safe, work))
    else:
        rows = [_score_safe(w) for w in work]
    rows.sort(key=lambda r: r["task_id"])
    ok = [r for r in rows if "error" not in r]
    report = MetricReport(
        per_task=ok,
        failures=[r for r in rows if "error" in r],
        config=cfg.to_dict(),
        config_digest=config_digest(cfg.to_dict()),
    )
    report.aggregate = _summarize(ok)
    types = sorted({r["task_type"] for r in ok})
    report.per_type = {t: _summarize([r for r in ok if r["task_type"] == t]) for t in types}
    return report


ABLATION_VARIANTS = {
    "full": {"mask_source": "masknet", "attention_processor": True},
    "no_ap": {"mask_source": "masknet", "attention_processor": False},
    "no_masknet": {"mask_source": "attention_threshold", "attention_processor": True},
    "baseline": {"mask_source": "attention_threshold", "attention_processor": False},
}


def ablation_configs(cfg):
    return {name: replace(cfg, **over) for name, over in ABLATION_VARIANTS.items()}


def run_ablation(tasks, cfg, masknet=None, jobs=1) -> dict:
    """MaskNet on/off x Attention Processor on/off on the same tasks and seeds."""
    return {name: run_benchmark(tasks, vcfg, masknet, jobs) for name, vcfg in ablation_configs(cfg).items()}


@dataclass
class AttentionStats:
    success: np.ndarray
    failure: np.ndarray
    n_success: int
    n_failure: int

    @property
    def success_empty(self):
        return self.n_success == 0

    @property
    def failure_empty(self):
        return self.n_failure == 0

    def __iter__(self):
        return iter((self.success, self.failure))


def attention_stats(results, partition) -> AttentionStats:
    """Mean attention maps of successful and failed edits.

    ``partition`` is a sequence of booleans aligned with ``results`` or a
    callable ``result -> bool``. An empty side yields a zero map with count 0.
    """
    results = list(results)
    if not results:
        raise ParameterError("no results")
    flags = [bool(partition(r)) for r in results] if callable(partition) else [bool(f) for f in partition]
    if len(flags) != len(results):
        raise ParameterError("partition length does not match results")
    maps = [np.asarray(getattr(r, "attention", r), dtype=np.float64) for r in results]
    shape = maps[0].shape

    def mean(sel):
        chosen = [m for m, f in zip(maps, flags) if f == sel]
        return (np.mean(np.stack(chosen), axis=0) if chosen else np.zeros(shape)), len(chosen)

    (succ, ns), (fail, nf) = mean(True), mean(False)
    return AttentionStats(succ, fail, ns, nf)


def write_report(report: MetricReport, out_dir, name="report", title=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(report.to_json() + "\n")
    (out / f"{name}.md").write_text(report.to_markdown(title or name))


def contact_sheet(rows, path, scale=4):
    """Save a PNG grid; each row is a list of (3, H, W) images in [-1, 1] or (H, W) masks in [0, 1]."""
    from PIL import Image

    tiles = []
    for row in rows:
        imgs = []
        for img in row:
            img = np.asarray(img, dtype=np.float64)
            if img.ndim == 2:
                img = np.repeat(img[None] * 2.0 - 1.0, 3, axis=0)
            imgs.append(np.repeat(np.repeat(img, scale, axis=1), scale, axis=2))
        tiles.append(np.concatenate(imgs, axis=2))
    grid = np.concatenate(tiles, axis=1)
    u8 = np.round((np.clip(grid, -1, 1) + 1) * 127.5).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, mode="RGB").save(path)
