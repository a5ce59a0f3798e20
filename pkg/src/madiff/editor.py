"""End-to-end editing: inversion, conditioned sampling with attention
collection, mask prediction, attention processing and blended denoising."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import __version__, kernels
from .attention import SyntheticAttention, attention_process, average_attention, resize_attention
from .datagen import PALETTE, EditTask, GarmentSpec, caption, render, prototype_id
from .denoiser import GaussianMixtureModel, GaussianMixturePredictor
from .diffusion import NoiseSchedule, Trajectory, build_schedule, invert, sample, sample_step
from .errors import ParameterError, StageError, StateError
from .masknet import MaskInput, MaskNetModel, binarize, predict_mask
from .prompt import EmbeddingTable, LlmClient, PromptText, embed_prompt, extract_mask_prompt, load_vocabulary
from .seeding import derive_seed

MASK_SOURCES = ("masknet", "foreground", "attention_threshold")


@dataclass
class EditConfig:
    T: int = 1000
    S: int = 20  # inversion depth in effective steps
    stride: int = 20
    beta_min: float = 1e-4
    beta_max: float = 0.02
    seed: int = 0
    noise_level: float = 0.1
    mask_source: str = "masknet"
    threshold: float = 0.5
    attention_processor: bool = True
    sigma0: float = 0.05
    conditioning_strength: float = 0.9
    dtype: str = "float64"

    def __post_init__(self):
        if self.mask_source not in MASK_SOURCES:
            raise ParameterError(f"mask_source must be one of {MASK_SOURCES}")
        if self.T % self.stride:
            raise ParameterError("stride must divide T")
        if not 0 < self.S <= self.T // self.stride:
            raise ParameterError(f"S must lie in (0, {self.T // self.stride}]")
        if self.dtype not in ("float64", "float32"):
            raise ParameterError("dtype must be float64 or float32")

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_min, self.beta_max, stride=self.stride, depth=self.S)

    def to_dict(self):
        return asdict(self)


@dataclass
class EditDeps:
    """Assembled collaborators for :func:`edit`.

    ``mask_input`` supplies foreground and densepose for the input image
    (the stand-ins for human parsing and DensePose).
    """

    predictor: object
    provider: object | None = None
    mask_input: MaskInput | None = None
    masknet: MaskNetModel | None = None
    table: EmbeddingTable = field(default_factory=EmbeddingTable)
    vocab: frozenset = field(default_factory=load_vocabulary)
    llm_client: LlmClient | None = None
    encode: Callable = lambda x: np.array(x, dtype=np.float64, copy=True)
    decode: Callable = lambda x: np.array(x, dtype=np.float64, copy=True)


@dataclass
class EditResult:
    x_out: np.ndarray
    mask: np.ndarray  # binarized m
    soft_mask: np.ndarray
    attention: np.ndarray
    x_S: np.ndarray
    x_S_no: np.ndarray
    x_S_re: np.ndarray
    trajectory: Trajectory
    provenance: dict
    timings: dict = field(default_factory=dict)


def blend_step(x_t_re, k, m, trajectory: Trajectory, c, predictor, schedule: NoiseSchedule):
    """One blended DDIM step: edited branch inside ``m``, stored trajectory outside."""
    if not 1 <= k <= len(trajectory):
        raise StateError(f"trajectory has no state for step {k - 1}")
    x_prev = trajectory.states[k - 1]
    m = np.asarray(m, dtype=np.float64)
    return sample_step(x_t_re, k, c, predictor, schedule) * m + x_prev * (1.0 - m)


class _Stage:
    def __init__(self, name, timings):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def edit(x_org, target_prompt, cfg: EditConfig, deps: EditDeps, mask=None) -> EditResult:
    """Run the full editing pipeline.

    ``mask`` overrides the configured mask source (used for forced-mask
    checks); it is taken as already binarized.
    """
    timings: dict = {}
    schedule = cfg.schedule()
    dtype = np.dtype(cfg.dtype)
    prompt = target_prompt if isinstance(target_prompt, PromptText) else PromptText(str(target_prompt))
    c = embed_prompt(prompt, deps.table)
    K, S = schedule.num_steps, schedule.depth

    with _Stage("encode", timings):
        x0 = np.asarray(deps.encode(x_org), dtype=dtype)
        H, W = x0.shape[1:]
    with _Stage("invert", timings):
        traj = invert(x0, deps.predictor, schedule)
    with _Stage("sample", timings):
        rng = np.random.default_rng(derive_seed(cfg.seed, "x_T"))
        x_T_no = rng.standard_normal(x0.shape).astype(dtype)
        x_S_no, maps = sample(x_T_no, K, S, c, deps.predictor, deps.provider, schedule)
        A = average_attention(maps) if maps else np.zeros((H, W))
        A_full = resize_attention(A, H, W) if A.shape != (H, W) else A
    with _Stage("mask", timings):
        if mask is not None:
            soft = np.asarray(mask, dtype=np.float64)
            m = soft
            source = "given"
        else:
            source = cfg.mask_source
            soft, m = _make_mask(cfg, deps, prompt, A_full)
        if m.shape != (H, W):
            raise ParameterError(f"mask {m.shape} does not match image {H}x{W}")
    with _Stage("attention_processor", timings):
        if cfg.attention_processor:
            x_S_re = attention_process(traj.final, x_S_no, A_full, m, seed=derive_seed(cfg.seed, "ap"))
        else:
            x_S_re = np.array(traj.final, copy=True)
    with _Stage("blend", timings):
        x = x_S_re
        for k in range(S, 0, -1):
            x = blend_step(x, k, m, traj, c, deps.predictor, schedule)
    with _Stage("decode", timings):
        x_out = deps.decode(x)

    provenance = {
        "config": cfg.to_dict(),
        "mask_source": source,
        "variant": variant_name(cfg, source),
        "target_prompt": prompt.raw,
        "seeds": {"root": cfg.seed, "x_T": derive_seed(cfg.seed, "x_T"), "ap": derive_seed(cfg.seed, "ap")},
        "counts": {"blend_steps": S, "attention_maps": len(maps), "inversion_steps": len(traj)},
        "versions": {"madiff": __version__, "numpy": np.__version__, "kernels": kernels.BACKEND},
    }
    return EditResult(x_out, m, soft, A_full, traj.final, x_S_no, x_S_re, traj, provenance, timings)


def variant_name(cfg: EditConfig, source=None) -> str:
    source = source or cfg.mask_source
    return f"mask={source},ap={'on' if cfg.attention_processor else 'off'}"


def _make_mask(cfg, deps, prompt, A):
    if cfg.mask_source == "attention_threshold":
        m = (A > np.median(A)).astype(np.float64)
        return A, m
    if deps.mask_input is None:
        raise StateError(f"mask source '{cfg.mask_source}' needs foreground/densepose inputs")
    if cfg.mask_source == "foreground":
        fg = np.asarray(deps.mask_input.foreground, dtype=np.float64)
        return fg, binarize(fg, cfg.threshold)
    if deps.masknet is None:
        raise StateError("mask source 'masknet' needs a trained model")
    mp = extract_mask_prompt(prompt, deps.vocab, deps.llm_client)
    inp = MaskInput(deps.mask_input.foreground, deps.mask_input.densepose, embed_prompt(mp, deps.table).vector)
    soft = predict_mask(deps.masknet, inp)
    return soft, binarize(soft, cfg.threshold)


# per-task assembly ---------------------------------------------------------------

def prototype_bank(task: EditTask):
    """Source and target garments rendered in every palette colour."""
    from dataclasses import replace

    seed = task.input.body_seed
    specs = []
    for base in (task.source_spec, task.target_spec):
        for color in PALETTE:
            spec = replace(base, color=color)
            if spec not in specs:
                specs.append(spec)
    for spec in (task.target_spec, task.source_spec):
        if spec not in specs:
            specs.append(spec)
    return specs, seed


def task_mixture(task: EditTask, sigma0=0.05, strength=0.9) -> GaussianMixtureModel:
    """Prototype mixture with prompt-conditioned weights.

    Conditioning on a caption puts ``strength`` of the mass on components
    with that caption and spreads the rest over the others, so text guidance
    is deliberately imperfect.
    """
    specs, seed = prototype_bank(task)
    means = np.stack([render(s, seed).image for s in specs])
    k = len(specs)
    captions = [caption(s) for s in specs]
    class_weights = {}
    for key in dict.fromkeys(captions):
        hit = np.array([cap == key for cap in captions], dtype=np.float64)
        miss = 1.0 - hit
        w = strength * hit / hit.sum()
        if miss.sum() > 0:
            w = w + (1.0 - strength) * miss / miss.sum()
        else:
            w = hit / hit.sum()
        class_weights[" ".join(key.split())] = w.tolist()
    return GaussianMixtureModel(
        weights=np.full(k, 1.0 / k),
        means=means,
        sigma0=sigma0,
        classes={" ".join(cap.split()): [i] for i, cap in enumerate(captions)},
        class_weights=class_weights,
        prototype_ids=[prototype_id(s, seed) for s in specs],
    )


def build_task_deps(task: EditTask, cfg: EditConfig, masknet: MaskNetModel | None = None,
                    table: EmbeddingTable | None = None, vocab=None, llm_client=None,
                    noise_level=None) -> EditDeps:
    gmm = task_mixture(task, cfg.sigma0, cfg.conditioning_strength)
    predictor = GaussianMixturePredictor(gmm, cfg.schedule())
    level = cfg.noise_level if noise_level is None else noise_level
    provider = SyntheticAttention(task.region, level, seed=derive_seed(cfg.seed, "attention", task.id))
    s = task.input
    return EditDeps(
        predictor=predictor,
        provider=provider,
        mask_input=MaskInput(s.foreground, s.densepose, np.zeros((table or EmbeddingTable()).dim)),
        masknet=masknet,
        table=table or EmbeddingTable(),
        vocab=vocab or load_vocabulary(),
        llm_client=llm_client,
    )


def edit_task(task: EditTask, cfg: EditConfig, masknet=None, **kw) -> EditResult:
    deps = build_task_deps(task, cfg, masknet, **kw)
    result = edit(task.input.image, task.target_prompt, cfg, deps)
    result.provenance["task_id"] = task.id
    return result
