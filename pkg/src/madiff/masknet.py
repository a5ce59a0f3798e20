"""MaskNet: a small UNet predicting the editing region.

Input is the foreground plus a one-hot densepose map; hidden layers use SiLU; the mask-prompt
embedding enters through a single-head spatial attention layer in the
middle block, whose keys and values are ``slots`` vectors projected from
the prompt embedding.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import FormatError, ParameterError, TrainingError
from .seeding import rng_for


@dataclass
class MaskInput:
    foreground: np.ndarray  # (H, W) in {0, 1}
    densepose: np.ndarray  # (H, W, P) one-hot
    prompt_embedding: np.ndarray  # (D,)


@dataclass(frozen=True)
class MaskNetConfig:
    resolution: int = 16
    parts: int = 6
    embed_dim: int = 32
    c1: int = 8
    c2: int = 16
    attn_dim: int = 8
    slots: int = 2
    linear: bool = False  # identity activations, no attention, no sigmoid

    @property
    def in_channels(self):
        return 1 + self.parts


@dataclass
class MaskNetModel:
    config: MaskNetConfig
    params: dict
    seed: int = 0

    @property
    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def copy(self):
        return MaskNetModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)


def init_masknet(config: MaskNetConfig = MaskNetConfig(), seed=0) -> MaskNetModel:
    if config.resolution % 4:
        raise ParameterError("resolution must be divisible by 4")
    rng = rng_for(seed, "masknet-init")
    c0, c1, c2, d, D, M = config.in_channels, config.c1, config.c2, config.attn_dim, config.embed_dim, config.slots
    p = {
        "enc1.w": nn.uniform_init(rng, (c1, c0, 3, 3), c0 * 9),
        "enc1.b": nn.uniform_init(rng, c1, c0 * 9),
        "enc2.w": nn.uniform_init(rng, (c2, c1, 3, 3), c1 * 9),
        "enc2.b": nn.uniform_init(rng, c2, c1 * 9),
        "dec2.w": nn.uniform_init(rng, (c2, 2 * c2, 3, 3), 2 * c2 * 9),
        "dec2.b": nn.uniform_init(rng, c2, 2 * c2 * 9),
        "dec1.w": nn.uniform_init(rng, (c1, c2 + c1, 3, 3), (c2 + c1) * 9),
        "dec1.b": nn.uniform_init(rng, c1, (c2 + c1) * 9),
        "head.w": nn.uniform_init(rng, (1, c1, 1, 1), c1),
        "head.b": np.zeros(1),
    }
    if not config.linear:
        p.update(
            {
                "attn.q": nn.uniform_init(rng, (c2, d), c2),
                "attn.k": nn.uniform_init(rng, (D, M * d), D),
                "attn.v": nn.uniform_init(rng, (D, M * d), D),
                "attn.o": nn.uniform_init(rng, (d, c2), d),
                "attn.ob": np.zeros(c2),
            }
        )
    return MaskNetModel(config, p, seed)


def stack_inputs(inputs, config: MaskNetConfig):
    """Batch a list of MaskInput into ``(x, e)`` arrays."""
    H = config.resolution
    x = np.empty((len(inputs), config.in_channels, H, H))
    e = np.empty((len(inputs), config.embed_dim))
    for i, inp in enumerate(inputs):
        fg = np.asarray(inp.foreground, dtype=np.float64)
        dp = np.asarray(inp.densepose, dtype=np.float64)
        emb = np.asarray(inp.prompt_embedding, dtype=np.float64)
        if fg.shape != (H, H) or dp.shape != (H, H, config.parts) or emb.shape != (config.embed_dim,):
            raise ParameterError(
                f"input shapes {fg.shape}, {dp.shape}, {emb.shape} do not match the model config"
            )
        x[i, 0] = fg
        x[i, 1:] = dp.transpose(2, 0, 1)
        e[i] = emb
    return x, e


def forward(model: MaskNetModel, x, e):
    """Return ``(mask (N, H, W), cache)``."""
    p, cfg = model.params, model.config
    act = (lambda z: z) if cfg.linear else nn.silu
    z1 = nn.conv(x, p["enc1.w"], p["enc1.b"])
    e1 = act(z1)
    p1 = nn.avgpool2(e1)
    z2 = nn.conv(p1, p["enc2.w"], p["enc2.b"])
    e2 = act(z2)
    p2 = nn.avgpool2(e2)
    n, c2, h4, w4 = p2.shape
    attn = None
    if cfg.linear:
        mid = p2
    else:
        tok = p2.reshape(n, c2, h4 * w4).transpose(0, 2, 1)  # (N, L, c2)
        d, M = cfg.attn_dim, cfg.slots
        q = tok @ p["attn.q"]  # (N, L, d)
        k = (e @ p["attn.k"]).reshape(n, M, d)
        v = (e @ p["attn.v"]).reshape(n, M, d)
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(d)  # (N, L, M)
        prob = nn.softmax(scores, axis=-1)
        ctx = prob @ v  # (N, L, d)
        out_tok = tok + ctx @ p["attn.o"] + p["attn.ob"]
        mid = out_tok.transpose(0, 2, 1).reshape(n, c2, h4, w4)
        attn = (tok, q, k, v, prob, ctx)
    u2 = np.concatenate([nn.upsample2(mid), e2], axis=1)
    z3 = nn.conv(u2, p["dec2.w"], p["dec2.b"])
    d2 = act(z3)
    u1 = np.concatenate([nn.upsample2(d2), e1], axis=1)
    z4 = nn.conv(u1, p["dec1.w"], p["dec1.b"])
    d1 = act(z4)
    logits = nn.conv(d1, p["head.w"], p["head.b"])[:, 0]
    out = logits if cfg.linear else nn.sigmoid(logits)
    cache = dict(x=x, e=e, z1=z1, e1=e1, p1=p1, z2=z2, e2=e2, attn=attn, u2=u2, z3=z3, d2=d2,
                 u1=u1, z4=z4, d1=d1, out=out)
    return out, cache


def backward(model: MaskNetModel, cache, g_out):
    """Parameter gradients given ``dL/d(mask)``."""
    p, cfg = model.params, model.config
    c1, c2 = cfg.c1, cfg.c2
    grads = {}

    def act_grad(z, g):
        return g if cfg.linear else nn.silu_grad(z, g)

    out = cache["out"]
    g_logits = g_out if cfg.linear else g_out * out * (1.0 - out)
    g_logits = g_logits[:, None]
    g_d1, grads["head.w"], grads["head.b"] = nn.conv_grad(cache["d1"], p["head.w"], g_logits)
    g_z4 = act_grad(cache["z4"], g_d1)
    g_u1, grads["dec1.w"], grads["dec1.b"] = nn.conv_grad(cache["u1"], p["dec1.w"], g_z4)
    g_d2 = nn.upsample2_grad(g_u1[:, :c2])
    g_e1 = g_u1[:, c2:].copy()
    g_z3 = act_grad(cache["z3"], g_d2)
    g_u2, grads["dec2.w"], grads["dec2.b"] = nn.conv_grad(cache["u2"], p["dec2.w"], g_z3)
    g_mid = nn.upsample2_grad(g_u2[:, :c2])
    g_e2 = g_u2[:, c2:].copy()
    n, _, h4, w4 = g_mid.shape
    if cfg.linear:
        g_p2 = g_mid
    else:
        tok, q, k, v, prob, ctx = cache["attn"]
        e = cache["e"]
        d, M = cfg.attn_dim, cfg.slots
        g_out_tok = g_mid.reshape(n, c2, h4 * w4).transpose(0, 2, 1)
        grads["attn.ob"] = g_out_tok.sum(axis=(0, 1))
        grads["attn.o"] = np.einsum("nld,nlc->dc", ctx, g_out_tok)
        g_ctx = g_out_tok @ p["attn.o"].T
        g_prob = g_ctx @ v.transpose(0, 2, 1)
        g_v = prob.transpose(0, 2, 1) @ g_ctx  # (N, M, d)
        g_scores = nn.softmax_grad(prob, g_prob) / math.sqrt(d)
        g_q = g_scores @ k
        g_k = g_scores.transpose(0, 2, 1) @ q
        grads["attn.q"] = np.einsum("nlc,nld->cd", tok, g_q)
        grads["attn.k"] = e.T @ g_k.reshape(n, M * d)
        grads["attn.v"] = e.T @ g_v.reshape(n, M * d)
        g_tok = g_out_tok + g_q @ p["attn.q"].T
        g_p2 = g_tok.transpose(0, 2, 1).reshape(n, c2, h4, w4)
    g_e2 = g_e2 + nn.avgpool2_grad(g_p2)
    g_z2 = act_grad(cache["z2"], g_e2)
    g_p1, grads["enc2.w"], grads["enc2.b"] = nn.conv_grad(cache["p1"], p["enc2.w"], g_z2)
    g_e1 = g_e1 + nn.avgpool2_grad(g_p1)
    g_z1 = act_grad(cache["z1"], g_e1)
    _, grads["enc1.w"], grads["enc1.b"] = nn.conv_grad(cache["x"], p["enc1.w"], g_z1)
    return grads


def predict_mask(model: MaskNetModel, inp: MaskInput) -> np.ndarray:
    x, e = stack_inputs([inp], model.config)
    out, _ = forward(model, x, e)
    return out[0]


def predict_masks(model: MaskNetModel, inputs) -> np.ndarray:
    x, e = stack_inputs(inputs, model.config)
    return forward(model, x, e)[0]


def masknet_loss(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ParameterError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def binarize(mask, threshold=0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ParameterError("threshold must lie in (0, 1)")
    return (np.asarray(mask) >= threshold).astype(np.float64)


def iou(a, b) -> float:
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def loss_and_grads(model, x, e, truth):
    out, cache = forward(model, x, e)
    diff = out - truth
    loss = float(np.mean(diff**2))
    grads = backward(model, cache, 2.0 * diff / diff.size)
    return loss, grads


@dataclass
class TrainingReport:
    loss_curve: list = field(default_factory=list)
    epoch_train_loss: list = field(default_factory=list)
    val_iou: list = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan
    best_epoch: int = -1
    best_val_iou: float = math.nan
    steps: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _dataset_loss(model, x, e, y, chunk=256):
    total = 0.0
    for i in range(0, len(x), chunk):
        out, _ = forward(model, x[i : i + chunk], e[i : i + chunk])
        total += float(np.sum((out - y[i : i + chunk]) ** 2))
    return total / y.size


def _dataset_iou(model, x, e, y, threshold, chunk=256):
    scores = []
    for i in range(0, len(x), chunk):
        out, _ = forward(model, x[i : i + chunk], e[i : i + chunk])
        scores += [iou(binarize(o, threshold), t) for o, t in zip(out, y[i : i + chunk])]
    return float(np.mean(scores)) if scores else math.nan


def train_masknet(train, val, hyper: nn.TrainConfig, config: MaskNetConfig = MaskNetConfig(),
                  threshold=0.5, init: MaskNetModel | None = None):
    """Minimise :func:`masknet_loss` by mini-batch gradient descent.

    ``train`` and ``val`` are lists of ``(MaskInput, target_mask)`` (extra
    tuple members are ignored). Returns the checkpoint with the best
    validation IoU (the final one when ``val`` is empty) and a report.
    """
    if not train:
        raise ParameterError("training set is empty")
    model = init.copy() if init is not None else init_masknet(config, hyper.seed)
    config = model.config
    x, e = stack_inputs([t[0] for t in train], config)
    y = np.stack([np.asarray(t[1], dtype=np.float64) for t in train])
    if val:
        xv, ev = stack_inputs([t[0] for t in val], config)
        yv = np.stack([np.asarray(t[1], dtype=np.float64) for t in val])
    opt = nn.make_optimizer(hyper.optimizer, hyper.lr)
    rng = rng_for(hyper.seed, "masknet-batches")
    report = TrainingReport(config={"train": hyper.to_dict(), "model": asdict(config), "threshold": threshold})
    report.initial_loss = _dataset_loss(model, x, e, y)
    best = model.copy()
    best_score = -math.inf
    last_good = model.copy()
    steps = 0
    for epoch in range(hyper.epochs):
        if hyper.max_steps is not None and steps >= hyper.max_steps:
            break
        order = rng.permutation(len(x))
        for start in range(0, len(x), hyper.batch_size):
            if hyper.max_steps is not None and steps >= hyper.max_steps:
                break
            idx = order[start : start + hyper.batch_size]
            loss, grads = loss_and_grads(model, x[idx], e[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at step {steps}", last_good=last_good,
                    diagnostics={"epoch": epoch, "step": steps},
                )
            last_good = model.copy()
            opt.step(model.params, grads)
            report.loss_curve.append(loss)
            steps += 1
        report.epoch_train_loss.append(_dataset_loss(model, x, e, y))
        if val:
            score = _dataset_iou(model, xv, ev, yv, threshold)
            report.val_iou.append(score)
            if score > best_score:
                best_score, best, report.best_epoch = score, model.copy(), epoch
    if not val or report.best_epoch < 0:
        best = model.copy()
        report.best_epoch = len(report.epoch_train_loss) - 1
    report.best_val_iou = best_score if val and best_score > -math.inf else math.nan
    report.steps = steps
    report.final_loss = _dataset_loss(best, x, e, y)
    return best, report


def gradient_check(model: MaskNetModel, inp, truth, h=1e-5, n_params=40, seed=0, atol=1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``inp`` is a MaskInput or a list of them; ``truth`` matches the output.
    Entries are drawn at random from every parameter tensor. The error is
    ``|num - ana| / max(|num|, |ana|, atol)``; ``atol`` keeps round-off on
    near-zero gradients from dominating.
    """
    inputs = inp if isinstance(inp, (list, tuple)) else [inp]
    x, e = stack_inputs(inputs, model.config)
    y = np.asarray(truth, dtype=np.float64).reshape((len(inputs),) + x.shape[2:])
    _, grads = loss_and_grads(model, x, e, y)
    rng = rng_for(seed, "gradient-check")
    names = sorted(model.params)
    worst = 0.0
    for i in range(n_params):
        name = names[i % len(names)]
        arr = model.params[name]
        flat = int(rng.integers(arr.size))
        idx = np.unravel_index(flat, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        out_p = forward(model, x, e)[0]
        arr[idx] = orig - h
        out_m = forward(model, x, e)[0]
        arr[idx] = orig
        # (L+ - L-) regrouped per pixel to avoid cancelling two nearly equal sums
        num = float(np.mean((out_p - out_m) * (out_p + out_m - 2.0 * y))) / (2 * h)
        ana = grads[name][idx]
        denom = max(abs(num), abs(ana), atol)
        worst = max(worst, abs(num - ana) / denom)
    return worst


# checkpoint format -----------------------------------------------------------
# b"MADIFFCK" | u32 version | u64 header length | JSON header | float64 LE params

_MAGIC = b"MADIFFCK"
_VERSION = 1


def save_checkpoint(model: MaskNetModel, path, train_config=None):
    names = sorted(model.params)
    header = {
        "architecture": asdict(model.config),
        "seed": model.seed,
        "train_config": train_config,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in names)
    Path(path).write_bytes(_MAGIC + struct.pack("<IQ", _VERSION, len(hbytes)) + hbytes + body)


def load_checkpoint(path) -> MaskNetModel:
    data = Path(path).read_bytes()
    prefix = len(_MAGIC) + 12
    if len(data) < prefix or data[: len(_MAGIC)] != _MAGIC:
        raise FormatError(f"{path}: not a MaskNet checkpoint")
    version, hlen = struct.unpack("<IQ", data[len(_MAGIC) : prefix])
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[prefix : prefix + hlen].decode("utf-8"))
        config = MaskNetConfig(**header["architecture"])
        entries = header["params"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    offset = prefix + hlen
    params = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated parameter block")
        params[entry["name"]] = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes after parameter block")
    expected = init_masknet(config, 0).params
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in params):
        raise FormatError(f"{path}: parameters do not match the declared architecture")
    return MaskNetModel(config, params, int(header.get("seed", 0)))
