"""Noise predictors: the exact Gaussian-mixture oracle and a tiny conv net."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import nn
from .diffusion import NoiseSchedule
from .errors import ConfigurationError, ParameterError, TrainingError
from .seeding import rng_for


def class_key(c) -> str | None:
    """Conditioning key for ``c`` (a PromptEmbedding, PromptText, token list or string)."""
    if c is None:
        return None
    key = getattr(c, "key", None)
    if key is not None:
        return key
    tokens = getattr(c, "tokens", None)
    if tokens is not None:
        return " ".join(tokens)
    if isinstance(c, str):
        from .prompt import tokenize

        return " ".join(tokenize(c))
    return " ".join(c)


@dataclass
class GaussianMixtureModel:
    """Isotropic mixture ``sum_k w_k N(mu_k, sigma0^2 I)`` over image-shaped vectors.

    ``classes`` maps a conditioning key to component indices; optional
    ``class_weights`` gives explicit per-class weights over all components.
    """

    weights: np.ndarray
    means: np.ndarray
    sigma0: float = 0.05
    classes: dict = field(default_factory=dict)
    class_weights: dict = field(default_factory=dict)
    prototype_ids: list | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.weights.ndim != 1 or self.means.shape[0] != self.weights.size:
            raise ParameterError("one weight per mean required")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ParameterError("weights must be positive and sum to 1")
        if self.sigma0 <= 0:
            raise ParameterError("sigma0 must be positive")

    @property
    def shape(self):
        return self.means.shape[1:]

    def conditioned_weights(self, c=None) -> np.ndarray:
        key = class_key(c)
        if key is None:
            return self.weights
        if key in self.class_weights:
            w = np.asarray(self.class_weights[key], dtype=np.float64)
            if w.shape != self.weights.shape or np.any(w < 0) or w.sum() <= 0:
                raise ConfigurationError(f"bad class weights for {key!r}")
            return w / w.sum()
        if key not in self.classes:
            raise ConfigurationError(f"unknown conditioning class {key!r}")
        idx = list(self.classes[key])
        if not idx:
            raise ConfigurationError(f"class {key!r} has no components")
        w = np.zeros_like(self.weights)
        w[idx] = self.weights[idx]
        return w / w.sum()

    def to_json(self) -> str:
        if self.prototype_ids is None:
            raise ParameterError("prototype ids are required for serialization")
        return json.dumps(
            {
                "weights": self.weights.tolist(),
                "prototypes": list(self.prototype_ids),
                "sigma0": self.sigma0,
                "classes": {k: list(map(int, v)) for k, v in self.classes.items()},
                "class_weights": {k: list(map(float, v)) for k, v in self.class_weights.items()},
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str, resolve=None) -> "GaussianMixtureModel":
        """Rebuild from JSON; ``resolve`` maps a prototype id to its mean image."""
        if resolve is None:
            from .datagen import render_prototype as resolve
        data = json.loads(text)
        means = np.stack([resolve(pid) for pid in data["prototypes"]])
        return cls(
            weights=np.asarray(data["weights"]),
            means=means,
            sigma0=float(data["sigma0"]),
            classes={k: list(v) for k, v in data.get("classes", {}).items()},
            class_weights={k: list(v) for k, v in data.get("class_weights", {}).items()},
            prototype_ids=list(data["prototypes"]),
        )


def log_density(gmm: GaussianMixtureModel, x_t, alpha_bar_t: float, c=None) -> float:
    """``log p_t(x_t)`` for the diffused mixture at level ``alpha_bar_t``."""
    w = gmm.conditioned_weights(c)
    var = alpha_bar_t * gmm.sigma0**2 + (1.0 - alpha_bar_t)
    diff = x_t.reshape(1, -1) - np.sqrt(alpha_bar_t) * gmm.means.reshape(len(w), -1)
    d = diff.shape[1]
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    ll = logw - 0.5 * (diff**2).sum(axis=1) / var - 0.5 * d * np.log(2 * np.pi * var)
    return float(logsumexp(ll))


def analytic_eps(gmm: GaussianMixtureModel, x_t, t: int, c, schedule: NoiseSchedule):
    """Exact posterior-mean noise ``E[eps | x_t]`` under the (conditioned) mixture.

    Equals ``-sqrt(1 - ab) * grad log p_t(x_t)``.
    """
    ab = float(schedule.alpha_bar[t])
    w = gmm.conditioned_weights(c)
    keep = w > 0
    means = gmm.means[keep].reshape(int(keep.sum()), -1)
    var = ab * gmm.sigma0**2 + (1.0 - ab)
    x = np.asarray(x_t, dtype=np.float64).reshape(-1)
    diff = x[None, :] - np.sqrt(ab) * means
    logits = np.log(w[keep]) - 0.5 * np.einsum("kd,kd->k", diff, diff) / var
    resp = np.exp(logits - logsumexp(logits))
    eps = np.sqrt(1.0 - ab) / var * (resp @ diff)
    return eps.reshape(np.shape(x_t))


class GaussianMixturePredictor:
    """NoisePredictor backed by :func:`analytic_eps`."""

    def __init__(self, gmm: GaussianMixtureModel, schedule: NoiseSchedule):
        self.gmm = gmm
        self.schedule = schedule

    def predict(self, x_t, t, c=None):
        return analytic_eps(self.gmm, x_t, t, c, self.schedule)


class ConstantPredictor:
    """Always returns the same noise map (used in algebraic checks)."""

    def __init__(self, eps):
        self.eps = np.asarray(eps, dtype=np.float64)

    def predict(self, x_t, t, c=None):
        return np.broadcast_to(self.eps, np.shape(x_t)).copy()


class TinyDenoiser:
    """Three 3x3 conv layers. Inputs are the image plus a noise-level channel;
    the prompt vector enters as a learned bias on the first layer.

    The network outputs a clean-image estimate; :meth:`predict` converts it
    to the noise estimate, which keeps small-noise levels well conditioned.
    """

    def __init__(self, params: dict, schedule: NoiseSchedule, channels: int, embed_dim: int):
        self.params = params
        self.schedule = schedule
        self.channels = channels
        self.embed_dim = embed_dim

    @classmethod
    def init(cls, schedule, channels=3, hidden=16, embed_dim=32, seed=0, size=16):
        rng = rng_for(seed, "tiny-denoiser")
        cin = channels + 1
        p = {
            "w1": nn.uniform_init(rng, (hidden, cin, 3, 3), cin * 9),
            "b1": np.zeros(hidden),
            "wc": np.zeros((embed_dim, hidden)),
            "w2": nn.uniform_init(rng, (hidden, hidden, 3, 3), hidden * 9),
            "b2": np.zeros(hidden),
            "w3": nn.uniform_init(rng, (channels, hidden, 3, 3), hidden * 9),
            "b3": np.zeros(channels),
            "bias_map": np.zeros((channels, size, size)),  # learned mean image
        }
        return cls(p, schedule, channels, embed_dim)

    def _cvec(self, c, n):
        vec = getattr(c, "vector", None)
        if vec is None:
            return np.zeros((n, self.embed_dim))
        return np.broadcast_to(np.asarray(vec, dtype=np.float64), (n, self.embed_dim))

    def _forward(self, x, level, cvec):
        p = self.params
        n, _, h, w = x.shape
        inp = np.concatenate([x, np.broadcast_to(level[:, None, None, None], (n, 1, h, w))], axis=1)
        z1 = nn.conv(inp, p["w1"], p["b1"]) + (cvec @ p["wc"])[:, :, None, None]
        a1 = nn.relu(z1)
        z2 = nn.conv(a1, p["w2"], p["b2"])
        a2 = nn.relu(z2)
        out = nn.conv(a2, p["w3"], p["b3"]) + p["bias_map"]
        return out, (inp, z1, a1, z2, a2, cvec)

    def _backward(self, cache, g):
        p = self.params
        inp, z1, a1, z2, a2, cvec = cache
        ga2, gw3, gb3 = nn.conv_grad(a2, p["w3"], g)
        gz2 = nn.relu_grad(z2, ga2)
        ga1, gw2, gb2 = nn.conv_grad(a1, p["w2"], gz2)
        gz1 = nn.relu_grad(z1, ga1)
        _, gw1, gb1 = nn.conv_grad(inp, p["w1"], gz1)
        gwc = cvec.T @ gz1.sum(axis=(2, 3))
        return {"w1": gw1, "b1": gb1, "wc": gwc, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3,
                "bias_map": g.sum(axis=0)}

    def predict(self, x_t, t, c=None):
        if t < 1:
            raise ParameterError("the noise estimate is undefined at t = 0")
        x = np.asarray(x_t, dtype=np.float64)[None]
        ab = float(self.schedule.alpha_bar[t])
        out, _ = self._forward(x, np.array([np.sqrt(1.0 - ab)]), self._cvec(c, 1))
        return (x[0] - np.sqrt(ab) * out[0]) / np.sqrt(1.0 - ab)


@dataclass
class DenoiserReport:
    losses: list


def train_tiny_denoiser(dataset, hyper: nn.TrainConfig, schedule: NoiseSchedule, embed=None,
                        hidden=16):
    """Fit a :class:`TinyDenoiser` by clean-image regression on noised inputs.

    ``dataset`` is a list of ``(image, class)``; ``embed`` maps a class to a
    conditioning object (defaults to no conditioning). ``hyper.max_steps``
    (or ``epochs`` if unset) gives the number of updates.
    """
    if not dataset:
        raise ParameterError("dataset is empty")
    images = np.stack([np.asarray(img, dtype=np.float64) for img, _ in dataset])
    conds = [embed(cls) if embed is not None else None for _, cls in dataset]
    model = TinyDenoiser.init(schedule, channels=images.shape[1], hidden=hidden, seed=hyper.seed,
                              size=images.shape[2])
    opt = nn.make_optimizer(hyper.optimizer, hyper.lr)
    rng = rng_for(hyper.seed, "tiny-denoiser-train")
    steps = hyper.max_steps if hyper.max_steps is not None else hyper.epochs
    losses = []
    for step in range(steps):
        idx = rng.integers(len(images), size=hyper.batch_size)
        t = rng.integers(1, schedule.T + 1, size=hyper.batch_size)
        ab = schedule.alpha_bar[t]
        eps = rng.standard_normal((hyper.batch_size,) + images.shape[1:])
        x_t = np.sqrt(ab)[:, None, None, None] * images[idx] + np.sqrt(1 - ab)[:, None, None, None] * eps
        cvec = np.stack([model._cvec(conds[i], 1)[0] for i in idx])
        out, cache = model._forward(x_t, np.sqrt(1 - ab), cvec)
        resid = out - images[idx]
        loss = float(np.mean(resid**2))
        if not np.isfinite(loss):
            raise TrainingError("non-finite denoiser loss", diagnostics={"step": step, "losses": losses})
        losses.append(loss)
        grads = model._backward(cache, 2.0 * resid / resid.size)
        opt.step(model.params, grads)
    model.report = DenoiserReport(losses)
    return model
