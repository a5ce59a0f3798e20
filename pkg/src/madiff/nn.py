"""Minimal layers with hand-written backward passes, plus optimizers.

Arrays are float64, images are laid out (N, C, H, W).
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels


def conv(x, w, b):
    return kernels.conv2d_forward(x, w, b)


def conv_grad(x, w, g):
    return kernels.conv2d_backward(x, w, g)


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x, g):
    return g * (x > 0)


def silu(x):
    return x * sigmoid(x)


def silu_grad(x, g):
    s = sigmoid(x)
    return g * (s * (1.0 + x * (1.0 - s)))


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def avgpool2(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_grad(g):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_grad(g):
    n, c, h, w = g.shape
    return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_grad(p, g, axis=-1):
    return p * (g - (g * p).sum(axis=axis, keepdims=True))


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SGD:
    def __init__(self, lr=1e-2):
        self.lr = lr

    def step(self, params, grads):
        for name, g in grads.items():
            params[name] -= self.lr * g


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            params[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name, lr):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class TrainConfig:
    """Gradient-descent settings.

    ``max_steps`` caps the number of updates regardless of ``epochs``.
    """

    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.5
    optimizer: str = "sgd"
    seed: int = 0
    max_steps: int | None = None
    log_every: int = 0

    def to_dict(self):
        return asdict(self)
