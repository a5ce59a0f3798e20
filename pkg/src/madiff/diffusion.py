"""Deterministic DDIM machinery: schedule, inversion, sampling.

Step indices passed to :func:`invert_step`, :func:`sample_step` and
:func:`sample` are *effective* indices ``k`` into the strided grid
``schedule.timesteps``; predictors always receive the raw timestep.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import ParameterError, SingularityError


class NoisePredictor(Protocol):
    def predict(self, x_t: np.ndarray, t: int, c=None) -> np.ndarray: ...


class AttentionProvider(Protocol):
    def emit(self, x_t: np.ndarray, t: int, c=None) -> np.ndarray: ...


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray
    stride: int = 1
    depth: int | None = None

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise ParameterError("alpha_bar needs at least two entries")
        if np.any(np.diff(ab) >= 0) or ab[0] < 0.999 or ab[-1] <= 0 or ab[0] > 1:
            raise ParameterError("alpha_bar must be strictly decreasing within (0, 1] and start >= 0.999")
        T = ab.size - 1
        if self.stride < 1 or T % self.stride:
            raise ParameterError(f"stride {self.stride} must divide T={T}")
        depth = T // self.stride if self.depth is None else int(self.depth)
        if not 0 <= depth <= T // self.stride:
            raise ParameterError(f"depth {depth} outside [0, {T // self.stride}]")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "depth", depth)

    @property
    def T(self) -> int:
        return self.alpha_bar.size - 1

    @property
    def num_steps(self) -> int:
        """Number of effective steps on the strided grid."""
        return self.T // self.stride

    @property
    def S(self) -> int:
        return self.depth

    @property
    def timesteps(self) -> np.ndarray:
        return np.arange(0, self.T + 1, self.stride)

    def t_of(self, k: int) -> int:
        return int(k) * self.stride

    def ab(self, k: int) -> float:
        """alpha_bar at effective index ``k``."""
        return float(self.alpha_bar[self.t_of(k)])

    def with_(self, stride=None, depth=None) -> "NoiseSchedule":
        return NoiseSchedule(
            self.alpha_bar,
            stride=self.stride if stride is None else stride,
            depth=depth,
        )


def build_schedule(T=1000, beta_min=1e-4, beta_max=0.02, stride=1, depth=None) -> NoiseSchedule:
    """Linear-beta schedule with ``alpha_bar[t] = prod_{i<=t} (1 - beta_i)`` and ``alpha_bar[0] = 1``."""
    if int(T) != T or T < 1:
        raise ParameterError("T must be a positive integer")
    if not (0 < beta_min <= beta_max < 1):
        raise ParameterError("need 0 < beta_min <= beta_max < 1")
    betas = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar, stride=stride, depth=depth)


def predict_x0(x_t, eps, alpha_bar_t):
    if alpha_bar_t <= 0:
        raise SingularityError("alpha_bar_t must be positive")
    if alpha_bar_t > 1:
        raise ParameterError("alpha_bar_t must be <= 1")
    x_t = np.asarray(x_t)
    eps = np.asarray(eps)
    if x_t.shape != eps.shape:
        raise ParameterError(f"shape mismatch {x_t.shape} vs {eps.shape}")
    return (x_t - np.sqrt(1.0 - alpha_bar_t) * eps) / np.sqrt(alpha_bar_t)


def ddim_move(x_t, eps, ab_from, ab_to):
    """Move along the deterministic DDIM path from level ``ab_from`` to ``ab_to``."""
    x0 = predict_x0(x_t, eps, ab_from)
    return np.sqrt(ab_to) * x0 + np.sqrt(1.0 - ab_to) * eps


def invert_step(x_t, k, predictor: NoisePredictor, schedule: NoiseSchedule, c=None):
    if not 0 <= k < schedule.num_steps:
        raise ParameterError(f"inversion index {k} outside [0, {schedule.num_steps})")
    eps = predictor.predict(x_t, schedule.t_of(k), c)
    x0 = predict_x0(x_t, eps, schedule.ab(k))
    ab_next = schedule.ab(k + 1)
    return np.sqrt(1.0 - ab_next) * eps + np.sqrt(ab_next) * x0


def sample_step(x_t, k, c, predictor: NoisePredictor, schedule: NoiseSchedule):
    if not 1 <= k <= schedule.num_steps:
        raise ParameterError(f"sampling index {k} outside [1, {schedule.num_steps}]")
    eps = predictor.predict(x_t, schedule.t_of(k), c)
    x0 = predict_x0(x_t, eps, schedule.ab(k))
    ab_prev = schedule.ab(k - 1)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps


@dataclass
class Trajectory:
    """Inversion states ``x_0 .. x_{S-1}`` and the final noise map ``x_S``."""

    states: list = field(default_factory=list)
    final: np.ndarray | None = None

    def __len__(self):
        return len(self.states)

    def __getitem__(self, k):
        return self.states[k]


def invert(x0, predictor: NoisePredictor, schedule: NoiseSchedule, steps=None, c=None) -> Trajectory:
    steps = schedule.depth if steps is None else int(steps)
    if not 0 <= steps <= schedule.num_steps:
        raise ParameterError(f"cannot invert {steps} steps on a {schedule.num_steps}-step grid")
    x = np.array(x0, dtype=np.float64, copy=True)
    traj = Trajectory()
    for k in range(steps):
        traj.states.append(x)
        x = invert_step(x, k, predictor, schedule, c)
    traj.final = x
    return traj


def sample(x_start, k_from, k_to, c, predictor: NoisePredictor, provider: AttentionProvider | None,
           schedule: NoiseSchedule):
    """Run DDIM from effective index ``k_from`` down to ``k_to``.

    Returns ``(x_{k_to}, maps)`` with one attention map per step when a
    provider is given.
    """
    if k_from < k_to or k_to < 0 or k_from > schedule.num_steps:
        raise ParameterError(f"invalid sampling range {k_from} -> {k_to}")
    x = np.array(x_start, dtype=np.float64, copy=True)
    maps = []
    for k in range(k_from, k_to, -1):
        if provider is not None:
            maps.append(provider.emit(x, schedule.t_of(k), c))
        x = sample_step(x, k, c, predictor, schedule)
    return x, maps
