"""Diffusion noise schedule and closed-form forward sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SHAPES = ("linear",)
VARIANCE_MODES = ("ratio", "standard")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step tables for t = 1..T, with index 0 holding the clean state.

    ``alpha_bars[0]`` is 1 by convention, so every table can be indexed
    directly by the step number.
    """

    T: int
    beta_max: float
    shape: str = "linear"
    betas: np.ndarray = field(repr=False, default=None)
    alphas: np.ndarray = field(repr=False, default=None)
    alpha_bars: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars"):
            getattr(self, name).setflags(write=False)

    def _check_step(self, t: int, allow_zero: bool) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ScheduleError(f"step {t} outside [{lo}, {self.T}]")
        return t

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._check_step(t, True)])

    def posterior_variance(self, t: int, mode: str = "ratio", floor: float = 0.0) -> float:
        """Variance of the reverse step at ``t``.

        ``ratio`` returns (1 - abar[t-1]) / (1 - abar[t]); ``standard``
        multiplies that by beta[t]. With abar[0] = 1 the value at t=1 is 0,
        lifted to ``floor`` when one is given.
        """
        t = self._check_step(t, False)
        if mode not in VARIANCE_MODES:
            raise ScheduleError(f"unknown posterior variance mode {mode!r}")
        var = (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
        if mode == "standard":
            var *= self.betas[t]
        return max(float(var), float(floor))

    def marginal_sample(self, x0, t: int, eps):
        """Draw from q(x_t | x_0) = N(sqrt(abar_t) x0, (1 - abar_t) I).

        Works for numpy arrays and torch tensors alike; ``t = 0`` returns
        ``x0`` itself (no noise is consumed).
        """
        t = self._check_step(t, True)
        if t == 0:
            return x0
        if tuple(x0.shape) != tuple(eps.shape):
            raise ScheduleError(f"noise shape {tuple(eps.shape)} != input shape {tuple(x0.shape)}")
        abar = float(self.alpha_bars[t])
        return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps

    def as_triple(self) -> tuple[int, float, str]:
        return (self.T, self.beta_max, self.shape)


def build_schedule(T: int, beta_max: float, shape: str = "linear") -> DiffusionSchedule:
    """Linear schedule beta_t = beta_max * t / T, so beta_T = beta_max."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_max < 1.0:
        raise ScheduleError(f"beta_max must lie in (0, 1), got {beta_max!r}")
    if shape not in SHAPES:
        raise ScheduleError(f"unknown schedule shape {shape!r}")
    T = int(T)
    steps = np.arange(0, T + 1, dtype=np.float64)
    betas = beta_max * steps / T  # betas[0] = 0 marks the clean state
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(
        T=T,
        beta_max=float(beta_max),
        shape=shape,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
    )


def posterior_variance(schedule: DiffusionSchedule, t: int, mode: str = "ratio", floor: float = 0.0) -> float:
    return schedule.posterior_variance(t, mode=mode, floor=floor)


def marginal_sample(schedule: DiffusionSchedule, x0, t: int, eps):
    return schedule.marginal_sample(x0, t, eps)
