"""Dissimilarity, cross-divergence, InfoNCE terms and the step-rescaled total.

Every loss here is a quantity to minimize.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

LOGIT_CLAMP = 15.0
NEGATIVE_SCOPES = ("batch", "sequence")


class EmptyBatchError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossFlags:
    """Which terms enter the objective; see ``VARIANTS``."""

    dissim: str = "cd"  # "cd" or "mse"
    rescale: bool = True
    in_view: bool = True
    cross_view: bool = True


VARIANTS = {
    "full": LossFlags(),
    "cd_only": LossFlags(in_view=False, cross_view=False),
    "mse_only": LossFlags(dissim="mse", in_view=False, cross_view=False),
    "mse_multi": LossFlags(dissim="mse"),
    "no_rescale": LossFlags(rescale=False),
    "single_view": LossFlags(cross_view=False),
    "in_only": LossFlags(cross_view=False),
    "cross_only": LossFlags(in_view=False),
}


@dataclass
class StepLoss:
    t: int
    cd: torch.Tensor
    in_view: torch.Tensor
    cross_view: torch.Tensor


@dataclass
class LossBreakdown:
    per_step: list[tuple[float, float, float]]
    total: float
    lam: float
    tau: float
    objective: torch.Tensor | None = field(default=None, repr=False, compare=False)


def dissimilarity(x_t: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Negative inner product over the last axis."""
    if x_t.shape[-1] != x_hat.shape[-1]:
        raise ValueError(f"dimension mismatch: {x_t.shape[-1]} vs {x_hat.shape[-1]}")
    return -(x_t * x_hat).sum(-1)


def _logsigmoid(z):
    return F.logsigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))


def cross_divergence_loss(x_hat: torch.Tensor, x_pos: torch.Tensor, x_neg: torch.Tensor) -> torch.Tensor:
    """-(1/P) sum[log s(<x_hat, x_pos>) + log(1 - s(<x_hat, x_neg>))] over P rows."""
    if x_hat.shape[0] == 0:
        raise EmptyBatchError("empty effective batch")
    pos = -dissimilarity(x_pos, x_hat)
    neg = -dissimilarity(x_neg, x_hat)
    # log(1 - s(z)) = log s(-z)
    return -(_logsigmoid(pos) + _logsigmoid(-neg)).mean()


def mse_loss(x_hat: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
    if x_hat.shape[0] == 0:
        raise EmptyBatchError("empty effective batch")
    return ((x_t - x_hat) ** 2).sum(-1).mean()


def _infonce(anchors, keys, tau, groups=None):
    P = anchors.shape[0]
    if P < 2:
        raise EmptyBatchError(f"InfoNCE needs at least 2 positions, got {P}")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    to_keys = anchors @ keys.T / tau
    to_anchors = anchors @ anchors.T / tau
    eye = torch.eye(P, dtype=torch.bool, device=anchors.device)
    hidden_self = eye
    hidden_keys = torch.zeros_like(eye)
    if groups is not None:
        other = groups[:, None] != groups[None, :]
        hidden_self = hidden_self | other
        hidden_keys = other
    to_keys = to_keys.masked_fill(hidden_keys, float("-inf"))
    to_anchors = to_anchors.masked_fill(hidden_self, float("-inf"))
    log_denominator = torch.logsumexp(torch.cat([to_keys, to_anchors], dim=1), dim=1)
    return (log_denominator - to_keys.diagonal()).mean()


def in_view_infonce(x_hat: torch.Tensor, x_t: torch.Tensor, tau: float = 1.0, groups=None) -> torch.Tensor:
    """Anchors x_hat_i, positive x_t_i, negatives x_t_j and x_hat_j (j != i).

    ``groups`` (one id per row) restricts negatives to rows sharing the
    anchor's id; ``None`` uses the whole batch.
    """
    return _infonce(x_hat, x_t, tau, groups)


def cross_view_infonce(x_hat: torch.Tensor, x_hat_aug: torch.Tensor, tau: float = 1.0, groups=None) -> torch.Tensor:
    """Same structure as the in-view loss with augmented-view predictions as keys."""
    return _infonce(x_hat, x_hat_aug, tau, groups)


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def step_weight(t: int, T: int, rescale: bool) -> float:
    return 1.0 / (t + 1) if rescale else 1.0 / (T + 1)


def total_loss(
    steps: Sequence[StepLoss],
    lam: float,
    tau: float,
    flags: LossFlags = LossFlags(),
    T: int | None = None,
) -> LossBreakdown:
    """sum_t w_t (cd_t + lam (in_t + cross_t)); w_t = 1/(t+1), or 1/(T+1) without rescaling.

    Terms switched off by ``flags`` are dropped from the sum. ``T`` defaults
    to the largest step present.
    """
    if not steps:
        raise ValueError("no diffusion steps to sum")
    if T is None:
        T = max(s.t for s in steps)
    objective = None
    per_step = []
    for s in steps:
        parts = {"cd": s.cd, "in_view": s.in_view, "cross_view": s.cross_view}
        for name, value in parts.items():
            if not math.isfinite(_scalar(value)):
                raise NonFiniteLossError(f"non-finite {name} loss at step t={s.t}")
        term = s.cd
        contrast = 0.0
        if flags.in_view:
            contrast = contrast + s.in_view
        if flags.cross_view:
            contrast = contrast + s.cross_view
        if flags.in_view or flags.cross_view:
            term = term + lam * contrast
        term = step_weight(s.t, T, flags.rescale) * term
        objective = term if objective is None else objective + term
        per_step.append((_scalar(s.cd), _scalar(s.in_view), _scalar(s.cross_view)))
    return LossBreakdown(per_step=per_step, total=_scalar(objective), lam=lam, tau=tau, objective=objective)
