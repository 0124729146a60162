"""Training objectives: pairwise relative ranking loss, L1 regression loss,
and their alpha-weighted mixture.

The rank loss is binary cross-entropy on P = sigmoid(d), d = y_hat_i - y_hat_j,
against a soft target M in {0, 0.5, 1} derived from the true scores. It is
evaluated as loss = log(1 + e^(-d)) + (1 - M)*d, which is algebraically equal
to -M*log(P) - (1-M)*log(1-P) but never overflows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from earmos.numerics import Tensor

DEFAULT_ALPHA = 0.9
DEFAULT_BETA = 0.1


@dataclass(frozen=True)
class LossConfig:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")


def rank_target(y_i: float, y_j: float, beta: float = DEFAULT_BETA) -> float:
    """Soft ordering target M: 0.5 inside the beta margin, else hard 0/1."""
    if abs(y_i - y_j) < beta:
        return 0.5
    return 1.0 if y_i > y_j else 0.0


def rank_loss(pred_i: float, pred_j: float, m: float) -> float:
    d = pred_i - pred_j
    return float(np.logaddexp(0.0, -d) + (1.0 - m) * d)


def rank_loss_tensor(pred_i: Tensor, pred_j: Tensor, m: float) -> Tensor:
    d = pred_i - pred_j
    return (-d).softplus() + d * (1.0 - m)


def reg_loss(pred: float, actual: float) -> float:
    return abs(pred - actual)


def _pair_targets(actual: Sequence[float], beta: float):
    n = len(actual)
    return [
        (i, j, rank_target(actual[i], actual[j], beta))
        for i in range(n)
        for j in range(n)
        if i != j
    ]


def total_loss(
    pred: Sequence[float], actual: Sequence[float], cfg: LossConfig = LossConfig()
) -> tuple[float, float, float]:
    """Batch objective; returns (total, rank_term, reg_term).

    total = (1 - alpha)*rank_term + alpha*reg_term where rank_term averages
    the pairwise loss over all ordered pairs (0 when the batch has a single
    element) and reg_term averages |pred - actual|.
    """
    if len(pred) == 0 or len(pred) != len(actual):
        raise ValueError("need equal-length, non-empty prediction/target lists")
    pairs = _pair_targets(actual, cfg.beta)
    rank = (
        float(np.mean([rank_loss(pred[i], pred[j], m) for i, j, m in pairs])) if pairs else 0.0
    )
    reg = float(np.mean([reg_loss(p, a) for p, a in zip(pred, actual)]))
    return (1.0 - cfg.alpha) * rank + cfg.alpha * reg, rank, reg


def total_loss_tensor(
    pred: Sequence[Tensor], actual: Sequence[float], cfg: LossConfig = LossConfig()
) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable counterpart of total_loss over scalar prediction tensors."""
    if len(pred) == 0 or len(pred) != len(actual):
        raise ValueError("need equal-length, non-empty prediction/target lists")
    pairs = _pair_targets(actual, cfg.beta)
    if pairs:
        terms = [rank_loss_tensor(pred[i], pred[j], m) for i, j, m in pairs]
        rank = sum(terms[1:], terms[0]) * (1.0 / len(terms))
    else:
        rank = Tensor(0.0)
    regs = [(p - a).abs() for p, a in zip(pred, actual)]
    reg = sum(regs[1:], regs[0]) * (1.0 / len(regs))
    return rank * (1.0 - cfg.alpha) + reg * cfg.alpha, rank, reg
