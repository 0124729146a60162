"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from earmos.numerics.tensor import Tensor


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    rng: np.random.Generator,
    h: float = 1e-5,
    max_coords: int = 40,
) -> float:
    """Return the worst relative error between analytic and numeric gradients.

    `loss_fn` must rebuild the scalar loss from `params` on every call.
    For each parameter a random subset of at most `max_coords` coordinates is
    perturbed by +/- h. The relative error uses max(1, |analytic|, |numeric|)
    as denominator so exactly-zero gradients compare cleanly.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if loss.values.size != 1:
        raise ValueError("gradcheck needs a scalar loss")
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.values) for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.values.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_fn().item()
            flat[idx] = orig - h
            down = loss_fn().item()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * h)
            ana = a.reshape(-1)[idx]
            err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            worst = max(worst, err)
    return worst
