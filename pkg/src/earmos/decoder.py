"""MOS regression head: per-row two-layer perceptron with a tanh squash,
mean-pooled and affinely mapped from (-1, 1) onto the open interval (1, 5).
"""

from __future__ import annotations

import numpy as np

from earmos.numerics import Tensor, glorot_uniform

DEFAULT_HIDDEN = 128


def init_decoder_params(
    d_s: int,
    rng: np.random.Generator,
    hidden: int = DEFAULT_HIDDEN,
    prefix: str = "decoder.",
) -> dict[str, Tensor]:
    # Output layer starts at zero so predictions begin at the 3.0 midpoint
    # instead of somewhere on the saturated tail of the tanh.
    return {
        f"{prefix}w1": glorot_uniform(rng, d_s, hidden, (d_s, hidden)),
        f"{prefix}b1": Tensor(np.zeros(hidden), requires_grad=True),
        f"{prefix}w2": Tensor(np.zeros((hidden, 1)), requires_grad=True),
        f"{prefix}b2": Tensor(np.zeros(1), requires_grad=True),
    }


def decode_tensor(
    y_fusion: Tensor, params: dict[str, Tensor], prefix: str = "decoder."
) -> Tensor:
    """Differentiable scalar MOS prediction from fused rows (n, d_s)."""
    h = (y_fusion.matmul(params[f"{prefix}w1"]) + params[f"{prefix}b1"]).relu()
    scores = (h.matmul(params[f"{prefix}w2"]) + params[f"{prefix}b2"]).tanh()
    return scores.mean() * 2.0 + 3.0


def decode(
    y_fusion,
    params: dict[str, Tensor],
    prefix: str = "decoder.",
    return_frame_scores: bool = False,
):
    """Plain-numpy inference path. Row order never affects the result.

    Per-row scores land in (-1, 1); their mean m maps to 2m + 3, the unique
    affine map from (-1, 1) onto (1, 5).
    """
    rows = y_fusion.values if isinstance(y_fusion, Tensor) else np.asarray(y_fusion, np.float64)
    h = np.maximum(0.0, rows @ params[f"{prefix}w1"].values + params[f"{prefix}b1"].values)
    scores = np.tanh(h @ params[f"{prefix}w2"].values + params[f"{prefix}b2"].values)
    predicted = float(scores.mean() * 2.0 + 3.0)
    if return_frame_scores:
        return predicted, scores.reshape(-1)
    return predicted
