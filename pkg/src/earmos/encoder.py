"""Electrochemical signal encoding: 40 Hz temporal pooling followed by a
reduced TDNN + attentive-statistical-pooling network with a 192-d bottleneck.

The network is a cut-down cousin of the ECAPA-TDNN family: three dilated
1-d convolutions, a two-layer attention scorer producing softmax weights over
time, weighted mean/std pooling, and a linear bottleneck with feature-wise
standardization. SE blocks and multi-scale aggregation are deliberately left
out to keep desk-scale training tractable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from earmos.cochlea import Cochleagram
from earmos.numerics import Tensor, concat, glorot_uniform

POOL_TARGET_HZ = 40
POOL_SOURCE_HZ = 16000
EMBEDDING_DIM = 192
VARIANCE_FLOOR = 1e-6  # keeps the std branch differentiable when T = 1


@dataclass(frozen=True)
class AuditoryEmbedding:
    """Fixed-size global auditory feature vector."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        object.__setattr__(self, "vector", v)
        if v.shape != (EMBEDDING_DIM,):
            raise ValueError(f"auditory embedding must have length {EMBEDDING_DIM}")
        if not np.all(np.isfinite(v)):
            raise ValueError("auditory embedding must be finite")


@dataclass(frozen=True)
class ApmEncoderConfig:
    d_f: int
    tdnn_channels: int = 128
    dilations: tuple[int, ...] = (1, 2, 3)
    attention_hidden: int = 64
    out_dim: int = EMBEDDING_DIM

    def __post_init__(self):
        if self.out_dim != EMBEDDING_DIM:
            raise ValueError(f"bottleneck dimension is fixed at {EMBEDDING_DIM}")


def pool_to_40hz(c: Cochleagram) -> np.ndarray:
    """Adaptive average pooling from 16 kHz rows down to 40 Hz frames.

    T = max(1, round(N * 40/16000)); frame t averages the rows in
    [floor(t*N/T), floor((t+1)*N/T)), so the windows partition the input.
    """
    if c.sample_rate_hz != POOL_SOURCE_HZ:
        raise ValueError(f"pooling assumes {POOL_SOURCE_HZ} Hz input, got {c.sample_rate_hz}")
    n = c.data.shape[0]
    if n == 0:
        raise ValueError("cannot pool an empty cochleagram")
    t_frames = max(1, round(n * POOL_TARGET_HZ / POOL_SOURCE_HZ))
    bounds = (np.arange(t_frames + 1) * n) // t_frames
    out = np.empty((t_frames, c.data.shape[1]))
    for t in range(t_frames):
        out[t] = c.data[bounds[t] : bounds[t + 1]].mean(axis=0)
    return out


def init_encoder_params(
    cfg: ApmEncoderConfig, rng: np.random.Generator, prefix: str = "apm."
) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    c_in = cfg.d_f
    for i in range(len(cfg.dilations)):
        fan_in = 3 * c_in
        params[f"{prefix}tdnn{i}.w"] = glorot_uniform(
            rng, fan_in, cfg.tdnn_channels, (fan_in, cfg.tdnn_channels)
        )
        params[f"{prefix}tdnn{i}.b"] = Tensor(np.zeros(cfg.tdnn_channels), requires_grad=True)
        c_in = cfg.tdnn_channels
    params[f"{prefix}score.w1"] = glorot_uniform(
        rng, cfg.tdnn_channels, cfg.attention_hidden, (cfg.tdnn_channels, cfg.attention_hidden)
    )
    params[f"{prefix}score.b1"] = Tensor(np.zeros(cfg.attention_hidden), requires_grad=True)
    params[f"{prefix}score.w2"] = glorot_uniform(rng, cfg.attention_hidden, 1, (cfg.attention_hidden, 1))
    params[f"{prefix}score.b2"] = Tensor(np.zeros(1), requires_grad=True)
    params[f"{prefix}out.w"] = glorot_uniform(
        rng, 2 * cfg.tdnn_channels, cfg.out_dim, (2 * cfg.tdnn_channels, cfg.out_dim)
    )
    params[f"{prefix}out.b"] = Tensor(np.zeros(cfg.out_dim), requires_grad=True)
    return params


def _shift_rows(x: Tensor, offset: int) -> Tensor:
    """Rows moved down by `offset` (up if negative), zero-filled."""
    t = x.shape[0]
    if offset == 0:
        return x
    if abs(offset) >= t:
        return Tensor.zeros(x.shape)
    pad = Tensor.zeros((abs(offset), x.shape[1]))
    if offset > 0:
        return concat([pad, x[: t - offset]], axis=0)
    return concat([x[-offset:], pad], axis=0)


def _dilated_conv(x: Tensor, w: Tensor, b: Tensor, dilation: int) -> Tensor:
    """Kernel-3 1-d convolution over time with 'same' zero padding."""
    stacked = concat([_shift_rows(x, dilation), x, _shift_rows(x, -dilation)], axis=1)
    return stacked.matmul(w) + b


def attentive_stat_pool(h: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Softmax-weighted mean and std over time, concatenated to (1, 2C)."""
    scores = (
        (h.matmul(params[f"{prefix}score.w1"]) + params[f"{prefix}score.b1"])
        .tanh()
        .matmul(params[f"{prefix}score.w2"])
        + params[f"{prefix}score.b2"]
    )
    alpha = scores.softmax(axis=0)  # (T, 1)
    mu = (h * alpha).sum(axis=0, keepdims=True)
    ex2 = (h * h * alpha).sum(axis=0, keepdims=True)
    var = ex2 - mu * mu
    # max(var, floor) via the relu identity, keeping the graph differentiable
    floored = (var - VARIANCE_FLOOR).relu() + VARIANCE_FLOOR
    sigma = floored.power(0.5)
    return concat([mu, sigma], axis=1)


def encode_tensor(frames, cfg: ApmEncoderConfig, params: dict[str, Tensor], prefix: str = "apm.") -> Tensor:
    """Differentiable forward pass; returns the (1, 192) embedding tensor."""
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    for i, d in enumerate(cfg.dilations):
        x = _dilated_conv(x, params[f"{prefix}tdnn{i}.w"], params[f"{prefix}tdnn{i}.b"], d).relu()
    pooled = attentive_stat_pool(x, params, prefix)
    out = pooled.matmul(params[f"{prefix}out.w"]) + params[f"{prefix}out.b"]
    return out.layer_norm(axis=1)


def encode(frames: np.ndarray, cfg: ApmEncoderConfig, params: dict[str, Tensor], prefix: str = "apm.") -> AuditoryEmbedding:
    """Inference wrapper returning the embedding as a plain vector."""
    return AuditoryEmbedding(encode_tensor(frames, cfg, params, prefix).values[0])
