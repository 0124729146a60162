"""Joint cognitive fusion: auditory projection, diagonal band masking, and
residual cross-attention against the SSL embedding sequence.

The auditory embedding is projected into a fixed block of N_a = 8 query rows
and concatenated ahead of the semantic-distortion frames. Each fusion layer
attends from those rows into the w2v sequence; auditory rows see every key
while each semantic row is restricted to a diagonal band of width tau around
its time-aligned key position. Layers are post-norm residual blocks:
Y = LayerNorm(Attention(XW_Q, KW_K, VW_V) + X).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from earmos.encoder import EMBEDDING_DIM, AuditoryEmbedding
from earmos.errors import ShapeError
from earmos.numerics import Tensor, attention, concat, glorot_uniform
from earmos.rvq import EmbeddingSequence

DEFAULT_AUDITORY_ROWS = 8
DEFAULT_LAYERS = 2
DEFAULT_TAU = 10
MAX_LAYERS = 6


@dataclass(frozen=True)
class FusionConfig:
    d_s: int
    n_a: int = DEFAULT_AUDITORY_ROWS
    l_layers: int = DEFAULT_LAYERS
    tau: int = DEFAULT_TAU
    heads: int = 1

    def __post_init__(self):
        if self.d_s < 1 or self.n_a < 1:
            raise ValueError("d_s and n_a must be positive")
        if not 1 <= self.l_layers <= MAX_LAYERS:
            raise ValueError(f"l_layers must be in 1..{MAX_LAYERS}")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if self.heads < 1 or self.d_s % self.heads != 0:
            raise ValueError("heads must divide d_s")


@dataclass(frozen=True)
class JointEmbedding:
    """X_uni rows: n_a projected auditory rows followed by semantic rows."""

    rows: np.ndarray
    n_a: int

    def __post_init__(self):
        r = np.asarray(self.rows, dtype=np.float64)
        object.__setattr__(self, "rows", r)
        if r.ndim != 2 or not np.all(np.isfinite(r)):
            raise ValueError("joint embedding rows must be a finite matrix")
        if not 1 <= self.n_a <= r.shape[0]:
            raise ValueError("n_a must count a non-empty prefix of the rows")


def init_projection_params(
    cfg: FusionConfig, rng: np.random.Generator, prefix: str = "proj."
) -> dict[str, Tensor]:
    """Single linear map from the auditory embedding to n_a rows of d_s."""
    out = cfg.n_a * cfg.d_s
    return {
        f"{prefix}w": glorot_uniform(rng, EMBEDDING_DIM, out, (EMBEDDING_DIM, out)),
        f"{prefix}b": Tensor(np.zeros(out), requires_grad=True),
    }


def init_fusion_params(
    cfg: FusionConfig, d_w: int, rng: np.random.Generator, prefix: str = "fusion."
) -> dict[str, Tensor]:
    """Per-layer query/key/value projection matrices (no biases)."""
    params: dict[str, Tensor] = {}
    for layer in range(cfg.l_layers):
        params[f"{prefix}l{layer}.wq"] = glorot_uniform(rng, cfg.d_s, cfg.d_s, (cfg.d_s, cfg.d_s))
        params[f"{prefix}l{layer}.wk"] = glorot_uniform(rng, d_w, cfg.d_s, (d_w, cfg.d_s))
        params[f"{prefix}l{layer}.wv"] = glorot_uniform(rng, d_w, cfg.d_s, (d_w, cfg.d_s))
    return params


def project_auditory(a, cfg: FusionConfig, params: dict[str, Tensor], prefix: str = "proj.") -> Tensor:
    """Map the 192-d auditory embedding to an (n_a, d_s) row block."""
    if isinstance(a, AuditoryEmbedding):
        vec = Tensor(a.vector.reshape(1, -1))
    elif isinstance(a, Tensor):
        vec = a if a.values.ndim == 2 else a.reshape(1, -1)
    else:
        vec = Tensor(np.asarray(a, dtype=np.float64).reshape(1, -1))
    flat = vec.matmul(params[f"{prefix}w"]) + params[f"{prefix}b"]
    return flat.reshape(cfg.n_a, cfg.d_s)


def band_mask(n_a: int, n_s: int, n_w: int, tau: float) -> np.ndarray:
    """0/1 mask of shape (n_a + n_s, n_w).

    Auditory query rows (i < n_a) see every key. Semantic row i sees key j iff
    |lambda*(i - n_a) - j| <= tau with lambda = n_w/n_s mapping semantic frame
    positions onto the key timeline.
    """
    if n_s < 1 or n_w < 1:
        raise ValueError("n_s and n_w must be positive")
    i = np.arange(n_a + n_s)[:, None]
    j = np.arange(n_w)[None, :]
    lam = n_w / n_s
    in_band = np.abs(lam * (i - n_a) - j) <= tau
    return np.where(i < n_a, 1.0, in_band.astype(np.float64))


def build_joint(
    a: AuditoryEmbedding,
    x_sem: EmbeddingSequence | None,
    cfg: FusionConfig,
    params: dict[str, Tensor],
) -> JointEmbedding:
    """Assemble X_uni = [proj(X_aud); X_sem] as a concrete matrix."""
    aud = project_auditory(a, cfg, params).values
    if x_sem is None:
        return JointEmbedding(aud, cfg.n_a)
    if x_sem.dim != cfg.d_s:
        raise ShapeError(f"semantic dim {x_sem.dim} != configured d_s {cfg.d_s}")
    return JointEmbedding(np.concatenate([aud, x_sem.frames], axis=0), cfg.n_a)


def prune_for_inference(
    a: AuditoryEmbedding, cfg: FusionConfig, params: dict[str, Tensor]
) -> JointEmbedding:
    """Inference-time X_uni with the semantic rows dropped entirely."""
    return build_joint(a, None, cfg, params)


def _layer_attention(q, k, v, mask, cfg: FusionConfig, record):
    if cfg.heads == 1:
        if record is None:
            return attention(q, k, v, mask=mask)
        out, w = attention(q, k, v, mask=mask, return_weights=True)
        record.append(w.values.copy())
        return out
    width = cfg.d_s // cfg.heads
    outs = []
    head_weights = []
    for h in range(cfg.heads):
        cols = (slice(None), slice(h * width, (h + 1) * width))
        if record is None:
            outs.append(attention(q[cols], k[cols], v[cols], mask=mask))
        else:
            out, w = attention(q[cols], k[cols], v[cols], mask=mask, return_weights=True)
            head_weights.append(w.values)
            outs.append(out)
    if record is not None:
        record.append(np.mean(head_weights, axis=0))
    return concat(outs, axis=1)


def fuse(
    x_uni: JointEmbedding | Tensor,
    x_w2v: EmbeddingSequence | Tensor,
    cfg: FusionConfig,
    params: dict[str, Tensor],
    prefix: str = "fusion.",
    record: list[np.ndarray] | None = None,
) -> Tensor:
    """Run the residual cross-attention stack; returns Y^L as a tensor.

    `record`, when given, collects one (n_q, n_k) attention-weight matrix per
    layer (averaged over heads) for later export via dump_attention.
    """
    if isinstance(x_uni, Tensor):
        x, n_a = x_uni, cfg.n_a
    else:
        x, n_a = Tensor(x_uni.rows), x_uni.n_a
    kv = x_w2v if isinstance(x_w2v, Tensor) else Tensor(x_w2v.frames)
    if x.shape[1] != cfg.d_s:
        raise ShapeError(f"x_uni dim {x.shape[1]} != configured d_s {cfg.d_s}")
    if kv.shape[1] != params[f"{prefix}l0.wk"].shape[0]:
        raise ShapeError(
            f"w2v dim {kv.shape[1]} != key projection input {params[f'{prefix}l0.wk'].shape[0]}"
        )
    n_s = x.shape[0] - n_a
    if n_s > 0:
        mask = band_mask(n_a, n_s, kv.shape[0], cfg.tau)
    else:
        mask = np.ones((x.shape[0], kv.shape[0]))
    for layer in range(cfg.l_layers):
        q = x.matmul(params[f"{prefix}l{layer}.wq"])
        k = kv.matmul(params[f"{prefix}l{layer}.wk"])
        v = kv.matmul(params[f"{prefix}l{layer}.wv"])
        att = _layer_attention(q, k, v, mask, cfg, record)
        x = (att + x).layer_norm(axis=1)
    return x


def dump_attention(recorded: Sequence[np.ndarray]) -> list[str]:
    """Flatten recorded per-layer weights to `layer,query_index,key_index,weight`
    CSV data rows (dense, header not included)."""
    lines = []
    for layer, weights in enumerate(recorded):
        for qi in range(weights.shape[0]):
            for ki in range(weights.shape[1]):
                lines.append(f"{layer},{qi},{ki},{weights[qi, ki]:.10g}")
    return lines
