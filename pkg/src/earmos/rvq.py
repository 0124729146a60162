"""Residual vector quantization over embedding sequences.

Stacked Euclidean codebooks quantize iteratively refined residuals; the
semantic-distortion representation is the residual left after the first
stage, i.e. each frame's deviation from its nearest canonical unit.
Codebooks are trained offline with k-means and frozen afterwards, so
quantization never participates in gradient flow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EmbeddingSequence:
    """Frame-rate feature matrix (n_frames, dim)."""

    frames: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        object.__setattr__(self, "frames", frames)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError("embedding sequence must be a non-empty matrix")
        if not np.all(np.isfinite(frames)):
            raise ValueError("embedding frames must be finite")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame rate must be positive")

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class RvqCodebook:
    """Per-stage centroid matrices, all sharing one embedding dimension."""

    stages: tuple[np.ndarray, ...]

    def __post_init__(self):
        stages = tuple(np.asarray(s, dtype=np.float64) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ValueError("codebook needs at least one stage")
        dim = stages[0].shape[1]
        for s in stages:
            if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] != dim:
                raise ValueError("every stage must be a non-empty (K, dim) matrix")
            if not np.all(np.isfinite(s)):
                raise ValueError("centroids must be finite")

    @property
    def dim(self) -> int:
        return self.stages[0].shape[1]


def vq_quantize(stage: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map each row of `r` to its Euclidean-nearest centroid.

    Ties break toward the lowest centroid index. Returns (quantized rows,
    centroid indices).
    """
    stage = np.asarray(stage, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if stage.size == 0:
        raise RuntimeError("empty codebook stage")
    if r.shape[1] != stage.shape[1]:
        raise ValueError(f"frame dim {r.shape[1]} != codebook dim {stage.shape[1]}")
    # squared distances via the expansion ||r||^2 - 2 r.C^T + ||C||^2
    d2 = (
        np.sum(r * r, axis=1, keepdims=True)
        - 2.0 * (r @ stage.T)
        + np.sum(stage * stage, axis=1)[None, :]
    )
    indices = np.argmin(d2, axis=1)
    return stage[indices], indices


def rvq_forward(cb: RvqCodebook, x: EmbeddingSequence) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Quantize successive residuals; returns per-stage (q_list, r_list)."""
    q_list: list[np.ndarray] = []
    r_list: list[np.ndarray] = []
    residual = x.frames
    for stage in cb.stages:
        q, _ = vq_quantize(stage, residual)
        residual = residual - q
        q_list.append(q)
        r_list.append(residual)
    return q_list, r_list


def semantic_distortion(cb: RvqCodebook, x_h: EmbeddingSequence) -> EmbeddingSequence:
    """First-stage residual: each frame minus its nearest stage-1 centroid."""
    q, _ = vq_quantize(cb.stages[0], x_h.frames)
    return EmbeddingSequence(x_h.frames - q, x_h.frame_rate_hz)


def _kmeans_pp_seed(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding: spread initial centroids by squared distance."""
    n = data.shape[0]
    centroids = np.empty((k, data.shape[1]))
    centroids[0] = data[rng.integers(n)]
    d2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = data[rng.integers(n)]
            continue
        probs = d2 / total
        centroids[i] = data[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((data - centroids[i]) ** 2, axis=1))
    return centroids


def train_codebook(
    data: np.ndarray, k: int, iters: int = 50, seed: int = 0
) -> np.ndarray:
    """Plain k-means with k-means++ seeding; deterministic per seed.

    Empty clusters are re-seeded from the point farthest from its assigned
    centroid. Stops early once assignments stabilize.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < k:
        raise ValueError(f"need at least k={k} rows to train a codebook, got {data.shape}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_seed(data, k, rng)
    prev = None
    for _ in range(iters):
        _, assign = vq_quantize(centroids, data)
        d2 = np.sum((data - centroids[assign]) ** 2, axis=1)
        for c in range(k):
            members = assign == c
            if np.any(members):
                centroids[c] = data[members].mean(axis=0)
            else:
                far = int(np.argmax(d2))
                centroids[c] = data[far]
                d2[far] = 0.0
        if prev is not None and np.array_equal(prev, assign):
            break
        prev = assign
    return centroids


def train_rvq(
    data: np.ndarray, k: int, n_stages: int = 2, iters: int = 50, seed: int = 0
) -> RvqCodebook:
    """Train stacked codebooks, each stage on the previous stage's residuals."""
    stages = []
    residual = np.asarray(data, dtype=np.float64)
    for i in range(n_stages):
        stage = train_codebook(residual, k, iters=iters, seed=seed + i)
        q, _ = vq_quantize(stage, residual)
        residual = residual - q
        stages.append(stage)
    return RvqCodebook(tuple(stages))
