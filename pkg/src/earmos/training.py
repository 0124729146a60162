"""Progressive training orchestration and inference entry points.

Three stages, each freezing everything learned before it:

1. APM: the cochlear encoder plus a private regression head, trained with
   L1 loss on true MOS. Only the "apm." parameters survive the stage.
2. RVQ: k-means codebooks fit on embedding frames pooled over the training
   split (stands in for an externally pre-trained quantizer).
3. FUSION: projection, cross-attention, and decoder parameters trained with
   the mixed rank/regression objective while "apm."/"rvq." stay bit-frozen.

Inference supports a full mode (auditory rows + semantic-distortion rows)
and a pruned mode that keeps only the 8 projected auditory rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from earmos.audio import Waveform
from earmos.cochlea import ErbScale, cochleagram, make_erb_scale
from earmos.decoder import DEFAULT_HIDDEN, decode, decode_tensor, init_decoder_params
from earmos.encoder import ApmEncoderConfig, encode_tensor, init_encoder_params, pool_to_40hz
from earmos.errors import ShapeError
from earmos.fusion import (
    FusionConfig,
    fuse,
    init_fusion_params,
    init_projection_params,
    project_auditory,
)
from earmos.losses import LossConfig, total_loss_tensor
from earmos.metrics import PredictionRecord, srcc, system_level
from earmos.numerics import (
    Tensor,
    concat,
    finite_difference_check,
    load_checkpoint,
    save_checkpoint,
)
from earmos.rvq import EmbeddingSequence, RvqCodebook, semantic_distortion, train_rvq

APM_HEAD_PREFIX = "head."


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    alpha: float = 0.9
    beta: float = 0.1
    patience: int = 20

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def loss_config(self) -> LossConfig:
        return LossConfig(self.alpha, self.beta)


@dataclass(frozen=True)
class StagePlan:
    stage: str
    trainable: tuple[str, ...]
    frozen: tuple[str, ...]

    def __post_init__(self):
        if set(self.trainable) & set(self.frozen):
            raise ValueError("trainable and frozen prefixes must be disjoint")


STAGE_PLANS = {
    "APM": StagePlan("APM", ("apm.", APM_HEAD_PREFIX), ()),
    "RVQ": StagePlan("RVQ", ("rvq.",), ("apm.",)),
    "FUSION": StagePlan("FUSION", ("proj.", "fusion.", "decoder."), ("apm.", "rvq.")),
}


@dataclass
class TrainState:
    params: dict[str, Tensor]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0


@dataclass(frozen=True)
class SampleFeatures:
    """Frozen per-utterance inputs: pooled cochlear frames plus embeddings."""

    pooled: np.ndarray
    x_h: EmbeddingSequence
    x_w2v: EmbeddingSequence
    true_mos: float
    system_id: str
    utterance_id: str


def extract_features(samples: Sequence, scale: ErbScale | None = None) -> list[SampleFeatures]:
    """Run the parameter-free DSP front end once per sample."""
    if scale is None:
        scale = make_erb_scale()
    out = []
    for s in samples:
        pooled = pool_to_40hz(cochleagram(s.waveform, scale))
        out.append(
            SampleFeatures(pooled, s.x_h, s.x_w2v, s.true_mos, s.system_id, s.utterance_id)
        )
    return out


def split_dataset(samples: Sequence, seed: int, train_frac: float = 0.8, val_frac: float = 0.1):
    """Deterministic per-system utterance split into (train, val, test).

    Every system contributes to all partitions (one utterance minimum in
    train), so held-out metrics are computable across the full system set.
    """
    groups: dict[str, list] = {}
    for s in samples:
        groups.setdefault(s.system_id, []).append(s)
    train, val, test = [], [], []
    for gi, sid in enumerate(sorted(groups)):
        utts = sorted(groups[sid], key=lambda s: s.utterance_id)
        order = np.random.default_rng([seed, 505, gi]).permutation(len(utts))
        n = len(utts)
        n_train = max(1, int(n * train_frac))
        n_val = min(int(n * val_frac), max(0, n - n_train - 1))
        train += [utts[i] for i in order[:n_train]]
        val += [utts[i] for i in order[n_train : n_train + n_val]]
        test += [utts[i] for i in order[n_train + n_val :]]
    return train, val, test


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: dict[str, np.ndarray],
    cfg: TrainConfig,
) -> None:
    """Heavy-ball update in place: v <- momentum*v + g; p <- p - lr*v."""
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        if g.shape != p.values.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.values.shape}")
        v = state.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        state[name] = v
        p.values = p.values - cfg.lr * v


def _batches(order: np.ndarray, size: int):
    for lo in range(0, order.size, size):
        yield order[lo : lo + size]


def _zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def _collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.grad for k, p in params.items() if p.grad is not None}


def train_stage_apm(
    features: Sequence[SampleFeatures],
    cfg: TrainConfig,
    enc_cfg: ApmEncoderConfig | None = None,
    epochs: int | None = None,
    head_hidden: int = 64,
    state: TrainState | None = None,
) -> tuple[TrainState, list[float]]:
    """Stage 1: encoder + private head under plain L1; returns per-epoch loss."""
    if not features:
        raise ValueError("empty dataset")
    if enc_cfg is None:
        enc_cfg = ApmEncoderConfig(d_f=features[0].pooled.shape[1])
    epochs = cfg.epochs if epochs is None else epochs
    if state is None:
        rng = np.random.default_rng([cfg.seed, 101])
        params = init_encoder_params(enc_cfg, rng)
        params.update(init_decoder_params(192, rng, hidden=head_hidden, prefix=APM_HEAD_PREFIX))
        state = TrainState(params)
    history = []
    for epoch in range(state.epoch, state.epoch + epochs):
        order = np.random.default_rng([cfg.seed, 202, epoch]).permutation(len(features))
        batch_losses = []
        for batch in _batches(order, cfg.batch_size):
            _zero_grads(state.params)
            terms = []
            for idx in batch:
                emb = encode_tensor(features[idx].pooled, enc_cfg, state.params)
                pred = decode_tensor(emb, state.params, prefix=APM_HEAD_PREFIX)
                terms.append((pred - features[idx].true_mos).abs())
            loss = sum(terms[1:], terms[0]) * (1.0 / len(terms))
            loss.backward()
            sgd_step(state.params, _collect_grads(state.params), state.velocity, cfg)
            batch_losses.append(loss.item())
        history.append(float(np.mean(batch_losses)))
        state.epoch = epoch + 1
    return state, history


def train_stage_rvq(
    features: Sequence, k: int = 64, n_stages: int = 2, iters: int = 50, seed: int = 0
) -> RvqCodebook:
    """Stage 2: k-means codebooks over all x_h frames in the training split.

    Accepts anything carrying an `x_h` embedding sequence per element.
    """
    if not features:
        raise ValueError("empty dataset")
    data = np.concatenate([f.x_h.frames for f in features], axis=0)
    return train_rvq(data, k, n_stages=n_stages, iters=iters, seed=seed)


def rvq_to_params(cb: RvqCodebook) -> dict[str, np.ndarray]:
    return {f"rvq.stage{i}": stage for i, stage in enumerate(cb.stages)}


def rvq_from_params(ckpt: dict[str, np.ndarray]) -> RvqCodebook | None:
    keys = sorted(
        (k for k in ckpt if k.startswith("rvq.stage")), key=lambda k: int(k.rsplit("stage", 1)[1])
    )
    if not keys:
        return None
    return RvqCodebook(tuple(ckpt[k] for k in keys))


@dataclass(frozen=True)
class _Precomputed:
    aud: np.ndarray  # (1, 192) frozen auditory embedding
    sem: np.ndarray  # (n_s, d_s) semantic distortion frames
    w2v: np.ndarray  # (n_w, d_w)
    true_mos: float
    system_id: str
    utterance_id: str


def _precompute(
    features: Sequence[SampleFeatures],
    apm_params: dict[str, Tensor],
    enc_cfg: ApmEncoderConfig,
    cb: RvqCodebook,
) -> list[_Precomputed]:
    out = []
    for f in features:
        aud = encode_tensor(f.pooled, enc_cfg, apm_params).values
        sem = semantic_distortion(cb, f.x_h).frames
        out.append(_Precomputed(aud, sem, f.x_w2v.frames, f.true_mos, f.system_id, f.utterance_id))
    return out


def _forward(
    pre: _Precomputed,
    params: dict[str, Tensor],
    fus_cfg: FusionConfig,
    mode: str = "full",
    record: list[np.ndarray] | None = None,
) -> Tensor:
    proj = project_auditory(Tensor(pre.aud), fus_cfg, params)
    x = proj if mode == "pruned" else concat([proj, Tensor(pre.sem)], axis=0)
    y = fuse(x, Tensor(pre.w2v), fus_cfg, params, record=record)
    return decode_tensor(y, params)


def _validation_srcc(
    pre_val: Sequence[_Precomputed], params: dict[str, Tensor], fus_cfg: FusionConfig
) -> float:
    records = [
        PredictionRecord(p.system_id, p.utterance_id, _forward(p, params, fus_cfg).item(), p.true_mos)
        for p in pre_val
    ]
    return srcc(*system_level(records))


def train_stage_fusion(
    features: Sequence[SampleFeatures],
    frozen_ckpt: dict[str, np.ndarray],
    cfg: TrainConfig,
    enc_cfg: ApmEncoderConfig,
    fus_cfg: FusionConfig,
    epochs: int | None = None,
    val_features: Sequence[SampleFeatures] | None = None,
    dec_hidden: int = DEFAULT_HIDDEN,
    state: TrainState | None = None,
) -> tuple[TrainState, list[dict]]:
    """Stage 3: train proj/fusion/decoder against frozen apm + rvq parameters.

    With validation features given, keeps the parameters from the best
    system-level SRCC epoch and stops after `cfg.patience` epochs without
    improvement.
    """
    if not features:
        raise ValueError("empty dataset")
    apm_params = {k: Tensor(v) for k, v in frozen_ckpt.items() if k.startswith("apm.")}
    cb = rvq_from_params(frozen_ckpt)
    if not apm_params or cb is None:
        raise RuntimeError("fusion stage requires frozen 'apm.' and 'rvq.' checkpoints")
    pre_train = _precompute(features, apm_params, enc_cfg, cb)
    pre_val = _precompute(val_features, apm_params, enc_cfg, cb) if val_features else None
    epochs = cfg.epochs if epochs is None else epochs
    if state is None:
        rng = np.random.default_rng([cfg.seed, 303])
        params = init_projection_params(fus_cfg, rng)
        params.update(init_fusion_params(fus_cfg, pre_train[0].w2v.shape[1], rng))
        params.update(init_decoder_params(fus_cfg.d_s, rng, hidden=dec_hidden))
        state = TrainState(params)
    loss_cfg = cfg.loss_config()
    history: list[dict] = []
    best = (-np.inf, None, state.epoch)
    for epoch in range(state.epoch, state.epoch + epochs):
        order = np.random.default_rng([cfg.seed, 404, epoch]).permutation(len(pre_train))
        totals, ranks, regs = [], [], []
        for batch in _batches(order, cfg.batch_size):
            _zero_grads(state.params)
            preds = [_forward(pre_train[i], state.params, fus_cfg) for i in batch]
            actual = [pre_train[i].true_mos for i in batch]
            total, rank, reg = total_loss_tensor(preds, actual, loss_cfg)
            total.backward()
            sgd_step(state.params, _collect_grads(state.params), state.velocity, cfg)
            totals.append(total.item())
            ranks.append(rank.item())
            regs.append(reg.item())
        entry = {
            "epoch": epoch,
            "total": float(np.mean(totals)),
            "rank": float(np.mean(ranks)),
            "reg": float(np.mean(regs)),
        }
        state.epoch = epoch + 1
        if pre_val is not None:
            entry["val_srcc"] = _validation_srcc(pre_val, state.params, fus_cfg)
            if entry["val_srcc"] > best[0]:
                best = (entry["val_srcc"], {k: p.values.copy() for k, p in state.params.items()}, epoch)
            elif epoch - best[2] >= cfg.patience:
                history.append(entry)
                break
        history.append(entry)
    if best[1] is not None:
        for k, p in state.params.items():
            p.values = best[1][k]
    return state, history


def save_state(state: TrainState, path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Persist parameters plus optimizer state ("opt." prefix) for resuming."""
    arrays = {k: p.values for k, p in state.params.items()}
    arrays.update({f"opt.{k}": v for k, v in state.velocity.items()})
    arrays["opt.epoch"] = np.array([state.epoch], np.float64)
    if extra:
        arrays.update(extra)
    save_checkpoint(arrays, path)


def load_state(path) -> TrainState:
    raw = load_checkpoint(path)
    params = {
        k: Tensor(v, requires_grad=True)
        for k, v in raw.items()
        if not k.startswith(("opt.", "meta."))
    }
    velocity = {k[4:]: v for k, v in raw.items() if k.startswith("opt.") and k != "opt.epoch"}
    return TrainState(params, velocity, int(raw["opt.epoch"][0]))


# -- checkpoint assembly and inference ----------------------------------------


def apm_meta(scale: ErbScale, enc_cfg: ApmEncoderConfig) -> dict[str, np.ndarray]:
    """Front-end config sidecar: enough to rebuild cochlea + encoder settings."""
    return {
        "meta.scale": np.array([scale.d_f, scale.f_min_hz, scale.f_max_hz], np.float64),
        "meta.enc": np.array(
            [enc_cfg.d_f, enc_cfg.tdnn_channels, enc_cfg.attention_hidden], np.float64
        ),
    }


def config_meta(scale: ErbScale, enc_cfg: ApmEncoderConfig, fus_cfg: FusionConfig, dec_hidden: int):
    """Numeric config sidecar stored alongside parameters, so a checkpoint is
    self-describing for inference."""
    meta = apm_meta(scale, enc_cfg)
    meta["meta.fus"] = np.array(
        [fus_cfg.d_s, fus_cfg.n_a, fus_cfg.l_layers, fus_cfg.tau, fus_cfg.heads], np.float64
    )
    meta["meta.dec"] = np.array([dec_hidden], np.float64)
    return meta


def scale_from_meta(ckpt: dict[str, np.ndarray]) -> ErbScale:
    try:
        sc = ckpt["meta.scale"]
    except KeyError as exc:
        raise RuntimeError("checkpoint lacks meta.scale") from exc
    return make_erb_scale(int(sc[0]), float(sc[1]), float(sc[2]))


def enc_cfg_from_meta(ckpt: dict[str, np.ndarray]) -> ApmEncoderConfig:
    try:
        enc = ckpt["meta.enc"]
    except KeyError as exc:
        raise RuntimeError("checkpoint lacks meta.enc") from exc
    return ApmEncoderConfig(d_f=int(enc[0]), tdnn_channels=int(enc[1]), attention_hidden=int(enc[2]))


def configs_from_meta(ckpt: dict[str, np.ndarray]):
    try:
        fus = ckpt["meta.fus"]
    except KeyError as exc:
        raise RuntimeError("checkpoint lacks meta.fus") from exc
    fus_cfg = FusionConfig(
        d_s=int(fus[0]), n_a=int(fus[1]), l_layers=int(fus[2]), tau=int(fus[3]), heads=int(fus[4])
    )
    return scale_from_meta(ckpt), enc_cfg_from_meta(ckpt), fus_cfg


def merge_checkpoint(*parts: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    merged: dict[str, np.ndarray] = {}
    for part in parts:
        for k, v in part.items():
            merged[k] = v.values.copy() if isinstance(v, Tensor) else np.asarray(v).copy()
    return merged


class Predictor:
    """Frozen end-to-end model rebuilt from a merged checkpoint."""

    def __init__(self, ckpt: dict[str, np.ndarray]):
        self.scale, self.enc_cfg, self.fus_cfg = configs_from_meta(ckpt)
        self.params = {
            k: Tensor(v) for k, v in ckpt.items() if not k.startswith(("meta.", "opt.", "rvq."))
        }
        self.codebook = rvq_from_params(ckpt)

    def embed(self, w: Waveform) -> np.ndarray:
        pooled = pool_to_40hz(cochleagram(w, self.scale))
        return encode_tensor(pooled, self.enc_cfg, self.params).values

    def predict_arrays(
        self,
        aud: np.ndarray,
        x_w2v: EmbeddingSequence,
        x_h: EmbeddingSequence | None = None,
        mode: str = "pruned",
        record: list[np.ndarray] | None = None,
    ) -> float:
        if mode not in ("full", "pruned"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "full":
            if x_h is None:
                raise ValueError("full mode requires x_h")
            if self.codebook is None:
                raise ValueError("full mode requires rvq codebooks in the checkpoint")
            sem = semantic_distortion(self.codebook, x_h).frames
        else:
            sem = None
        proj = project_auditory(Tensor(aud), self.fus_cfg, self.params)
        x = proj if sem is None else concat([proj, Tensor(sem)], axis=0)
        y = fuse(x, Tensor(x_w2v.frames), self.fus_cfg, self.params, record=record)
        return decode(y, self.params)

    def predict(
        self,
        w: Waveform,
        x_w2v: EmbeddingSequence,
        x_h: EmbeddingSequence | None = None,
        mode: str = "pruned",
        record: list[np.ndarray] | None = None,
    ) -> float:
        return self.predict_arrays(self.embed(w), x_w2v, x_h, mode, record)

    def predict_features(
        self, f: SampleFeatures, mode: str = "pruned", record: list[np.ndarray] | None = None
    ) -> float:
        aud = encode_tensor(f.pooled, self.enc_cfg, self.params).values
        return self.predict_arrays(aud, f.x_w2v, f.x_h, mode, record)


def predict(
    w: Waveform,
    x_w2v: EmbeddingSequence,
    ckpt: dict[str, np.ndarray],
    mode: str = "pruned",
    x_h: EmbeddingSequence | None = None,
    record: list[np.ndarray] | None = None,
) -> float:
    return Predictor(ckpt).predict(w, x_w2v, x_h, mode, record)


def evaluate_features(
    features: Sequence[SampleFeatures], predictor: Predictor, mode: str = "pruned"
) -> list[PredictionRecord]:
    return [
        PredictionRecord(f.system_id, f.utterance_id, predictor.predict_features(f, mode), f.true_mos)
        for f in features
    ]


def evaluate_apm_only(
    features: Sequence[SampleFeatures], params: dict[str, Tensor], enc_cfg: ApmEncoderConfig
) -> list[PredictionRecord]:
    """Ablation baseline: stage-1 encoder + its private head, no fusion."""
    out = []
    for f in features:
        emb = encode_tensor(f.pooled, enc_cfg, params)
        pred = float(decode(emb, params, prefix=APM_HEAD_PREFIX))
        out.append(PredictionRecord(f.system_id, f.utterance_id, pred, f.true_mos))
    return out


def _jitter(params: dict[str, Tensor], rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move parameters to a generic point before finite-difference checks.

    Zero-initialized biases can put boundary-padded relu inputs exactly on
    the kink, where the analytic subgradient and the central difference
    legitimately disagree; the check is only meaningful where the loss is
    differentiable.
    """
    for p in params.values():
        p.values = p.values + scale * rng.standard_normal(p.values.shape)


def gradcheck_suite(seed: int = 0, instances: int = 1, max_coords: int = 40) -> dict[str, float]:
    """Finite-difference check of every trainable component on tiny random
    instances; returns the worst relative error seen per component."""
    rng = np.random.default_rng([seed, 606])
    worst = {k: 0.0 for k in ("encoder", "projection", "fusion", "decoder", "end_to_end")}
    enc_cfg = ApmEncoderConfig(d_f=5, tdnn_channels=6, attention_hidden=4)
    fus_cfg = FusionConfig(d_s=6, n_a=3, l_layers=2, tau=2)
    for _ in range(instances):
        enc_params = init_encoder_params(enc_cfg, rng)
        _jitter(enc_params, rng)
        frames = rng.standard_normal((7, 5))
        probe = Tensor(rng.standard_normal((1, 192)))

        def enc_loss():
            return (encode_tensor(frames, enc_cfg, enc_params) * probe).sum()

        worst["encoder"] = max(
            worst["encoder"],
            finite_difference_check(enc_loss, list(enc_params.values()), rng, max_coords=max_coords),
        )

        proj_params = init_projection_params(fus_cfg, rng)
        _jitter(proj_params, rng)
        aud = rng.standard_normal((1, 192))
        probe_p = Tensor(rng.standard_normal((fus_cfg.n_a, fus_cfg.d_s)))

        def proj_loss():
            return (project_auditory(Tensor(aud), fus_cfg, proj_params) * probe_p).sum()

        worst["projection"] = max(
            worst["projection"],
            finite_difference_check(proj_loss, list(proj_params.values()), rng, max_coords=max_coords),
        )

        fus_params = init_fusion_params(fus_cfg, 4, rng)
        _jitter(fus_params, rng)
        x_uni = rng.standard_normal((fus_cfg.n_a + 5, fus_cfg.d_s))
        w2v = rng.standard_normal((9, 4))
        probe_f = Tensor(rng.standard_normal(x_uni.shape))

        def fus_loss():
            return (fuse(Tensor(x_uni), Tensor(w2v), fus_cfg, fus_params) * probe_f).sum()

        worst["fusion"] = max(
            worst["fusion"],
            finite_difference_check(fus_loss, list(fus_params.values()), rng, max_coords=max_coords),
        )

        dec_params = init_decoder_params(fus_cfg.d_s, rng, hidden=5)
        _jitter(dec_params, rng)
        y = rng.standard_normal((6, fus_cfg.d_s))

        def dec_loss():
            return decode_tensor(Tensor(y), dec_params)

        worst["decoder"] = max(
            worst["decoder"],
            finite_difference_check(dec_loss, list(dec_params.values()), rng, max_coords=max_coords),
        )

        e2e_params = dict(proj_params)
        e2e_params.update(fus_params)
        e2e_params.update(dec_params)
        pres = [
            _Precomputed(
                rng.standard_normal((1, 192)),
                rng.standard_normal((5, fus_cfg.d_s)),
                rng.standard_normal((9, 4)),
                float(rng.uniform(1.5, 4.5)),
                "s",
                "u",
            )
            for _ in range(3)
        ]
        actual = [p.true_mos for p in pres]

        def e2e_loss():
            preds = [_forward(p, e2e_params, fus_cfg) for p in pres]
            return total_loss_tensor(preds, actual)[0]

        worst["end_to_end"] = max(
            worst["end_to_end"],
            finite_difference_check(e2e_loss, list(e2e_params.values()), rng, max_coords=max_coords),
        )
    return worst


def fusion_workload(n_rows: int, n_kv: int, d_w: int, cfg: FusionConfig, dec_hidden: int) -> int:
    """Multiply count of fuse + decode, for comparing full vs pruned inference."""
    per_layer = (
        n_rows * cfg.d_s * cfg.d_s
        + 2 * n_kv * d_w * cfg.d_s
        + 2 * n_rows * n_kv * cfg.d_s
    )
    decoder = n_rows * (cfg.d_s * dec_hidden + dec_hidden)
    return cfg.l_layers * per_layer + decoder
