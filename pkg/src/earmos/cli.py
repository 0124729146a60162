"""Command-line front end: one binary, one subcommand per pipeline step.

The training commands share a deterministic per-system utterance split keyed
by --seed, so `train-apm`, `train-rvq`, and `train-fusion` see the same train
partition when invoked with the same seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from earmos.audio import load_wav, resample
from earmos.cochlea import cochleagram, make_erb_scale, save_cochleagram
from earmos.embeddings import load_embedding, load_manifest, save_dataset, synth_dataset
from earmos.encoder import ApmEncoderConfig
from earmos.fusion import FusionConfig, dump_attention
from earmos.metrics import metrics_report, read_predictions_csv
from earmos.numerics import load_checkpoint, save_checkpoint
from earmos.training import (
    Predictor,
    TrainConfig,
    apm_meta,
    config_meta,
    enc_cfg_from_meta,
    extract_features,
    gradcheck_suite,
    merge_checkpoint,
    rvq_to_params,
    save_state,
    scale_from_meta,
    split_dataset,
    train_stage_apm,
    train_stage_fusion,
    train_stage_rvq,
)

TRAIN_CONFIG_CASTS = {
    "lr": float,
    "momentum": float,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "alpha": float,
    "beta": float,
    "patience": int,
}


def parse_config(path) -> dict[str, str]:
    """Line-oriented `key = value` file; blank lines and # comments ignored."""
    conf = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        conf[key.strip()] = value.strip()
    return conf


def _train_config(args) -> TrainConfig:
    fields = {}
    if args.config:
        for key, value in parse_config(args.config).items():
            if key not in TRAIN_CONFIG_CASTS:
                raise ValueError(f"unknown config key {key!r}")
            fields[key] = TRAIN_CONFIG_CASTS[key](value)
    if args.seed is not None:
        fields["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        fields["epochs"] = args.epochs
    return TrainConfig(**fields)


def _load_16k(path):
    w = load_wav(path)
    return w if w.sample_rate_hz == 16000 else resample(w, 16000)


def cmd_cochleagram(args) -> int:
    w = load_wav(args.wav)
    scale = make_erb_scale(args.channels, args.f_min, args.f_max, w.sample_rate_hz)
    c = cochleagram(w, scale)
    save_cochleagram(c, args.out)
    print(f"wrote {args.out}: {c.data.shape[0]} x {c.data.shape[1]}")
    return 0


def cmd_synth_data(args) -> int:
    samples = synth_dataset(args.systems, args.utts, args.seed if args.seed is not None else 7)
    manifest = save_dataset(samples, args.outdir)
    print(f"wrote {len(samples)} samples, manifest {manifest}")
    return 0


def cmd_train_apm(args) -> int:
    cfg = _train_config(args)
    samples = load_manifest(args.manifest)
    train, _, _ = split_dataset(samples, cfg.seed)
    scale = make_erb_scale(args.channels, sample_rate_hz=16000)
    feats = extract_features(train, scale)
    enc_cfg = ApmEncoderConfig(
        d_f=args.channels, tdnn_channels=args.tdnn_channels, attention_hidden=args.attention_hidden
    )
    state, history = train_stage_apm(feats, cfg, enc_cfg, head_hidden=args.head_hidden)
    save_state(state, args.out, extra=apm_meta(scale, enc_cfg))
    print(f"trained {state.epoch} epochs, final loss {history[-1]:.4f}, wrote {args.out}")
    return 0


def cmd_train_rvq(args) -> int:
    seed = args.seed if args.seed is not None else 0
    samples = load_manifest(args.manifest)
    train, _, _ = split_dataset(samples, seed)
    cb = train_stage_rvq(train, k=args.codebook_size, n_stages=args.stages, seed=seed)
    save_checkpoint(rvq_to_params(cb), args.out)
    print(f"trained {len(cb.stages)} stages of {args.codebook_size} centroids, wrote {args.out}")
    return 0


def cmd_train_fusion(args) -> int:
    cfg = _train_config(args)
    samples = load_manifest(args.manifest)
    train, val, _ = split_dataset(samples, cfg.seed)
    apm_raw = load_checkpoint(args.apm)
    rvq_raw = load_checkpoint(args.rvq)
    scale = scale_from_meta(apm_raw)
    enc_cfg = enc_cfg_from_meta(apm_raw)
    frozen = {k: v for k, v in apm_raw.items() if k.startswith("apm.")}
    frozen.update({k: v for k, v in rvq_raw.items() if k.startswith("rvq.")})
    fus_cfg = FusionConfig(
        d_s=train[0].x_h.dim, l_layers=args.layers, tau=args.tau, heads=args.heads
    )
    feats_train = extract_features(train, scale)
    feats_val = extract_features(val, scale) if val else None
    state, history = train_stage_fusion(
        feats_train, frozen, cfg, enc_cfg, fus_cfg,
        val_features=feats_val, dec_hidden=args.dec_hidden,
    )
    final = merge_checkpoint(frozen, state.params, config_meta(scale, enc_cfg, fus_cfg, args.dec_hidden))
    save_checkpoint(final, args.out)
    last = history[-1]
    best_val = max((h.get("val_srcc", float("-inf")) for h in history), default=None)
    tail = f", best val srcc {best_val:.4f}" if feats_val else ""
    print(f"trained {len(history)} epochs, final loss {last['total']:.4f}{tail}, wrote {args.out}")
    return 0


def cmd_predict(args) -> int:
    w = _load_16k(args.wav)
    x_w2v = load_embedding(args.w2v)
    x_h = load_embedding(args.h) if args.h else None
    predictor = Predictor(load_checkpoint(args.checkpoint))
    print(f"{predictor.predict(w, x_w2v, x_h, mode=args.mode):.4f}")
    return 0


def cmd_evaluate(args) -> int:
    records = read_predictions_csv(args.predictions)
    print(metrics_report(records, args.format))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(args.seed if args.seed is not None else 0, instances=args.instances)
    failed = False
    for name, err in results.items():
        ok = err < 1e-4
        failed |= not ok
        print(f"{name:<12} rel_err {err:.3e}  {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_dump_attention(args) -> int:
    w = _load_16k(args.wav)
    x_w2v = load_embedding(args.w2v)
    x_h = load_embedding(args.h) if args.h else None
    predictor = Predictor(load_checkpoint(args.checkpoint))
    record: list = []
    predictor.predict(w, x_w2v, x_h, mode=args.mode, record=record)
    lines = ["layer,query_index,key_index,weight"] + dump_attention(record)
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(lines) - 1} rows to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="key = value overrides for training settings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="earmos", description="Auditory-guided MOS prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cochleagram", help="waveform to cochleagram file")
    p.add_argument("wav")
    p.add_argument("out")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--f-min", type=float, default=20.0)
    p.add_argument("--f-max", type=float, default=None)
    p.set_defaults(fn=cmd_cochleagram)

    p = sub.add_parser("synth-data", help="generate the synthetic MOS corpus")
    p.add_argument("outdir")
    p.add_argument("--systems", type=int, default=24)
    p.add_argument("--utts", type=int, default=15)
    _add_common(p)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train-apm", help="stage 1: train the auditory encoder")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--channels", type=int, default=24)
    p.add_argument("--tdnn-channels", type=int, default=48)
    p.add_argument("--attention-hidden", type=int, default=32)
    p.add_argument("--head-hidden", type=int, default=64)
    _add_common(p)
    p.set_defaults(fn=cmd_train_apm)

    p = sub.add_parser("train-rvq", help="stage 2: fit residual codebooks")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--codebook-size", type=int, default=64)
    p.add_argument("--stages", type=int, default=2)
    _add_common(p)
    p.set_defaults(fn=cmd_train_rvq)

    p = sub.add_parser("train-fusion", help="stage 3: train fusion + decoder")
    p.add_argument("manifest")
    p.add_argument("--apm", required=True, help="state file from train-apm")
    p.add_argument("--rvq", required=True, help="checkpoint from train-rvq")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--tau", type=int, default=10)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--dec-hidden", type=int, default=64)
    _add_common(p)
    p.set_defaults(fn=cmd_train_fusion)

    p = sub.add_parser("predict", help="predict MOS for one utterance")
    p.add_argument("wav")
    p.add_argument("--w2v", required=True, help="embedding file for the key/value sequence")
    p.add_argument("--h", default=None, help="embedding file for semantic rows (full mode)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("full", "pruned"), default="pruned")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics from a predictions CSV")
    p.add_argument("predictions")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all modules")
    p.add_argument("--instances", type=int, default=1)
    _add_common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("dump-attention", help="export cross-attention weights as CSV")
    p.add_argument("wav")
    p.add_argument("--w2v", required=True)
    p.add_argument("--h", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("full", "pruned"), default="full")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_dump_attention)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
