"""Embedding-sequence file I/O and the synthetic desk-scale dataset.

Real SSL backbones are out of scope; their outputs enter the pipeline either
from ``APGE`` files computed elsewhere or from the synthetic generator below.
Synthetic embeddings are framed log-energy filterbank features of a degraded
harmonic signal, so embedding distortion correlates with the latent quality
score by construction. That substitution is the point: the toolkit's
acceptance rests on pipeline mechanics, not SSL quality.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from earmos.audio import Waveform, load_wav, write_wav
from earmos.cochlea import erb_rate
from earmos.errors import FormatError
from earmos.rvq import EmbeddingSequence

EMBEDDING_MAGIC = b"APGE"
EMBEDDING_VERSION = 1

DEFAULT_FRAME_RATE_HZ = 50.0
DEFAULT_H_DIM = 24
DEFAULT_W2V_DIM = 32

MANIFEST_FIELDS = ["system_id", "utterance_id", "wav_path", "h_path", "w2v_path", "true_mos"]


def write_embedding(seq: EmbeddingSequence, path) -> None:
    n_frames, dim = seq.frames.shape
    header = EMBEDDING_MAGIC + struct.pack(
        "<IIIf", EMBEDDING_VERSION, n_frames, dim, seq.frame_rate_hz
    )
    Path(path).write_bytes(header + seq.frames.astype("<f4").tobytes())


def load_embedding(path) -> EmbeddingSequence:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: not an embedding file (bad magic)")
    version, n_frames, dim, frame_rate = struct.unpack_from("<IIIf", data, 4)
    if version != EMBEDDING_VERSION:
        raise FormatError(f"{path}: unsupported embedding version {version}")
    values = np.frombuffer(data, dtype="<f4", offset=20)
    if values.size != n_frames * dim:
        raise FormatError(f"{path}: payload length mismatch")
    return EmbeddingSequence(values.astype(np.float64).reshape(n_frames, dim), float(frame_rate))


@dataclass(frozen=True)
class SyntheticSample:
    waveform: Waveform
    x_h: EmbeddingSequence
    x_w2v: EmbeddingSequence
    true_mos: float
    system_id: str
    utterance_id: str

    def __post_init__(self):
        if not 1.0 <= self.true_mos <= 5.0:
            raise ValueError(f"true_mos out of [1, 5]: {self.true_mos}")


def noise_level(quality: float) -> float:
    """Additive white-noise sigma; strictly decreasing in the quality score."""
    return 0.25 * np.exp(-(quality - 1.2) / 1.2)


def smear_strength(quality: float) -> float:
    """Relative energy of the random smearing tail; decreasing in quality."""
    return 0.9 * (4.8 - quality) / 3.6


def spectral_features(
    w: Waveform,
    dim: int,
    frame_rate_hz: float = DEFAULT_FRAME_RATE_HZ,
    f_lo: float = 50.0,
    f_hi: float = 7800.0,
) -> EmbeddingSequence:
    """Log-energy features in `dim` ERB-rate-spaced bands at `frame_rate_hz`.

    Frames are 2x-overlapped Hann windows centered on a uniform grid, so a
    1 s signal yields exactly frame_rate_hz frames.
    """
    hop = int(round(w.sample_rate_hz / frame_rate_hz))
    frame_len = 2 * hop
    n = w.samples.size
    n_frames = max(1, n // hop)
    padded = np.concatenate([np.zeros(hop // 2), w.samples, np.zeros(frame_len)])
    window = np.hanning(frame_len)
    frames = np.stack([padded[t * hop : t * hop + frame_len] * window for t in range(n_frames)])
    spectra = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    freqs = np.fft.rfftfreq(frame_len, 1.0 / w.sample_rate_hz)

    lo, hi = erb_rate(f_lo), erb_rate(f_hi)
    band = np.floor(dim * (erb_rate(freqs) - lo) / (hi - lo)).astype(int)
    energies = np.zeros((n_frames, dim))
    for b in range(dim):
        cols = band == b
        if np.any(cols):
            energies[:, b] = spectra[:, cols].sum(axis=1)
    return EmbeddingSequence(np.log(energies + 1e-8), frame_rate_hz)


def _render_utterance(
    quality: float, rng: np.random.Generator, n: int, sample_rate: int
) -> Waveform:
    """Harmonic tone complex degraded by quality-dependent smearing and noise."""
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(100.0, 250.0)
    phases = rng.uniform(0.0, 2.0 * np.pi, 8)
    clean = np.zeros(n)
    for k in range(1, 9):
        clean += np.sin(2.0 * np.pi * k * f0 * t + phases[k - 1]) / k
    clean *= 0.3 / np.max(np.abs(clean))

    kernel = np.zeros(41)
    kernel[0] = 1.0
    kernel[1:] = smear_strength(quality) * np.exp(-np.arange(1, 41) / 8.0) * rng.standard_normal(40)
    kernel /= np.linalg.norm(kernel)
    degraded = np.convolve(clean, kernel)[:n]
    degraded += noise_level(quality) * rng.standard_normal(n)
    return Waveform(np.clip(degraded, -1.0, 1.0), sample_rate)


def synth_dataset(
    n_systems: int,
    utts_per_system: int,
    seed: int,
    duration_s: float = 1.0,
    sample_rate: int = 16000,
    h_dim: int = DEFAULT_H_DIM,
    w2v_dim: int = DEFAULT_W2V_DIM,
) -> list[SyntheticSample]:
    """Deterministic synthetic MOS corpus.

    Each system gets a latent quality uniform in [1.2, 4.8]; each utterance is
    independently rendered and annotated with true_mos = quality plus uniform
    rater noise in [-0.15, 0.15], clamped to [1, 5]. Per-utterance RNG streams
    are derived from (seed, system, utterance) so generation could be
    parallelized without changing the output.
    """
    if n_systems < 2:
        raise ValueError("need at least 2 systems")
    if utts_per_system < 1:
        raise ValueError("need at least 1 utterance per system")
    n = int(round(duration_s * sample_rate))
    qualities = np.random.default_rng([seed, 7919]).uniform(1.2, 4.8, n_systems)
    samples = []
    for s in range(n_systems):
        for u in range(utts_per_system):
            rng = np.random.default_rng([seed, s, u])
            w = _render_utterance(qualities[s], rng, n, sample_rate)
            mos = float(np.clip(qualities[s] + rng.uniform(-0.15, 0.15), 1.0, 5.0))
            samples.append(
                SyntheticSample(
                    waveform=w,
                    x_h=spectral_features(w, h_dim),
                    x_w2v=spectral_features(w, w2v_dim),
                    true_mos=mos,
                    system_id=f"sys{s:03d}",
                    utterance_id=f"utt{u:03d}",
                )
            )
    return samples


def save_dataset(samples: list[SyntheticSample], outdir) -> Path:
    """Write wav + embedding files plus a manifest CSV; returns the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = outdir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for sample in samples:
            stem = f"{sample.system_id}-{sample.utterance_id}"
            wav_path = outdir / f"{stem}.wav"
            h_path = outdir / f"{stem}.h.apge"
            w2v_path = outdir / f"{stem}.w2v.apge"
            write_wav(wav_path, sample.waveform)
            write_embedding(sample.x_h, h_path)
            write_embedding(sample.x_w2v, w2v_path)
            writer.writerow(
                {
                    "system_id": sample.system_id,
                    "utterance_id": sample.utterance_id,
                    "wav_path": wav_path.name,
                    "h_path": h_path.name,
                    "w2v_path": w2v_path.name,
                    "true_mos": f"{sample.true_mos:.6f}",
                }
            )
    return manifest


def load_manifest(manifest_path) -> list[SyntheticSample]:
    """Read a dataset back from a manifest CSV (paths relative to the manifest)."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    samples = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise FormatError(f"{manifest_path}: unexpected manifest header {reader.fieldnames}")
        for row in reader:
            samples.append(
                SyntheticSample(
                    waveform=load_wav(base / row["wav_path"]),
                    x_h=load_embedding(base / row["h_path"]),
                    x_w2v=load_embedding(base / row["w2v_path"]),
                    true_mos=float(row["true_mos"]),
                    system_id=row["system_id"],
                    utterance_id=row["utterance_id"],
                )
            )
    return samples
