"""PCM ingestion: RIFF/WAVE parsing, normalization, and band-limited resampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from earmos.errors import FormatError, UnsupportedFormatError

_FORMAT_PCM = 1
_FORMAT_IEEE_FLOAT = 3

# Windowed-sinc resampler geometry: 64 taps per output sample (32 either side
# of the interpolation point), Blackman window.
RESAMPLE_TAPS = 64
_HALF = RESAMPLE_TAPS // 2


@dataclass(frozen=True)
class Waveform:
    """Mono audio with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if self.samples.ndim != 1:
            raise ValueError("Waveform samples must be one-dimensional")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("Waveform samples must be finite")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


def _parse_chunks(data: bytes) -> dict[bytes, tuple[int, int]]:
    """Map chunk id -> (offset, size) for the chunks of a RIFF body."""
    chunks = {}
    offset = 12
    while offset + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, offset)
        offset += 8
        if cid not in chunks:
            chunks[cid] = (offset, size)
        offset += size + (size & 1)  # chunks are word-aligned
    return chunks


def load_wav(path) -> Waveform:
    """Read a RIFF/WAVE file (PCM 16-bit or IEEE float 32-bit) as mono.

    Multichannel content is collapsed by arithmetic mean. Integer PCM is
    scaled by 1/32768; float samples are clipped to [-1, 1].
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    chunks = _parse_chunks(data)
    if b"fmt " not in chunks or b"data" not in chunks:
        raise FormatError(f"{path}: missing fmt or data chunk")

    fmt_off, fmt_size = chunks[b"fmt "]
    if fmt_size < 16 or fmt_off + 16 > len(data):
        raise FormatError(f"{path}: truncated fmt chunk")
    audio_format, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", data, fmt_off)
    if channels < 1 or rate < 1:
        raise FormatError(f"{path}: invalid channel count or sample rate")

    if audio_format == _FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif audio_format == _FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedFormatError(
            f"{path}: unsupported encoding (format={audio_format}, bits={bits})"
        )

    data_off, data_size = chunks[b"data"]
    if data_off + data_size > len(data):
        raise FormatError(f"{path}: truncated data chunk")
    frame_bytes = channels * dtype.itemsize
    if data_size % frame_bytes:
        raise FormatError(f"{path}: data chunk is not a whole number of frames")

    raw = np.frombuffer(data, dtype=dtype, count=data_size // dtype.itemsize, offset=data_off)
    samples = raw.astype(np.float64) * scale
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
    if samples.size:
        samples = np.clip(samples, -1.0, 1.0)
    return Waveform(samples, int(rate))


def write_wav(path, w: Waveform) -> None:
    """Write mono IEEE float 32-bit WAVE (used by the synthetic-data exporter)."""
    payload = w.samples.astype("<f4").tobytes()
    rate = w.sample_rate_hz
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        _FORMAT_IEEE_FLOAT,
        1,
        rate,
        rate * 4,
        4,
        32,
        b"data",
        len(payload),
    )
    Path(path).write_bytes(header + payload)


def _sinc_kernel(frac_offsets: np.ndarray, cutoff: float) -> np.ndarray:
    """Blackman-windowed sinc taps evaluated at `frac_offsets` input samples."""
    u = frac_offsets
    taps = cutoff * np.sinc(cutoff * u)
    x = u / _HALF  # window support is [-1, 1]
    window = np.where(
        np.abs(x) <= 1.0,
        0.42 + 0.5 * np.cos(np.pi * x) + 0.08 * np.cos(2.0 * np.pi * x),
        0.0,
    )
    return taps * window


def resample(w: Waveform, target_hz: int) -> Waveform:
    """Band-limited resampling via a 64-tap Blackman-windowed sinc per phase.

    Output length is round(n * target/source), i.e. duration is preserved to
    within one sample. Edges are zero-padded; amplitudes are clamped back to
    [-1, 1] afterwards to absorb interpolation overshoot.
    """
    if target_hz <= 0:
        raise ValueError(f"target_hz must be positive, got {target_hz}")
    if target_hz == w.sample_rate_hz:
        return Waveform(w.samples.copy(), target_hz)
    n_in = w.samples.size
    n_out = int(round(n_in * target_hz / w.sample_rate_hz))
    if n_in == 0 or n_out == 0:
        return Waveform(np.zeros(0), target_hz)

    step = w.sample_rate_hz / target_hz  # input samples per output sample
    cutoff = min(1.0, target_hz / w.sample_rate_hz)  # of input Nyquist
    t = np.arange(n_out) * step
    base = np.floor(t).astype(np.int64)
    # 64 input indices bracketing each interpolation point
    offsets = np.arange(-_HALF + 1, _HALF + 1)
    idx = base[:, None] + offsets[None, :]
    weights = _sinc_kernel(t[:, None] - idx, cutoff)
    valid = (idx >= 0) & (idx < n_in)
    gathered = np.where(valid, w.samples[np.clip(idx, 0, n_in - 1)], 0.0)
    out = np.sum(gathered * weights, axis=1)
    return Waveform(np.clip(out, -1.0, 1.0), target_hz)
