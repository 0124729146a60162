"""Three-stage cochlear transduction.

The stages mirror inner-ear physiology: ERB-spaced gammatone filtering for
basilar-membrane frequency selectivity, half-wave rectification for the
unidirectional gating of hair-cell transduction channels, and gain-compensated
cube-root compression for the mechanical-to-electrical nonlinearity. Outer
hair cell active amplification is intentionally omitted; the 3x gain of the
compression stage compensates.

Filters are realized as truncated FIR kernels sampled directly from the
gammatone impulse response and normalized to unit gain at their center
frequency, so channel energies are directly comparable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from earmos.audio import Waveform
from earmos.errors import FormatError

EAR_Q = 9.26449
MIN_BANDWIDTH_HZ = 24.7
BANDWIDTH_SCALE = 1.019  # gammatone bandwidth factor matching physiology

DEFAULT_CHANNELS = 64
DEFAULT_F_MIN_HZ = 20.0
DEFAULT_KERNEL_LEN = 1024  # 64 ms at 16 kHz

COCHLEAGRAM_MAGIC = b"APGC"
COCHLEAGRAM_VERSION = 1


def erb_bandwidth(f_hz: float) -> float:
    """Equivalent rectangular bandwidth of the auditory filter at f_hz."""
    if f_hz < 0:
        raise ValueError(f"frequency must be non-negative, got {f_hz}")
    return MIN_BANDWIDTH_HZ + f_hz / EAR_Q


def erb_rate(f_hz: float) -> float:
    """Perceptual frequency coordinate: the integral of 1/ERB(f) from 0 to f."""
    return EAR_Q * np.log(1.0 + f_hz / (MIN_BANDWIDTH_HZ * EAR_Q))


def erb_rate_inverse(rate: float) -> float:
    return (np.exp(rate / EAR_Q) - 1.0) * MIN_BANDWIDTH_HZ * EAR_Q


@dataclass(frozen=True)
class ErbScale:
    """Center frequencies equally spaced on the ERB-rate axis."""

    d_f: int
    f_min_hz: float
    f_max_hz: float
    centers: np.ndarray

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        object.__setattr__(self, "centers", centers)
        if centers.size != self.d_f:
            raise ValueError("center count does not match d_f")
        if np.any(np.diff(centers) <= 0):
            raise ValueError("centers must be strictly increasing")


def make_erb_scale(
    d_f: int = DEFAULT_CHANNELS,
    f_min_hz: float = DEFAULT_F_MIN_HZ,
    f_max_hz: float | None = None,
    sample_rate_hz: int = 16000,
) -> ErbScale:
    """Build a d_f-channel scale between f_min_hz and f_max_hz.

    f_max_hz defaults to min(20 kHz, 0.45 * sample rate) to stay clear of
    Nyquist.
    """
    if f_max_hz is None:
        f_max_hz = min(20000.0, 0.45 * sample_rate_hz)
    if d_f < 2:
        raise ValueError(f"d_f must be at least 2, got {d_f}")
    if not 0 < f_min_hz < f_max_hz:
        raise ValueError(f"need 0 < f_min < f_max, got ({f_min_hz}, {f_max_hz})")
    rates = np.linspace(erb_rate(f_min_hz), erb_rate(f_max_hz), d_f)
    centers = erb_rate_inverse(rates)
    centers[0] = f_min_hz  # pin endpoints exactly
    centers[-1] = f_max_hz
    return ErbScale(d_f, f_min_hz, f_max_hz, centers)


def gammatone_response(f_hz: float, b: float, t_s) -> np.ndarray:
    """Unnormalized gammatone impulse response t^3 e^(-2 pi b ERB(f) t) cos(2 pi f t)."""
    t = np.asarray(t_s, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("gammatone response is causal; t must be >= 0")
    envelope = t**3 * np.exp(-2.0 * np.pi * b * erb_bandwidth(f_hz) * t)
    return envelope * np.cos(2.0 * np.pi * f_hz * t)


@dataclass(frozen=True)
class GammatoneFilterbank:
    """FIR gammatone kernels, one per channel, unit gain at each center frequency."""

    scale: ErbScale
    sample_rate_hz: int
    kernel_len_samples: int
    kernels: np.ndarray  # (d_f, kernel_len)
    b: float = BANDWIDTH_SCALE


def build_filterbank(
    scale: ErbScale,
    sample_rate_hz: int = 16000,
    kernel_len_samples: int = DEFAULT_KERNEL_LEN,
    b: float = BANDWIDTH_SCALE,
) -> GammatoneFilterbank:
    t = np.arange(kernel_len_samples) / sample_rate_hz
    kernels = np.empty((scale.d_f, kernel_len_samples))
    for c, f in enumerate(scale.centers):
        kernel = gammatone_response(f, b, t)
        # gain of the truncated kernel evaluated exactly at its center frequency
        phase = np.exp(-2j * np.pi * f * t)
        gain = np.abs(np.dot(kernel, phase))
        kernels[c] = kernel / gain
    return GammatoneFilterbank(scale, sample_rate_hz, kernel_len_samples, kernels, b)


@dataclass(frozen=True)
class Cochleagram:
    """Non-negative (n_samples, d_f) matrix of simulated inner-hair-cell output."""

    data: np.ndarray
    sample_rate_hz: int
    scale: ErbScale

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 2:
            raise ValueError("cochleagram data must be a matrix")
        if data.size and (not np.all(np.isfinite(data)) or np.any(data < 0)):
            raise ValueError("cochleagram entries must be finite and non-negative")


def apply_filterbank(w: Waveform, fb: GammatoneFilterbank) -> np.ndarray:
    """Convolve each channel's kernel with the signal, causal alignment.

    Output row n is the filter response at input sample n (zero-padded edges),
    truncated to the input length so downstream pooling arithmetic sees N rows.
    """
    if w.sample_rate_hz != fb.sample_rate_hz:
        raise ValueError(
            f"waveform rate {w.sample_rate_hz} != filterbank rate {fb.sample_rate_hz}"
        )
    n = w.samples.size
    out = np.empty((n, fb.scale.d_f))
    for c in range(fb.scale.d_f):
        out[:, c] = fftconvolve(w.samples, fb.kernels[c], mode="full")[:n]
    return out


def rectify(x_gamma: np.ndarray) -> np.ndarray:
    """Half-wave rectification: elementwise max(0, x)."""
    x = np.asarray(x_gamma, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("rectify requires finite input")
    return np.maximum(0.0, x)


def compress(x_rec: np.ndarray, sample_rate_hz: int = 16000, scale: ErbScale | None = None):
    """Gain-compensated cube-root compression, 3 * x^(1/3), of rectified output."""
    x = np.asarray(x_rec, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("compress requires non-negative input (rectify first)")
    data = 3.0 * np.cbrt(x)
    if scale is None:
        return data
    return Cochleagram(data, sample_rate_hz, scale)


def cochleagram(
    w: Waveform,
    scale: ErbScale | None = None,
    kernel_len_samples: int = DEFAULT_KERNEL_LEN,
) -> Cochleagram:
    """Full transduction: filterbank, rectification, compression."""
    if scale is None:
        scale = make_erb_scale(sample_rate_hz=w.sample_rate_hz)
    fb = build_filterbank(scale, w.sample_rate_hz, kernel_len_samples)
    x_gamma = apply_filterbank(w, fb)
    data = compress(rectify(x_gamma))
    return Cochleagram(data, w.sample_rate_hz, scale)


def save_cochleagram(c: Cochleagram, path) -> None:
    """Serialize as magic, u32 version, u32 n_frames, u32 d_f, f32 LE row-major."""
    n_frames, d_f = c.data.shape
    header = COCHLEAGRAM_MAGIC + struct.pack("<III", COCHLEAGRAM_VERSION, n_frames, d_f)
    Path(path).write_bytes(header + c.data.astype("<f4").tobytes())


def load_cochleagram_matrix(path) -> np.ndarray:
    """Read back just the (n_frames, d_f) matrix of a serialized cochleagram."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != COCHLEAGRAM_MAGIC:
        raise FormatError("not a cochleagram file (bad magic)")
    version, n_frames, d_f = struct.unpack_from("<III", data, 4)
    if version != COCHLEAGRAM_VERSION:
        raise FormatError(f"unsupported cochleagram version {version}")
    values = np.frombuffer(data, dtype="<f4", offset=16)
    if values.size != n_frames * d_f:
        raise FormatError("cochleagram payload size mismatch")
    return values.astype(np.float64).reshape(n_frames, d_f)
