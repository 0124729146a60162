"""Cochlear front end: ERB arithmetic against hand values, filterbank
frequency selectivity against DFT oracles, serialization stability."""

import time
from pathlib import Path

import numpy as np
import pytest

from earmos.audio import Waveform
from earmos.cochlea import (
    Cochleagram,
    ErbScale,
    apply_filterbank,
    build_filterbank,
    cochleagram,
    compress,
    erb_bandwidth,
    erb_rate,
    erb_rate_inverse,
    gammatone_response,
    load_cochleagram_matrix,
    make_erb_scale,
    rectify,
    save_cochleagram,
)
from earmos.errors import FormatError

GOLDEN = Path(__file__).parent / "data" / "golden_cochleagram.apgc"


def seeded_noise(n=1600, rate=16000) -> Waveform:
    rng = np.random.default_rng(42)
    return Waveform(np.clip(rng.standard_normal(n) * 0.2, -1.0, 1.0), rate)


def test_erb_bandwidth_hand_values():
    assert erb_bandwidth(0.0) == 24.7
    assert abs(erb_bandwidth(1000.0) - 132.63902308707765) < 1e-9
    with pytest.raises(ValueError):
        erb_bandwidth(-1.0)


def test_erb_rate_hand_values():
    assert erb_rate(0.0) == 0.0
    assert abs(erb_rate(1000.0) - 15.572014962783951) < 1e-9
    assert abs(erb_rate(100.0) - 3.358911927983617) < 1e-9


def test_erb_rate_inverse_matches_bisection():
    # Independent inversion: bisect erb_rate itself on [0, 20 kHz].
    def bisect(target):
        lo, hi = 0.0, 20000.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if erb_rate(mid) < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    for rate in [0.5, 3.0, 15.0, 30.0, 40.0]:
        assert abs(erb_rate_inverse(rate) - bisect(rate)) < 1e-6 * max(1.0, bisect(rate))


def test_scale_is_erb_spaced_with_pinned_endpoints():
    scale = make_erb_scale(24, f_min_hz=50.0, f_max_hz=7800.0)
    assert scale.centers[0] == 50.0 and scale.centers[-1] == 7800.0
    assert np.all(np.diff(scale.centers) > 0)
    rates = np.array([erb_rate(f) for f in scale.centers])
    assert np.allclose(np.diff(rates), np.diff(rates)[0], atol=1e-6)


def test_scale_default_top_stays_below_nyquist():
    assert make_erb_scale(16, sample_rate_hz=16000).f_max_hz == 7200.0
    assert make_erb_scale(16, sample_rate_hz=48000).f_max_hz == 20000.0


def test_scale_validation():
    with pytest.raises(ValueError):
        make_erb_scale(1)
    with pytest.raises(ValueError):
        make_erb_scale(8, f_min_hz=500.0, f_max_hz=100.0)
    with pytest.raises(ValueError):
        ErbScale(3, 100.0, 200.0, np.array([100.0, 200.0]))
    with pytest.raises(ValueError):
        ErbScale(3, 100.0, 200.0, np.array([100.0, 180.0, 150.0]))


def test_gammatone_response_shape_and_causality():
    t = np.arange(64) / 16000.0
    h = gammatone_response(500.0, 1.019, t)
    assert h[0] == 0.0  # t^3 envelope starts at zero
    assert np.all(np.isfinite(h))
    with pytest.raises(ValueError):
        gammatone_response(500.0, 1.019, np.array([-0.001]))


def test_kernels_have_unit_gain_at_center():
    # DTFT of each kernel evaluated at its own center frequency.
    fb = build_filterbank(make_erb_scale(12, sample_rate_hz=16000), 16000)
    t = np.arange(fb.kernel_len_samples) / 16000.0
    for kernel, f in zip(fb.kernels, fb.scale.centers):
        gain = abs(np.sum(kernel * np.exp(-2j * np.pi * f * t)))
        assert abs(gain - 1.0) < 1e-9


def test_kernel_magnitude_peaks_near_center():
    # Zero-padded FFT oracle: response maximum within half an ERB of f_c.
    fb = build_filterbank(make_erb_scale(12, sample_rate_hz=16000), 16000)
    n_fft = 1 << 16
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / 16000.0)
    for kernel, f in zip(fb.kernels[1:-1], fb.scale.centers[1:-1]):
        mag = np.abs(np.fft.rfft(kernel, n_fft))
        peak = freqs[np.argmax(mag)]
        assert abs(peak - f) < 0.5 * erb_bandwidth(f)


def test_filterbank_impulse_reproduces_kernels():
    fb = build_filterbank(make_erb_scale(6, sample_rate_hz=16000), 16000)
    x = np.zeros(256)
    x[0] = 1.0
    out = apply_filterbank(Waveform(x, 16000), fb)
    assert out.shape == (256, 6)
    assert np.allclose(out, fb.kernels[:, :256].T, atol=1e-12)


def test_filterbank_rejects_rate_mismatch():
    fb = build_filterbank(make_erb_scale(4, sample_rate_hz=16000), 16000)
    with pytest.raises(ValueError):
        apply_filterbank(Waveform(np.zeros(10), 8000), fb)


def test_sine_at_each_interior_center_wins_its_channel():
    # d_f=16 bank: a pure tone at channel c's center frequency must have its
    # largest RMS response in channel c, for every interior channel.
    start = time.monotonic()
    scale = make_erb_scale(16, sample_rate_hz=16000)
    n = 4800  # 0.3 s
    t = np.arange(n) / 16000.0
    for c in range(1, 15):
        w = Waveform(0.5 * np.sin(2.0 * np.pi * scale.centers[c] * t), 16000)
        rms = np.sqrt(np.mean(cochleagram(w, scale).data ** 2, axis=0))
        assert int(np.argmax(rms)) == c
    assert time.monotonic() - start < 5.0


def test_rectify_and_compress_hand_values():
    assert np.array_equal(rectify(np.array([-2.0, 0.0, 1.5])), [0.0, 0.0, 1.5])
    assert abs(compress(np.array([0.008]))[0] - 0.6) < 1e-12
    assert compress(np.array([0.0]))[0] == 0.0
    with pytest.raises(ValueError):
        compress(np.array([-0.1]))
    with pytest.raises(ValueError):
        rectify(np.array([np.inf]))


def test_silence_maps_to_all_zeros():
    out = cochleagram(Waveform(np.zeros(1600), 16000))
    assert out.data.shape == (1600, 64)
    assert np.all(out.data == 0.0)


def test_noise_maps_to_non_negative_entries():
    out = cochleagram(seeded_noise(), make_erb_scale(8, sample_rate_hz=16000))
    assert out.data.shape == (1600, 8)
    assert np.all(out.data >= 0.0)
    assert np.any(out.data > 0.0)


def test_cochleagram_validation():
    scale = make_erb_scale(4, sample_rate_hz=16000)
    with pytest.raises(ValueError):
        Cochleagram(np.array([[-1.0]]), 16000, scale)
    with pytest.raises(ValueError):
        Cochleagram(np.zeros(4), 16000, scale)


def test_serialization_round_trip(tmp_path):
    out = cochleagram(seeded_noise(400), make_erb_scale(6, sample_rate_hz=16000))
    path = tmp_path / "c.apgc"
    save_cochleagram(out, path)
    back = load_cochleagram_matrix(path)
    assert np.array_equal(back, out.data.astype(np.float32).astype(np.float64))


def test_serialization_rejects_corruption(tmp_path):
    out = cochleagram(seeded_noise(100), make_erb_scale(4, sample_rate_hz=16000))
    path = tmp_path / "c.apgc"
    save_cochleagram(out, path)
    data = path.read_bytes()
    bad_magic = tmp_path / "m.apgc"
    bad_magic.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_cochleagram_matrix(bad_magic)
    bad_version = tmp_path / "v.apgc"
    bad_version.write_bytes(data[:4] + bytes([9, 0, 0, 0]) + data[8:])
    with pytest.raises(FormatError):
        load_cochleagram_matrix(bad_version)
    short = tmp_path / "s.apgc"
    short.write_bytes(data[:-8])
    with pytest.raises(FormatError):
        load_cochleagram_matrix(short)


def test_golden_file_bytes_are_stable(tmp_path):
    # Regenerating the checked-in cochleagram from the same seeded noise must
    # reproduce it byte for byte.
    out = cochleagram(seeded_noise(800), make_erb_scale(8, sample_rate_hz=16000))
    path = tmp_path / "fresh.apgc"
    save_cochleagram(out, path)
    with open(GOLDEN, "rb") as fh:
        assert path.read_bytes() == fh.read()
