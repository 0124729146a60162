"""Temporal pooling arithmetic against window enumeration, encoder shapes,
and finite-difference gradients."""

import numpy as np
import pytest

from earmos.cochlea import Cochleagram, make_erb_scale
from earmos.encoder import (
    ApmEncoderConfig,
    AuditoryEmbedding,
    attentive_stat_pool,
    encode,
    encode_tensor,
    init_encoder_params,
    pool_to_40hz,
)
from earmos.numerics import Tensor, finite_difference_check

SCALE4 = make_erb_scale(4, sample_rate_hz=16000)


def coch(data) -> Cochleagram:
    return Cochleagram(np.asarray(data, dtype=np.float64), 16000, SCALE4)


def rand_coch(rng, n, d=4) -> Cochleagram:
    return coch(rng.random((n, d)))


@pytest.mark.parametrize(
    "n,expect",
    [(16000, 40), (16400, 41), (8000, 20), (400, 1), (100, 1), (1, 1), (20000, 50)],
)
def test_pooled_frame_count(n, expect):
    rng = np.random.default_rng(0)
    assert pool_to_40hz(rand_coch(rng, n)).shape == (expect, 4)


@pytest.mark.parametrize("n", [7, 100, 999, 16000, 16400])
def test_pooling_matches_window_enumeration(n):
    # Oracle: every row r lands in exactly the frame t satisfying
    # floor(t*n/T) <= r < floor((t+1)*n/T); frames average their rows.
    rng = np.random.default_rng(n)
    c = rand_coch(rng, n)
    out = pool_to_40hz(c)
    t_frames = out.shape[0]
    covered = 0
    for t in range(t_frames):
        lo, hi = t * n // t_frames, (t + 1) * n // t_frames
        assert hi > lo  # windows are never empty
        covered += hi - lo
        assert np.allclose(out[t], c.data[lo:hi].mean(axis=0), atol=1e-12)
    assert covered == n  # windows partition the rows


def test_pooling_preserves_constant_signal():
    c = coch(np.full((16000, 4), 0.7))
    assert np.allclose(pool_to_40hz(c), 0.7, atol=1e-12)


def test_pooling_rejects_empty_and_wrong_rate():
    with pytest.raises(ValueError):
        pool_to_40hz(coch(np.zeros((0, 4))))
    with pytest.raises(ValueError):
        pool_to_40hz(Cochleagram(np.zeros((10, 4)), 8000, SCALE4))


def small_cfg(d_f=4) -> ApmEncoderConfig:
    return ApmEncoderConfig(d_f=d_f, tdnn_channels=5, attention_hidden=3)


def test_init_creates_expected_parameter_set():
    cfg = small_cfg()
    params = init_encoder_params(cfg, np.random.default_rng(0))
    assert sorted(params) == sorted(
        ["apm.tdnn0.w", "apm.tdnn0.b", "apm.tdnn1.w", "apm.tdnn1.b", "apm.tdnn2.w",
         "apm.tdnn2.b", "apm.score.w1", "apm.score.b1", "apm.score.w2", "apm.score.b2",
         "apm.out.w", "apm.out.b"]
    )
    assert params["apm.tdnn0.w"].shape == (12, 5)
    assert params["apm.tdnn1.w"].shape == (15, 5)
    assert params["apm.out.w"].shape == (10, 192)
    assert all(p.requires_grad for p in params.values())


def test_embedding_shape_and_standardization():
    cfg = small_cfg()
    params = init_encoder_params(cfg, np.random.default_rng(1))
    frames = np.random.default_rng(2).random((13, 4))
    out = encode_tensor(frames, cfg, params)
    assert out.shape == (1, 192)
    # final layer norm centers the embedding
    assert abs(out.values.mean()) < 1e-10
    emb = encode(frames, cfg, params)
    assert isinstance(emb, AuditoryEmbedding)
    assert np.array_equal(emb.vector, out.values[0])


def test_single_frame_input_stays_finite():
    cfg = small_cfg()
    params = init_encoder_params(cfg, np.random.default_rng(3))
    out = encode_tensor(np.random.default_rng(4).random((1, 4)), cfg, params)
    assert np.all(np.isfinite(out.values))


def test_attentive_pool_weights_average_constant_rows():
    # With identical rows the softmax weights are irrelevant for the mean and
    # the variance collapses to the floor.
    cfg = small_cfg(d_f=5)
    params = init_encoder_params(cfg, np.random.default_rng(5))
    h = Tensor(np.tile(np.arange(5.0), (7, 1)))
    out = attentive_stat_pool(h, params, "apm.").values
    assert np.allclose(out[0, :5], np.arange(5.0), atol=1e-9)
    assert np.allclose(out[0, 5:], np.sqrt(1e-6), atol=1e-9)


def test_custom_prefix_is_isolated():
    cfg = small_cfg()
    rng = np.random.default_rng(6)
    params = init_encoder_params(cfg, rng)
    params.update(init_encoder_params(cfg, rng, prefix="other."))
    frames = np.random.default_rng(7).random((9, 4))
    a = encode_tensor(frames, cfg, params, prefix="apm.")
    b = encode_tensor(frames, cfg, params, prefix="other.")
    assert not np.allclose(a.values, b.values)


def test_encoder_gradients_match_finite_differences():
    cfg = small_cfg()
    rng = np.random.default_rng(8)
    params = init_encoder_params(cfg, rng)
    frames = Tensor(rng.random((6, 4)), requires_grad=True)
    probe = Tensor(rng.standard_normal((1, 192)))
    tensors = [frames] + list(params.values())

    def loss():
        return (encode_tensor(frames, cfg, params) * probe).sum()

    assert finite_difference_check(loss, tensors, rng, max_coords=8) < 1e-4
