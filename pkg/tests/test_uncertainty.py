from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relikin.errors import ConfigError
from relikin.model import ModelConfig, ProbabilisticPrediction, init_model
from relikin.uncertainty import (SamplerConfig, aleatoric_variance, epistemic_variance, frame_score,
                                 mc_sample, predict, summarize, total_variance)

SMALL = ModelConfig(hidden_size=8)


def randomized(params, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    out = params.copy()
    for k in out.trainable():
        out.tensors[k] = out.tensors[k] + rng.normal(scale=scale, size=out.tensors[k].shape)
    return out


def two_pass_variance(samples):
    M = samples.shape[0]
    mean = np.zeros(samples.shape[1:])
    for m in range(M):
        mean += samples[m]
    mean /= M
    acc = np.zeros_like(mean)
    for m in range(M):
        acc += (samples[m] - mean) ** 2
    return acc / M


# ---------------------------------------------------------------- sampler


def test_sampler_rejects_single_sample():
    with pytest.raises(ConfigError):
        SamplerConfig(num_samples=1)


def test_zero_dropout_gives_identical_samples():
    p = randomized(init_model(SMALL, 0))
    x = np.random.default_rng(1).normal(size=(2, 60, 60))
    smp, _ = mc_sample(p, x, SamplerConfig(num_samples=4, dropout_rate=0.0))
    for m in range(1, 4):
        assert np.array_equal(smp[0], smp[m])
    pred = predict(p, x, SamplerConfig(num_samples=4, dropout_rate=0.0))
    assert np.array_equal(pred.epi_var, np.zeros_like(pred.epi_var))
    assert np.array_equal(pred.mean, smp[0])


def test_same_sampler_config_is_bit_identical():
    p = randomized(init_model(SMALL, 0))
    x = np.random.default_rng(2).normal(size=(3, 60, 60))
    cfg = SamplerConfig(num_samples=5, base_seed=11)
    a, _ = mc_sample(p, x, cfg)
    b, _ = mc_sample(p, x, cfg)
    assert np.array_equal(a, b)


def test_fifty_passes_are_pairwise_distinct():
    p = randomized(init_model(ModelConfig(hidden_size=16), 0))
    x = np.random.default_rng(3).normal(size=(1, 60, 60))
    smp, _ = mc_sample(p, x, SamplerConfig(num_samples=50))
    assert smp.shape == (50, 1, 60, 43, 3)
    flat = smp.reshape(50, -1)
    for i in range(50):
        for j in range(i + 1, 50):
            assert not np.array_equal(flat[i], flat[j])


def test_predict_first_chunk_matches_standalone_run():
    p = randomized(init_model(SMALL, 0))
    x = np.random.default_rng(4).normal(size=(5, 60, 60))
    cfg = SamplerConfig(num_samples=3, chunk_size=2)
    whole = predict(p, x, cfg)
    parts = [predict(p, x[i:i + 2], cfg) for i in (0, 2, 4)]
    # the first chunk draws from the same streams in both runs
    assert np.array_equal(whole.mean[:2], parts[0].mean)
    assert whole.mean.shape == (5, 60, 43, 3)


def test_heteroscedastic_prediction_has_all_fields():
    cfg = ModelConfig(hidden_size=8, heteroscedastic=True)
    p = randomized(init_model(cfg, 0))
    x = np.random.default_rng(5).normal(size=(2, 60, 60))
    pred = predict(p, x, SamplerConfig(num_samples=3))
    assert pred.ale_var.shape == pred.epi_var.shape == pred.mean.shape
    single = predict(p, x, SamplerConfig(num_samples=3, aleatoric="single"))
    assert not np.array_equal(single.ale_var, pred.ale_var)
    s = summarize(pred, np.r_[np.ones(40, bool), np.zeros(3, bool)])
    assert np.array_equal(s.total, frame_score(pred.epi_var + pred.ale_var,
                                               np.r_[np.ones(40, bool), np.zeros(3, bool)]))


# ---------------------------------------------------------------- variance fields


def test_epistemic_variance_zero_for_equal_samples():
    s = np.broadcast_to(np.random.default_rng(6).normal(size=(4, 3)), (7, 4, 3))
    assert np.array_equal(epistemic_variance(s), np.zeros((4, 3)))


def test_epistemic_variance_two_samples():
    s = np.array([[1.0], [3.0]])
    assert epistemic_variance(s)[0] == 1.0
    assert s.mean(axis=0)[0] == 2.0


def test_epistemic_variance_matches_two_pass_oracle():
    s = np.random.default_rng(7).normal(loc=0.4, scale=0.02, size=(50, 3, 6, 3))
    np.testing.assert_allclose(epistemic_variance(s), two_pass_variance(s), rtol=0, atol=1e-12)


def test_epistemic_variance_needs_two_samples():
    with pytest.raises(ConfigError):
        epistemic_variance(np.zeros((1, 3)))


def test_aleatoric_variance_values():
    assert np.array_equal(aleatoric_variance(np.zeros((5, 2, 3))), np.ones((2, 3)))
    lv = np.random.default_rng(8).normal(size=(1, 4, 3))
    np.testing.assert_array_equal(aleatoric_variance(np.repeat(lv, 6, axis=0)), np.exp(lv[0]))
    lv = np.random.default_rng(9).normal(size=(50, 4, 3))
    oracle = np.zeros((4, 3))
    for m in range(50):
        oracle += np.exp(lv[m])
    np.testing.assert_allclose(aleatoric_variance(lv), oracle / 50, rtol=0, atol=1e-12)


def test_total_variance_examples():
    assert total_variance(np.array([1.0]), np.array([2.0]))[0] == 3.0
    epi = np.array([0.5, 0.25])
    assert np.array_equal(total_variance(epi, None), epi)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_total_is_exact_elementwise_sum(seed):
    rng = np.random.default_rng(seed)
    epi = rng.exponential(size=(3, 5, 3))
    ale = rng.exponential(size=(3, 5, 3))
    out = total_variance(epi, ale)
    for idx in np.ndindex(epi.shape):
        assert out[idx] == epi[idx] + ale[idx]


# ---------------------------------------------------------------- frame score


def test_frame_score_examples():
    v = np.full((4, 3, 3), 0.75)
    assert np.array_equal(frame_score(v, [True] * 3), np.full(4, 0.75))
    one = np.array([[[1.0, 2.0, 3.0]]])
    assert frame_score(one, [True])[0] == 2.0


def test_frame_score_matches_masked_loop_oracle():
    rng = np.random.default_rng(10)
    v = rng.exponential(size=(2, 5, 6, 3))
    valid = np.array([True, False, True, True, False, True])
    got = frame_score(v, valid)
    for b in range(2):
        for t in range(5):
            vals = [v[b, t, l, d] for l in range(6) if valid[l] for d in range(3)]
            assert got[b, t] == pytest.approx(sum(vals) / len(vals), abs=1e-12)


def test_frame_score_ignores_padded_landmarks():
    v = np.ones((2, 3, 3))
    v[:, 2] = 1e6
    assert np.array_equal(frame_score(v, [True, True, False]), np.ones(2))
    with pytest.raises(ValueError):
        frame_score(v, [False] * 3)


def test_prediction_container_rejects_negative_epistemic():
    with pytest.raises(ValueError):
        ProbabilisticPrediction(mean=np.zeros(2), epi_var=np.array([-1.0, 0.0]))


def test_skip_path_dropout_switch():
    from relikin.model import with_config
    p = init_model(SMALL, 0)
    p.tensors["skip.w"] = np.random.default_rng(11).normal(size=p.tensors["skip.w"].shape)
    x = np.random.default_rng(12).normal(size=(1, 60, 60))
    cfg = SamplerConfig(num_samples=3)
    assert predict(p, x, cfg).epi_var.max() > 0
    off = with_config(p, skip_dropout=False)
    assert np.array_equal(predict(off, x, cfg).epi_var, np.zeros((1, 60, 43, 3)))
