from __future__ import annotations

import math

import numpy as np
import pytest

from relikin import autodiff as ad
from relikin import losses
from relikin.errors import ConfigError, DataFormatError, ShapeError
from relikin.model import (INIT_SIGMA_M, ModelConfig, ProbabilisticPrediction, fit_normalization,
                           forward, forward_graph, init_model, load_checkpoint, save_checkpoint)

SMALL = ModelConfig(hidden_size=8)


def randomized(params, seed=0, scale=0.3):
    """Give zero-initialized heads random weights so every path is exercised."""
    rng = np.random.default_rng(seed)
    out = params.copy()
    for k in out.trainable():
        out.tensors[k] = out.tensors[k] + rng.normal(scale=scale, size=out.tensors[k].shape)
    return out


def test_same_seed_same_checksum_and_different_seed_differs():
    assert init_model(SMALL, 1).checksum() == init_model(SMALL, 1).checksum()
    assert init_model(SMALL, 1).checksum() != init_model(SMALL, 2).checksum()


def test_heteroscedastic_head_starts_at_five_centimeters():
    cfg = ModelConfig(hidden_size=8, heteroscedastic=True)
    p = init_model(cfg, 0)
    sigma = np.exp(0.5 * p.tensors["head_logvar.b"])
    np.testing.assert_allclose(sigma, INIT_SIGMA_M, rtol=1e-15)
    _, lv = forward(p, np.random.default_rng(0).normal(size=(1, 60, 60)))
    np.testing.assert_allclose(np.exp(0.5 * lv), 0.05, rtol=1e-15)


def test_output_shapes_for_default_dimensions():
    p = init_model(SMALL, 0)
    mean, lv = forward(p, np.zeros((2, 60, 60)))
    assert mean.shape == (2, 60, 43, 3)
    assert lv is None
    mean4, _ = forward(p, np.zeros((2, 60, 20, 3)))
    assert mean4.shape == (2, 60, 43, 3)


def test_deterministic_forward_ignores_seed():
    p = randomized(init_model(SMALL, 0))
    x = np.random.default_rng(1).normal(size=(2, 60, 60))
    a, _ = forward(p, x, dropout_active=False, rng_seed=1)
    b, _ = forward(p, x, dropout_active=False, rng_seed=2)
    assert np.array_equal(a, b)


def test_dropout_forward_reproducible_per_seed():
    p = randomized(init_model(SMALL, 0))
    x = np.random.default_rng(1).normal(size=(2, 60, 60))
    a, _ = forward(p, x, dropout_active=True, rng_seed=5)
    b, _ = forward(p, x, dropout_active=True, rng_seed=5)
    c, _ = forward(p, x, dropout_active=True, rng_seed=6)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_wrong_sequence_length_is_shape_error():
    p = init_model(SMALL, 0)
    with pytest.raises(ShapeError):
        forward(p, np.zeros((1, 59, 60)))
    with pytest.raises(ShapeError):
        forward(p, np.zeros((1, 60, 57)))


def test_nan_input_rejected():
    x = np.zeros((1, 60, 60))
    x[0, 3, 4] = np.nan
    with pytest.raises(ValueError):
        forward(init_model(SMALL, 0), x)


def test_invalid_configs():
    with pytest.raises(ConfigError):
        ModelConfig(dropout_rate=1.0)
    with pytest.raises(ConfigError):
        ModelConfig(log_var_clamp=(4.0, -10.0))
    with pytest.raises(ConfigError):
        ModelConfig(input_dim=59)
    with pytest.raises(ConfigError):
        ModelConfig(whiten_floor=0.0)


def test_log_var_respects_clamp():
    cfg = ModelConfig(hidden_size=8, heteroscedastic=True, log_var_clamp=(-3.0, -2.0))
    p = randomized(init_model(cfg, 0), scale=5.0)
    _, lv = forward(p, np.random.default_rng(2).normal(size=(2, 60, 60)))
    assert lv.min() >= -3.0 and lv.max() <= -2.0
    ProbabilisticPrediction(mean=np.zeros_like(lv), ale_var=np.exp(lv), log_var_clamp=(-3.0, -2.0))


def test_probabilistic_prediction_rejects_negative_variance():
    with pytest.raises(ValueError):
        ProbabilisticPrediction(mean=np.zeros(3), epi_var=np.array([0.0, -1e-3, 0.0]))


def test_fit_normalization_whitens_training_inputs():
    rng = np.random.default_rng(3)
    mix = rng.normal(size=(6, 6))
    kp = (rng.normal(size=(4, 60, 6)) @ mix).reshape(4, 60, 2, 3)
    lm = rng.normal(size=(4, 60, 43, 3))
    cfg = ModelConfig(input_dim=6, hidden_size=4)
    p = fit_normalization(init_model(cfg, 0), kp, lm)
    z = (kp.reshape(-1, 6) - p.tensors["norm.in_shift"]) @ p.tensors["norm.in_whiten"]
    cov = np.cov(z.T, bias=True)
    lam = np.linalg.eigvalsh(np.cov(kp.reshape(-1, 6).T, bias=True))
    want = lam / (lam + cfg.whiten_floor * lam.max())
    np.testing.assert_allclose(np.linalg.eigvalsh(cov), want, atol=1e-10)
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)


def test_fit_normalization_projects_out_constant_inputs():
    rng = np.random.default_rng(4)
    kp = rng.normal(size=(3, 60, 2, 3))
    kp[..., 0, :] = 1.5  # first keypoint never moves
    cfg = ModelConfig(input_dim=6, hidden_size=4)
    p = fit_normalization(init_model(cfg, 0), kp, rng.normal(size=(3, 60, 43, 3)))
    np.testing.assert_allclose(p.tensors["norm.in_whiten"][:3], 0.0, atol=1e-12)


def test_checkpoint_round_trip_is_exact(tmp_path):
    cfg = ModelConfig(hidden_size=4, heteroscedastic=True)
    p = randomized(init_model(cfg, 7))
    save_checkpoint(p, tmp_path / "a.txt")
    q = load_checkpoint(tmp_path / "a.txt")
    assert q.config == p.config
    for k in p.tensors:
        assert np.array_equal(p.tensors[k], q.tensors[k])
    save_checkpoint(q, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    p = init_model(ModelConfig(hidden_size=4), 0)
    save_checkpoint(p, tmp_path / "c.txt")
    lines = (tmp_path / "c.txt").read_text().split("\n")
    lines[6] = lines[6].replace("0.", "1.", 1)
    (tmp_path / "c.txt").write_text("\n".join(lines))
    with pytest.raises(DataFormatError, match="checksum"):
        load_checkpoint(tmp_path / "c.txt")
    (tmp_path / "d.txt").write_text("not a checkpoint\n")
    with pytest.raises(DataFormatError, match="line 1"):
        load_checkpoint(tmp_path / "d.txt")


def test_full_lstm_loss_gradients_match_finite_differences():
    cfg = ModelConfig(input_dim=6, landmark_count=3, hidden_size=5, num_layers=2, seq_len=4,
                      heteroscedastic=True)
    params = randomized(init_model(cfg, 3), seed=1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 6))
    y = rng.normal(scale=0.5, size=(2, 4, 3, 3))
    valid = np.array([True, True, True])
    buffers = {k: v for k, v in params.tensors.items() if k.startswith("norm.")}

    def f(p):
        mean, lv = forward_graph({**buffers, **p}, cfg, x, None)
        return losses.composite_loss(mean, lv, y, valid, triplets=[(0, 1, 2)])

    report = ad.grad_check(f, {k: params.tensors[k] for k in params.trainable()})
    assert report.passed, report.failures[:3]
    assert report.worst < 1e-4
    assert sum(report.checked.values()) > 300


def test_dropout_mask_scaling_is_inverted():
    from relikin.model import dropout_mask
    m = dropout_mask(np.random.default_rng(0), (200_000,), 0.1)
    assert set(np.unique(m)) <= {0.0, 1.0 / 0.9}
    assert abs(m.mean() - 1.0) < 0.01
    assert math.isclose((m == 0).mean(), 0.1, abs_tol=0.005)
