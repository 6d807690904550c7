import math

import numpy as np
import pytest

from feedbackcode import trainer as tr
from feedbackcode.channel import ChannelConfig, ChannelRealization, sample_bits, sample_realizations
from feedbackcode.params import ParamSet, VariantSpec, all_sign_variants, dumps, param_names, to_document
from feedbackcode.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    bce,
    clip_by_norm,
    forward_loss,
    gradient,
    initial_params,
    loss_and_gradient,
    train,
)


def batch(K=6, B=8, seed=0, snr_fb="noiseless"):
    cfg = ChannelConfig.from_snr(0, snr_fb)
    return sample_bits(seed, K, 0, B), sample_realizations(cfg, K + 1, seed, 0, B)


# -- loss --------------------------------------------------------------------


def test_bce_values():
    b = np.array([0.0, 1.0])
    assert float(bce(np.array([0.5, 0.5]), b)) == pytest.approx(math.log(2))
    assert float(bce(np.array([0.9]), np.array([1.0]))) == pytest.approx(-math.log(0.9))
    assert float(bce(np.array([0.0, 1.0]), b)) <= 1e-11
    with pytest.raises(ValueError):
        bce(np.array([0.5, 0.5]), np.array([1.0]))


def test_batch_of_one_and_duplication():
    p = initial_params(TrainConfig(K=6, seed=2))
    bits, rz = batch(B=5)
    per_block = [forward_loss(p, bits[i : i + 1], rz.block(i)) for i in range(5)]
    one = forward_loss(p, bits[:1], rz.block(0))
    assert one == per_block[0]
    dup_bits = np.concatenate([bits, bits])
    dup_rz = ChannelRealization.concatenate([rz, rz])
    assert forward_loss(p, dup_bits, dup_rz) == pytest.approx(forward_loss(p, bits, rz), rel=1e-13)
    np.testing.assert_allclose(gradient(p, dup_bits, dup_rz), gradient(p, bits, rz), rtol=1e-11, atol=1e-15)


def test_empty_batch_rejected():
    p = initial_params(TrainConfig(K=6))
    with pytest.raises(ValueError):
        forward_loss(p, np.zeros((0, 6), int), ChannelRealization.zeros(7, 0))


# -- gradient ----------------------------------------------------------------


def central_difference(vec, variant, bits, rz, h=1e-5):
    g = np.zeros_like(vec)
    for i in range(vec.size):
        up, dn = vec.copy(), vec.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (loss_and_gradient(up, variant, bits, rz)[0] - loss_and_gradient(dn, variant, bits, rz)[0]) / (2 * h)
    return g


VARIANTS = all_sign_variants() + [VariantSpec(n_hidden=7), VariantSpec(2, -1, 1, 7),
                                  VariantSpec(knee_mode="varying"), VariantSpec(2, 1, 1, 5, "varying")]


@pytest.mark.parametrize("point", range(24))
def test_gradient_matches_finite_differences(point):
    variant = VARIANTS[point % len(VARIANTS)]
    rng = np.random.default_rng(100 + point)
    p = initial_params(TrainConfig(K=6, variant=variant, seed=point))
    vec = p.to_vector() * rng.uniform(0.7, 1.3, size=len(p))
    if variant.knee_mode == "varying":
        names = param_names(variant)
        vec[names.index("lambda1")] = rng.uniform(-0.5, 0.5)
        vec[names.index("lambda2")] = rng.uniform(-0.5, 0.5)
    bits, rz = batch(K=6, B=6, seed=point, snr_fb=10 if variant.knee_mode == "varying" else "noiseless")
    _, g = loss_and_gradient(vec, variant, bits, rz)
    fd = central_difference(vec, variant, bits, rz)
    err = np.abs(g - fd)
    assert np.all(err <= np.maximum(1e-5 * np.abs(fd), 1e-8)), (variant.label(), err.max())


def test_e1_gradient_vanishes_when_indicator_inactive():
    K = 6
    p = initial_params(TrainConfig(K=K, seed=4))
    bits, rz = batch(K=K, B=10)
    b = np.concatenate([bits, np.zeros((10, 1), int)], axis=1)
    # push every phase-1 noise to the harmless side of its bit
    rz.phase1_noise[:] = np.where(b == 0, -1, 1) * np.abs(rz.phase1_noise)
    g = gradient(p, bits, rz)
    assert g[param_names(p.variant).index("e1")] == 0.0


# -- optimizer ---------------------------------------------------------------


def test_adam_first_step_is_signed_lr():
    cfg = TrainConfig(lr=0.01)
    g = np.array([3.0, -200.0, 0.5])
    new = adam_step(np.zeros(3), g, 1, cfg, AdamState.zeros(3))
    np.testing.assert_allclose(new, -0.01 * np.sign(g), rtol=1e-6)


def test_adam_zero_gradient_and_zero_lr():
    cfg = TrainConfig()
    x = np.array([1.0, -2.0])
    st = AdamState.zeros(2)
    for t in range(1, 6):
        x2 = adam_step(x, np.zeros(2), t, cfg, st)
    assert np.array_equal(x2, x)
    assert np.array_equal(adam_step(x, np.ones(2), 1, cfg, AdamState.zeros(2), lr=0.0), x)
    with pytest.raises(ValueError):
        adam_step(x, np.ones(2), 0, cfg, AdamState.zeros(2))


def test_adam_against_reference_formula():
    cfg = TrainConfig(lr=0.1, beta1=0.8, beta2=0.9)
    rng = np.random.default_rng(0)
    x = rng.normal(size=4)
    st = AdamState.zeros(4)
    m = v = np.zeros(4)
    ref = x.copy()
    for t in range(1, 4):
        g = rng.normal(size=4)
        x = adam_step(x, g, t, cfg, st)
        m = 0.8 * m + 0.2 * g
        v = 0.9 * v + 0.1 * g * g
        ref = ref - 0.1 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.9**t)) + cfg.adam_eps)
    np.testing.assert_allclose(x, ref, rtol=1e-14)


def test_adam_accepts_paramset():
    p = initial_params(TrainConfig())
    q = adam_step(p, np.ones(len(p)), 1, TrainConfig(), AdamState.zeros(len(p)))
    assert isinstance(q, ParamSet)


def test_clip_by_norm():
    g = np.array([3.0, 4.0])
    np.testing.assert_allclose(clip_by_norm(g, 1.0), [0.6, 0.8])
    assert clip_by_norm(g, 10.0) is g


def test_lr_schedule():
    cfg = TrainConfig(steps=100, lr=1.0)
    assert cfg.lr_at(60) == 1.0
    assert cfg.lr_at(61) == pytest.approx(0.1)
    assert cfg.lr_at(86) == pytest.approx(0.01)


# -- training loop -----------------------------------------------------------


SMALL = dict(K=10, batch_blocks=50, calibration_blocks=10_000)


def test_zero_steps_returns_initial_values():
    cfg = TrainConfig(steps=0, **SMALL)
    res = train(cfg)
    assert res.params.values == initial_params(cfg).values
    assert res.losses == [] and res.params.norm_consts is not None


def test_training_is_deterministic():
    cfg = TrainConfig(steps=15, seed=3, **SMALL)
    a, b = train(cfg), train(cfg)
    assert dumps(to_document(a.params)) == dumps(to_document(b.params))
    assert a.losses == b.losses


def test_training_reduces_loss():
    cfg = TrainConfig(steps=300, seed=1, K=10, batch_blocks=100, calibration_blocks=10_000)
    res = train(cfg)
    assert np.mean(res.losses[-50:]) < np.mean(res.losses[:50])
    assert res.params.training_meta["steps"] == 300


def test_divergence_guard(monkeypatch):
    monkeypatch.setattr(tr, "loss_and_gradient", lambda *a: (float("nan"), np.zeros(43)))
    with pytest.raises(tr.TrainingDiverged):
        train(TrainConfig(steps=3, **SMALL))


def test_initial_params_respect_resting_structure():
    for v in VARIANTS:
        p = initial_params(TrainConfig(variant=v))
        assert p["k4"] > 1.5  # saturating bias keeps h near rest at start
        assert all(p[n] == 1.0 for n in p.names if n[:2] in ("w_", "a1", "a2"))
        if v.knee_mode == "varying":
            assert p["lambda1"] == p["lambda2"] == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_blocks=0)
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)


# -- shipped runs ------------------------------------------------------------


def test_zero_noise_loss_of_shipped_system():
    from feedbackcode import pretrained

    p = pretrained.load("table1")
    bits = sample_bits(0, p.K, 0, 500)
    rz = ChannelRealization.zeros(p.K + 1, 500)
    assert forward_loss(p, bits, rz) <= 1e-3


def test_shipped_loss_moving_average_decreases():
    import csv

    from feedbackcode import pretrained

    for name in pretrained.params_names():
        if name.startswith("variant_"):
            continue
        with open(pretrained.loss_summary_path(name), newline="") as fh:
            means = [float(r["mean_loss"]) for r in csv.DictReader(fh)]
        assert len(means) == 20
        assert means[-1] < means[0], name
