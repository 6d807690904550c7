import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feedbackcode.channel import (
    ChannelConfig,
    ChannelRealization,
    apply_feedback,
    apply_forward,
    sample_bits,
    sample_realization,
    sample_realizations,
    snr_to_sigma,
    standard_normals,
)


@pytest.mark.parametrize(
    "snr, sigma",
    [(0, 1.0), ("noiseless", 0.0), (None, 0.0), (float("inf"), 0.0)],
)
def test_snr_to_sigma_fixed_points(snr, sigma):
    assert snr_to_sigma(snr) == sigma


def test_snr_to_sigma_two_db_against_amplitude_formula():
    # independent oracle: amplitude ratio 10^(-snr/20)
    assert snr_to_sigma(2) == pytest.approx(10 ** (-2 / 20), rel=1e-15)
    assert snr_to_sigma(2) == pytest.approx(0.7943282347242815, rel=1e-15)


@given(st.floats(-30, 30))
def test_snr_round_trip(snr):
    sigma = snr_to_sigma(snr)
    assert -10 * math.log10(sigma**2) == pytest.approx(snr, abs=1e-9)


def test_snr_rejects_junk():
    with pytest.raises(ValueError):
        snr_to_sigma("loud")
    with pytest.raises(ValueError):
        snr_to_sigma(float("nan"))


def test_config_rejects_negative_sigma():
    with pytest.raises(ValueError):
        ChannelConfig(-1.0, 0.0)


@pytest.mark.parametrize("x, n, out", [(1.0, 0.0, 1.0), (0.0, -0.7, -0.7), (-1.0, 0.25, -0.75)])
def test_apply_forward(x, n, out):
    assert apply_forward(x, n) == out


@pytest.mark.parametrize("y, n, out", [(1.3, 0.0, 1.3), (-0.2, 0.5, 0.3), (0.0, -1.1, -1.1)])
def test_apply_feedback(y, n, out):
    assert apply_feedback(y, n) == pytest.approx(out, abs=1e-15)


def test_zero_sigma_gives_all_zero_realization():
    rz = sample_realization(ChannelConfig(0.0, 0.0), 11, seed=5, block_index=3)
    for arr in (rz.phase1_noise, rz.phase2_noise, rz.fb_phase1_noise, rz.fb_phase2_noise):
        assert not arr.any()
    assert rz.phase1_noise.shape == (11,)
    assert rz.phase2_noise.shape == (11, 2)


def test_noiseless_feedback_observation_is_forward_noise():
    rz = sample_realizations(ChannelConfig.from_snr(0), 51, 1, 0, 20)
    assert np.array_equal(rz.phase1_observation, rz.phase1_noise)
    assert np.array_equal(rz.phase2_observation, rz.phase2_noise)
    assert not rz.fb_phase1_noise.any() and not rz.fb_phase2_noise.any()


def test_same_seed_and_block_repeat_exactly():
    cfg = ChannelConfig.from_snr(0, 10)
    a = sample_realization(cfg, 51, 7, 12345)
    b = sample_realization(cfg, 51, 7, 12345)
    for x, y in zip(a._arrays(), b._arrays()):
        assert np.array_equal(x, y)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**63 - 1), st.integers(0, 10**9), st.integers(1, 40), st.integers(1, 7))
def test_block_draws_do_not_depend_on_partitioning(seed, start, blocks, K):
    cfg = ChannelConfig.from_snr(1.0, 12.0)
    whole = sample_realizations(cfg, K + 1, seed, start, blocks)
    cut = blocks // 2
    parts = [sample_realizations(cfg, K + 1, seed, start, cut), sample_realizations(cfg, K + 1, seed, start + cut, blocks - cut)]
    joined = ChannelRealization.concatenate(parts)
    for x, y in zip(whole._arrays(), joined._arrays()):
        assert np.array_equal(x, y)
    one = sample_realization(cfg, K + 1, seed, start + blocks - 1)
    assert np.array_equal(one.phase2_noise, whole.phase2_noise[-1])
    bits = sample_bits(seed, K, start, blocks)
    assert np.array_equal(bits[cut:], sample_bits(seed, K, start + cut, blocks - cut))


def test_streams_are_distinct():
    f = standard_normals(3, 0, 0, 1, 8)
    g = standard_normals(3, 1, 0, 1, 8)
    h = standard_normals(4, 0, 0, 1, 8)
    assert not np.array_equal(f, g) and not np.array_equal(f, h)


def test_moments_of_one_million_draws():
    z = standard_normals(2024, 0, 0, 1000, 1000).ravel()
    assert abs(z.mean()) < 4e-3
    assert abs(z.var() - 1) < 1e-2


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
def test_scaled_variance(sigma):
    cfg = ChannelConfig(sigma, 0.0)
    rz = sample_realizations(cfg, 100, 99, 0, 3334)
    v = np.concatenate([rz.phase1_noise.ravel(), rz.phase2_noise.ravel()])[:1_000_000]
    assert 0.99 * sigma**2 <= v.var() <= 1.01 * sigma**2


def test_normality_shape():
    from scipy import stats

    z = standard_normals(11, 0, 0, 200, 500).ravel()
    assert stats.kstest(z, "norm").pvalue > 1e-3


def test_bits_are_balanced_and_binary():
    b = sample_bits(0, 50, 0, 20000)
    assert set(np.unique(b)) == {0, 1}
    assert abs(b.mean() - 0.5) < 0.005


def test_map_stream2_sign_only_touches_second_parity():
    rz = sample_realizations(ChannelConfig.from_snr(0, 5), 6, 0, 0, 3)
    m = rz.map_stream2_sign()
    assert np.array_equal(m.phase2_noise[..., 1], -rz.phase2_noise[..., 1])
    assert np.array_equal(m.fb_phase2_noise[..., 1], -rz.fb_phase2_noise[..., 1])
    assert np.array_equal(m.phase2_noise[..., 0], rz.phase2_noise[..., 0])
    assert np.array_equal(m.phase1_noise, rz.phase1_noise)


def test_padded_length_must_cover_one_bit():
    with pytest.raises(ValueError):
        sample_realizations(ChannelConfig(1, 0), 1, 0, 0, 1)
