"""Condition filters: blur oracle, decomposition identity, equivariance."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmdiff.conditioning import (
    BASE_SIGMA,
    EDGE,
    HIGHPASS,
    LOWPASS,
    FilterConfig,
    condition_for,
    edge_condition,
    gaussian_blur,
    high_pass_condition,
    low_pass_reference,
    luminance,
    scaled_sigma,
)
from xmdiff.errors import ConfigError


def _rand_batch(rng, shape=(2, 3, 16, 24)):
    return rng.uniform(-1, 1, size=shape).astype(np.float32)


def test_luminance_is_channel_mean():
    rng = np.random.default_rng(0)
    x = _rand_batch(rng)
    lum = luminance(x)
    assert lum.shape == (2, 1, 16, 24)
    np.testing.assert_allclose(lum, x.mean(axis=1, keepdims=True), atol=1e-6)


def test_luminance_rejects_non_batch():
    with pytest.raises(ValueError):
        luminance(np.zeros((3, 16, 24), dtype=np.float32))


def test_gaussian_blur_matches_direct_convolution():
    # oracle: separable kernel built from the Gaussian pdf, applied by
    # explicit convolution with reflect padding
    sigma = 1.5
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 1, 1, 33)).astype(np.float64)
    radius = int(4.0 * sigma + 0.5)  # scipy's default truncation
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    row = x[0, 0, 0]
    # scipy's "reflect" duplicates the edge sample; numpy calls that "symmetric"
    padded = np.pad(row, radius, mode="symmetric")
    want = np.convolve(padded, kernel, mode="valid")
    got = gaussian_blur(x, sigma)[0, 0, 0]
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_blur_preserves_constant_and_mean():
    x = np.full((1, 2, 8, 8), 0.37, dtype=np.float32)
    np.testing.assert_allclose(gaussian_blur(x, 2.0), x, atol=1e-6)
    rng = np.random.default_rng(2)
    y = _rand_batch(rng, (1, 1, 16, 16))
    # reflect padding keeps the kernel mass inside the image, so the
    # global mean survives blurring
    assert gaussian_blur(y, 1.0).mean() == pytest.approx(float(y.mean()), abs=1e-5)


def test_high_plus_low_recovers_luminance():
    rng = np.random.default_rng(3)
    x = _rand_batch(rng)
    hp = high_pass_condition(x, FilterConfig(kind=HIGHPASS, sigma=1.2))
    lp = gaussian_blur(luminance(x), 1.2)
    np.testing.assert_allclose(hp + lp, luminance(x), atol=1e-5)


def test_high_pass_of_constant_is_zero():
    x = np.full((2, 3, 8, 12), -0.4, dtype=np.float32)
    hp = high_pass_condition(x, FilterConfig())
    np.testing.assert_allclose(hp, 0.0, atol=1e-6)


def test_high_pass_ignores_hue():
    # two images with identical luminance but different channel splits
    # must produce the same condition
    rng = np.random.default_rng(4)
    lum = rng.uniform(0, 1, size=(1, 1, 16, 24)).astype(np.float32)
    delta = rng.uniform(-0.2, 0.2, size=lum.shape).astype(np.float32)
    a = np.concatenate([lum + delta, lum - delta, lum], axis=1)
    b = np.concatenate([lum, lum, lum], axis=1)
    cfg = FilterConfig()
    np.testing.assert_allclose(
        high_pass_condition(a, cfg), high_pass_condition(b, cfg), atol=1e-5
    )


def test_high_pass_shift_equivariance_interior():
    # translating the image translates the condition, away from borders
    rng = np.random.default_rng(5)
    x = _rand_batch(rng, (1, 1, 24, 24))
    shifted = np.roll(x, 3, axis=3)
    cfg = FilterConfig(sigma=1.0)
    c = high_pass_condition(x, cfg)
    cs = high_pass_condition(shifted, cfg)
    margin = 8
    np.testing.assert_allclose(
        cs[..., margin : 24 - margin],
        np.roll(c, 3, axis=3)[..., margin : 24 - margin],
        atol=1e-5,
    )


def test_normalize_flag_scales_peak_to_one():
    rng = np.random.default_rng(6)
    x = _rand_batch(rng, (3, 1, 16, 16)) * 0.05  # low contrast
    c = high_pass_condition(x, FilterConfig(normalize=True))
    peaks = np.abs(c).max(axis=(1, 2, 3))
    np.testing.assert_allclose(peaks, 1.0, atol=1e-6)
    # constant input stays all-zero instead of dividing by zero
    flat = np.zeros((1, 1, 8, 8), dtype=np.float32)
    np.testing.assert_array_equal(
        high_pass_condition(flat, FilterConfig(normalize=True)), flat
    )


def test_edge_map_range_and_flat_floor():
    rng = np.random.default_rng(7)
    x = _rand_batch(rng)
    e = edge_condition(x, FilterConfig(kind=EDGE))
    assert e.min() >= -1.0 and e.max() == pytest.approx(1.0, abs=1e-6)
    flat = np.full((1, 1, 8, 8), 0.3, dtype=np.float32)
    np.testing.assert_array_equal(
        edge_condition(flat, FilterConfig(kind=EDGE)), np.full_like(flat, -1.0)
    )


def test_edge_map_peaks_on_step_edge():
    x = np.zeros((1, 1, 16, 16), dtype=np.float32)
    x[..., 8:] = 1.0
    e = edge_condition(x, FilterConfig(kind=EDGE))[0, 0]
    # strongest response in the two columns adjacent to the step
    assert set(np.argwhere(e == e.max())[:, 1]) <= {7, 8}
    assert e[:, :4].max() == -1.0


def test_low_pass_keeps_channels_and_guards_kind():
    rng = np.random.default_rng(8)
    x = _rand_batch(rng)
    lp = low_pass_reference(x, FilterConfig(kind=LOWPASS))
    assert lp.shape == x.shape
    with pytest.raises(ConfigError):
        low_pass_reference(x, FilterConfig(kind=HIGHPASS))
    with pytest.raises(ConfigError):
        high_pass_condition(x, FilterConfig(kind=LOWPASS))


def test_condition_for_dispatch():
    rng = np.random.default_rng(9)
    x = _rand_batch(rng)
    np.testing.assert_array_equal(
        condition_for(x, FilterConfig()), high_pass_condition(x, FilterConfig())
    )
    np.testing.assert_array_equal(
        condition_for(x, FilterConfig(kind=EDGE)),
        edge_condition(x, FilterConfig(kind=EDGE)),
    )
    with pytest.raises(ConfigError):
        condition_for(x, FilterConfig(kind=LOWPASS))
    with pytest.raises(ConfigError):
        condition_for(x, FilterConfig(kind="median"))


def test_sigma_validation():
    for bad in (0.0, -1.0, float("nan"), float("inf")):
        with pytest.raises(ConfigError):
            FilterConfig(sigma=bad).check()


def test_scaled_sigma_proportional():
    assert scaled_sigma(32) == BASE_SIGMA
    assert scaled_sigma(64) == 2 * BASE_SIGMA
    assert scaled_sigma(16) == BASE_SIGMA / 2


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 10_000), sigma=st.floats(0.3, 4.0))
def test_high_pass_zero_mean_within_tolerance(seed, sigma):
    # blur preserves the mean (reflect padding), so the residual mean
    # is zero up to clipping, which these inputs never trigger
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.45, 0.45, size=(1, 3, 12, 12)).astype(np.float32)
    c = high_pass_condition(x, FilterConfig(sigma=sigma))
    assert abs(float(c.mean())) < 1e-4


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 10_000))
def test_condition_is_single_channel_float32(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(2, 3, 8, 10)).astype(np.float32)
    for cfg in (FilterConfig(), FilterConfig(kind=EDGE)):
        c = condition_for(x, cfg)
        assert c.shape == (2, 1, 8, 10)
        assert c.dtype == np.float32
        assert np.all(c >= -1.0) and np.all(c <= 1.0)


def test_condition_identity_contrast_on_renders():
    # a condition should fingerprint its identity: same-identity pairs across
    # modalities stay strongly correlated, different identities nearly not
    from xmdiff.data import ModalityIndicator
    from xmdiff.synthdata import build_eval_dataset

    def corr(a, b):
        a = a.ravel() - a.mean()
        b = b.ravel() - b.mean()
        return float(a @ b / np.sqrt((a @ a) * (b @ b)))

    ds, manifest = build_eval_dataset(n_ids=6, per_id=4, seed=901, size=(32, 64))
    labels = np.array([e.label for e in manifest.entries])
    is_vis = ds.modalities == int(ModalityIndicator.VISIBLE)
    cv = condition_for(ds.images[is_vis], FilterConfig())
    ci = condition_for(ds.images[~is_vis], FilterConfig())
    lv, li = labels[is_vis], labels[~is_vis]

    same = [corr(cv[i], ci[j]) for i in range(len(cv)) for j in range(len(ci)) if lv[i] == li[j]]
    cross = [corr(cv[i], ci[j]) for i in range(len(cv)) for j in range(len(ci)) if lv[i] != li[j]]
    assert np.mean(same) >= 0.8
    assert np.min(same) >= 0.8
    # per-pair bound, not just the mean: the set draw packs identities apart
    assert np.max(np.abs(cross)) <= 0.3
    assert abs(np.mean(cross)) <= 0.15
