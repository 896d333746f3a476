import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from flextsf.data import DataError, IrregularSeries
from flextsf.vtnorm import (EPS_SIGMA, FeatureStandardizer, StaticFeatures, denormalize,
                            extract_features, fit_global, normalize_context_horizon,
                            normalize_series, normalize_times, normalize_values)


@st.composite
def irregular_series(draw, min_len=2, max_len=40):
    n = draw(st.integers(min_len, max_len))
    gaps = draw(st.lists(st.floats(1e-3, 1e4), min_size=n - 1, max_size=n - 1))
    start = draw(st.floats(-1e6, 1e6))
    times = start + np.concatenate(([0.0], np.cumsum(gaps)))
    assume(np.all(np.diff(times) > 0))
    scale = draw(st.floats(1e-3, 1e3))
    shift = draw(st.floats(-1e4, 1e4))
    values = shift + scale * np.array(draw(st.lists(st.floats(-10, 10), min_size=n, max_size=n)))
    observed = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    assume(observed.sum() >= 2)
    return IrregularSeries("s", "x", times, np.where(observed, values, 0.0), observed)


def test_hand_computed_times():
    t, w = normalize_times(np.array([0.0, 2.0, 6.0, 8.0]), omega_g=1.0)
    assert w == 2.0
    assert t.tolist() == [0.0, 1.0, 3.0, 4.0]


def test_regular_hourly_times():
    t, w = normalize_times(3600.0 * np.arange(5) + 7200.0, omega_g=3600.0)
    assert w == 3600.0
    assert t.tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]


def test_single_timestamp_falls_back_to_global_unit():
    t, w = normalize_times(np.array([5.0]), omega_g=60.0)
    assert t.tolist() == [0.0] and w == 60.0


def test_feature_vector_order():
    f = extract_features(1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    assert len(f) == 6
    assert f.as_array().tolist() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]


def test_constant_series_clamps_sigma():
    s = IrregularSeries("c", "x", [0.0, 1.0, 2.0], [4.0, 4.0, 4.0], [True] * 3)
    inst = normalize_series(s, 4.0, 1.0, 1.0)
    assert inst.features.sigma_i == EPS_SIGMA
    assert np.all(inst.values_prime == 0.0)
    assert np.allclose(denormalize(inst.values_prime, inst.features), s.values)


def test_sigma_g_below_floor_rejected():
    with pytest.raises(ValueError):
        normalize_values(np.ones(3), np.ones(3, bool), 0.0, 0.0)


def test_fit_global_population_stats():
    a = IrregularSeries("a", "x", [0, 1.0], [1.0, 3.0], [True, True])
    b = IrregularSeries("b", "x", [0, 1.0, 2.0], [5.0, 99.0, 7.0], [True, False, True])
    mu, sd = fit_global([a, b])["x"]
    ref = np.array([1.0, 3.0, 5.0, 7.0])
    assert mu == pytest.approx(ref.mean(), abs=1e-12)
    assert sd == pytest.approx(ref.std(), abs=1e-12)
    with pytest.raises(DataError):
        fit_global([])


@settings(max_examples=60, deadline=None)
@given(irregular_series())
def test_round_trip_moments_and_unit_gap(s):
    inst = normalize_series(s, mu_g=3.0, sigma_g=7.0, omega_g=1.0)
    obs = s.observed
    back = denormalize(inst.values_prime, inst.features)
    assert np.max(np.abs(back[obs] - s.values[obs])) <= 1e-9 * max(1.0, np.max(np.abs(s.values)))
    x = inst.values_prime[obs]
    if inst.features.sigma_i > EPS_SIGMA:
        assert abs(x.mean()) < 1e-6 and abs(x.std() - 1.0) < 1e-6
    assert inst.times_prime[0] == 0.0
    assert np.min(np.diff(inst.times_prime)) == 1.0


@settings(max_examples=40, deadline=None)
@given(irregular_series(), st.floats(0.01, 100.0), st.floats(-1e3, 1e3))
def test_scale_shift_equivariance(s, a, b):
    mu_g, sg = 1.5, 2.5
    base = normalize_series(s, mu_g, sg, 1.0)
    moved = IrregularSeries("s", "x", s.times, np.where(s.observed, a * s.values + b, 0.0), s.observed)
    other = normalize_series(moved, a * mu_g + b, a * sg, 1.0)
    if base.features.sigma_i > 1e-3:
        assert np.allclose(other.values_prime, base.values_prime, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(irregular_series(), st.integers(-10, 10))
def test_time_unit_equivariance(s, power):
    c = 2.0 ** power
    t1, w1 = normalize_times(s.times, 1.0)
    t2, w2 = normalize_times(s.times * c, 1.0)
    assert np.array_equal(t1, t2)
    assert w2 == w1 * c


@settings(max_examples=30, deadline=None)
@given(irregular_series(), st.floats(0.1, 1000.0))
def test_time_unit_equivariance_general_factor(s, c):
    t1, w1 = normalize_times(s.times, 1.0)
    t2, w2 = normalize_times(s.times * c, 1.0)
    # rounding of the raw stamps is amplified by max|t| / min gap
    cond = np.max(np.abs(s.times)) / np.min(np.diff(s.times))
    tol = 1e-9 + 32 * np.finfo(float).eps * cond
    assert np.max(np.abs(t1 - t2)) <= tol * max(1.0, np.max(t1))
    assert math.isclose(w2, w1 * c, rel_tol=tol)


def test_horizon_uses_context_statistics():
    rng = np.random.default_rng(0)
    t = np.cumsum(1 + rng.exponential(1.0, 20))
    v = rng.standard_normal(20)
    full = IrregularSeries("s", "x", t, v, np.ones(20, bool))
    ctx, hor = normalize_context_horizon(full.slice(0, 16), full.slice(16, 20), 0.0, 1.0, 1.0)
    assert hor.features == ctx.features
    assert np.allclose(denormalize(hor.values_prime, hor.features), v[16:])
    gap = np.min(np.diff(t[:16]))
    assert np.allclose(hor.times_prime, (t[16:] - t[0]) / gap)


def test_standardizer_constant_features_and_clip():
    feats = [StaticFeatures(0.0, 1.0, float(m), 1.0, 60.0, 60.0) for m in (-1, 0, 1)]
    std = FeatureStandardizer.fit(feats)
    assert std.std[1] == 1.0 and std.std[4] == 1.0
    far = StaticFeatures(1e9, 1e9, 1e9, 1e9, 1e9, 1e9)
    assert np.all(np.abs(std([far])) <= std.clip)
