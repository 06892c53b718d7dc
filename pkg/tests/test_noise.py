import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddn.errors import ConfigError, DataError
from ddn.noise import ImpressionRecord, empirical_log_ctr, sigma_eps


def test_delta_method_example():
    # p = b * exp(mu) = 0.01
    assert math.isclose(sigma_eps(0.0, 1000, 0.01), math.sqrt(0.99 / 10), rel_tol=1e-12)
    assert math.isclose(sigma_eps(0.0, 1000, 0.01), 0.31464, abs_tol=1e-5)


def test_quadrupling_r_halves():
    assert sigma_eps(0.3, 4000, 0.02) == pytest.approx(sigma_eps(0.3, 1000, 0.02) / 2, rel=1e-14)


def test_half_probability_single_impression():
    assert sigma_eps(0.0, 1, 0.5) == 1.0


def test_errors():
    with pytest.raises(DataError):
        sigma_eps(0.0, 0, 0.1)
    with pytest.raises(DataError):
        sigma_eps(float("nan"), 10, 0.1)
    with pytest.raises(ConfigError):
        sigma_eps(0.0, 10, 1.5)


def test_probability_clamped():
    assert np.isfinite(sigma_eps(50.0, 10, 0.5))
    assert np.isfinite(sigma_eps(-800.0, 10, 0.5))


def test_label_zero_at_baseline():
    # (clicks + 0.5) / (r + 1) == baseline
    assert empirical_log_ctr(ImpressionRecord(r=99, clicks=4), 0.045) == pytest.approx(0.0, abs=1e-15)


def test_label_smoothing_anchor():
    assert empirical_log_ctr(ImpressionRecord(r=999, clicks=0), 0.0005) == pytest.approx(0.0, abs=1e-12)


def test_label_example():
    v = empirical_log_ctr(ImpressionRecord(r=1000, clicks=20), 0.01)
    assert v == pytest.approx(math.log((20.5 / 1001) / 0.01), rel=1e-14)
    assert v == pytest.approx(0.7169, abs=1e-4)


def test_record_validation():
    with pytest.raises(DataError):
        ImpressionRecord(r=0, clicks=0)
    with pytest.raises(DataError):
        ImpressionRecord(r=5, clicks=6)


def test_vectorised_matches_scalar():
    r = np.array([10, 200, 3000])
    c = np.array([0, 7, 90])
    v = empirical_log_ctr(r=r, clicks=c, calibration_baseline=0.02)
    for i in range(3):
        assert v[i] == empirical_log_ctr(ImpressionRecord(int(r[i]), int(c[i])), 0.02)


@pytest.mark.parametrize("p", [0.005, 0.01, 0.02, 0.05])
@pytest.mark.parametrize("r", [500, 2000, 10000])
def test_monte_carlo_fidelity(p, r):
    rng = np.random.default_rng(int(p * 1e4) + r)
    clicks = rng.binomial(r, p, size=100_000)
    sd = np.std(empirical_log_ctr(r=np.full(clicks.shape, r), clicks=clicks, calibration_baseline=0.01))
    assert abs(sd - sigma_eps(math.log(p / 0.01), r, 0.01)) / sd < 0.10


@given(st.floats(-5, 2), st.integers(1, 10**6), st.floats(0.001, 0.2))
def test_decreasing_in_r(mu, r, b):
    assert sigma_eps(mu, r + 1, b) < sigma_eps(mu, r, b)


@given(st.floats(0.001, 0.9), st.integers(1, 10**6))
def test_decreasing_in_p(p, r):
    b = 0.1
    lo = sigma_eps(math.log(p / b), r, b)
    hi = sigma_eps(math.log(p * 1.05 / b), r, b)
    assert hi < lo
