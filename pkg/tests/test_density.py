import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from ddn import density as D
from ddn import nn
from ddn.errors import ConfigError

LOG_2PI_HALF = 0.5 * math.log(2 * math.pi)


def random_gmm(rng, k=3):
    a = rng.random(k) + 0.1
    return D.GmmParams(a / a.sum(), rng.normal(0, 1.5, k), rng.uniform(0.2, 1.5, k))


def direct_nll(g, y):
    # oracle: scipy normal pdfs, summed then logged
    return -math.log(sum(a * stats.norm.pdf(y, m, s) for a, m, s in zip(g.alphas, g.mus, g.sigmas)))


class TestHead:
    def test_single_component_weight(self):
        g = D.head_forward([5.0, 0.1, 0.2], 1)
        np.testing.assert_array_equal(g.alphas, [1.0])

    def test_equal_logits(self):
        g = D.head_forward([2.0, 2.0, 2.0, 0, 0, 0, 0, 0, 0], 3)
        np.testing.assert_allclose(g.alphas, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_sigma_floor(self):
        g = D.head_forward([0.0, 0.0, -1000.0], 1)
        assert g.sigmas[0] == D.SIGMA_FLOOR

    def test_k_zero(self):
        with pytest.raises(ConfigError):
            D.head_forward([], 0)

    @given(st.integers(0, 2**31 - 1), st.integers(1, 6))
    def test_invariants(self, seed, k):
        raw = np.random.default_rng(seed).normal(0, 30, size=(5, 3 * k))
        g = D.head_forward(raw, k).validate()
        assert np.all(np.abs(g.alphas.sum(-1) - 1) <= 1e-9)


class TestMoments:
    def test_symmetric_mean(self):
        assert D.mixture_mean(D.GmmParams([0.5, 0.5], [1.0, -1.0], [1.0, 1.0])) == 0.0

    def test_single_mean(self):
        assert D.mixture_mean(D.GmmParams([1.0], [2.5], [0.3])) == 2.5

    def test_std_by_hand(self):
        assert math.isclose(D.mixture_std(D.GmmParams([0.5, 0.5], [1.0, -1.0], [1.0, 1.0])), math.sqrt(2))

    def test_single_std(self):
        assert D.mixture_std(D.GmmParams([1.0], [4.0], [0.7])) == 0.7

    def test_monte_carlo(self):
        rng = np.random.default_rng(11)
        g = random_gmm(rng)
        n = 1_000_000
        comp = rng.choice(3, size=n, p=g.alphas)
        ys = rng.normal(g.mus[comp], g.sigmas[comp])
        se_mean = ys.std() / math.sqrt(n)
        assert abs(ys.mean() - D.mixture_mean(g)) < 3 * se_mean
        # std of the sample std: sqrt((mu4/s^4 - 1) / (4n)) * s
        s = ys.std()
        kurt = np.mean((ys - ys.mean()) ** 4) / s**4
        se_std = s * math.sqrt((kurt - 1) / (4 * n))
        assert abs(s - D.mixture_std(g)) < 3 * se_std

    def test_zero_variance_gives_zero(self):
        g = D.GmmParams([1.0], [0.0], [0.0])
        assert D.mixture_std(g) == 0.0


class TestLosses:
    def test_standard_normal_mode(self):
        assert math.isclose(D.mdn_nll(D.GmmParams([1.0], [0.0], [1.0]), 0.0), LOG_2PI_HALF, rel_tol=1e-12)
        assert math.isclose(LOG_2PI_HALF, 0.918939, abs_tol=1e-6)

    def test_quadratic_term(self):
        assert math.isclose(D.mdn_nll(D.GmmParams([1.0], [0.0], [1.0]), 2.0), LOG_2PI_HALF + 2.0, rel_tol=1e-12)

    def test_direct_density_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            g = random_gmm(rng, int(rng.integers(1, 5)))
            y = rng.normal(0, 2)
            assert abs(D.mdn_nll(g, y) - direct_nll(g, y)) < 1e-10

    def test_ddn_zero_noise_equals_mdn(self):
        rng = np.random.default_rng(4)
        g = random_gmm(rng)
        assert D.ddn_nll(g, 0.3, 0.0) == D.mdn_nll(g, 0.3)

    def test_ddn_variances_add(self):
        v = D.ddn_nll(D.GmmParams([1.0], [0.0], [1.0]), 0.0, 1.0)
        assert math.isclose(v, 0.5 * math.log(2 * math.pi * 2), rel_tol=1e-12)
        assert math.isclose(v, 1.265512, abs_tol=1e-6)

    def test_ddn_negative_noise(self):
        with pytest.raises(ConfigError):
            D.ddn_nll(D.GmmParams([1.0], [0.0], [1.0]), 0.0, -0.1)

    def test_gradient_attenuation(self):
        # oracle: d/dmu of -log N(y; mu, s^2 + e^2) = -(y - mu) / (s^2 + e^2)
        mu, y, s = 0.0, 1.3, 0.8
        mags = []
        for e in (0.0, 0.5, 1.0, 2.0):
            m = nn.Parameter(np.array([[mu]]))
            loss = D.gmm_nll(nn.Tensor(np.zeros((1, 1))), m, nn.Tensor(np.array([[s]])), np.array([y]), np.array([e]))
            nn.backward(nn.sum(loss))
            assert math.isclose(m.grad[0, 0], -(y - mu) / (s**2 + e**2), rel_tol=1e-12)
            mags.append(abs(m.grad[0, 0]))
        assert all(a > b for a, b in zip(mags, mags[1:]))

    def test_reg_mse(self):
        assert D.reg_mse(2, 2) == 0
        assert D.reg_mse(0, 3) == 9
        assert np.mean(D.reg_mse([0, 1], [1, 1])) == 0.5

    def test_effective_variance_never_smaller(self):
        g = D.GmmParams([0.3, 0.7], [0, 1], [0.5, 0.2])
        aug = D.NoiseAugmentedGmm(g, 0.4)
        assert np.all(aug.effective_sigmas >= g.sigmas)


@given(st.integers(0, 2**31 - 1))
def test_density_integrates_to_one(seed):
    g = random_gmm(np.random.default_rng(seed))
    lo = float(np.min(g.mus - 12 * g.sigmas))
    hi = float(np.max(g.mus + 12 * g.sigmas))
    val, _ = integrate.quad(lambda y: D.mixture_pdf(g, y), lo, hi, points=list(g.mus), limit=200)
    assert abs(val - 1.0) < 1e-6


@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_nll_bounded_below_by_max_density(seed, y):
    g = random_gmm(np.random.default_rng(seed))
    grid = np.linspace(g.mus.min() - 3, g.mus.max() + 3, 20001)
    peak = D.mixture_pdf(g, grid).max() * (1 + 1e-6)
    assert D.mdn_nll(g, y) >= -math.log(peak)


@given(st.integers(0, 2**31 - 1))
def test_nll_finite_far_from_means(seed):
    g = random_gmm(np.random.default_rng(seed))
    y = float(g.mus.max() + 100 * g.sigmas.max())
    assert np.isfinite(D.mdn_nll(g, y))
    assert np.isfinite(D.mdn_nll(g, -y))


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_ddn_nll_continuous_in_noise(seed, e, de):
    g = random_gmm(np.random.default_rng(seed))
    a = D.ddn_nll(g, 0.7, e)
    b = D.ddn_nll(g, 0.7, e + 1e-7 * de)
    assert abs(a - b) < 1e-5


@given(st.integers(0, 2**31 - 1), st.sampled_from(["MDN", "DDN", "REG"]))
def test_batch_loss_gradcheck(seed, kind):
    rng = np.random.default_rng(seed)
    logits = nn.Parameter(rng.normal(size=(4, 3)))
    mus = nn.Parameter(rng.normal(size=(4, 3)))
    pre = nn.Parameter(rng.normal(size=(4, 3)))
    y = rng.normal(size=4)
    eps = rng.uniform(0, 1, size=4)

    def loss():
        sig = nn.add(nn.softplus(pre), D.SIGMA_FLOOR)
        return nn.sum(D.batch_loss(kind, logits, mus, sig, y, eps))

    assert nn.gradient_check(loss, [logits, mus, pre]) < 1e-4


def test_gmm_nll_matches_numpy_version():
    rng = np.random.default_rng(5)
    logits, mus, sig = rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.uniform(0.2, 1, (6, 3))
    y, e = rng.normal(size=6), rng.uniform(0, 1, 6)
    t = D.gmm_nll(nn.Tensor(logits), nn.Tensor(mus), nn.Tensor(sig), y, e).data
    g = D.GmmParams(D._softmax(logits), mus, sig)
    np.testing.assert_allclose(t, D.ddn_nll(g, y, e), rtol=1e-12)
