import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddn import nn
from ddn.errors import ConfigError, DataError, NumericalError, UsageError


def P(x, name="p"):
    return nn.Parameter(np.asarray(x, dtype=float), name)


class TestDense:
    def test_identity_relu(self):
        out = nn.dense_forward(np.array([-1.0, 2.0]), P(np.eye(2)), P(np.zeros(2)), "relu")
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_zero_weights(self):
        out = nn.dense_forward(np.array([5.0, -7.0]), P(np.zeros((2, 1))), P([3.0]))
        np.testing.assert_array_equal(out.data, [3.0])

    def test_singleton_softmax(self):
        out = nn.dense_forward(np.array([0.3, 0.9]), P([[1.0], [1.0]]), P([0.0]), "softmax")
        np.testing.assert_array_equal(out.data, [1.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            nn.dense_forward(np.ones(3), P(np.ones((2, 2))), P(np.zeros(2)))

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            nn.dense_forward(np.ones(2), P(np.ones((2, 2))), P(np.zeros(2)), "tanh")


class TestEmbedding:
    def test_row_selection(self):
        np.testing.assert_array_equal(nn.embedding_lookup(P([[1, 2], [3, 4]]), 1).data, [3, 4])

    def test_single_row(self):
        np.testing.assert_array_equal(nn.embedding_lookup(P([[7.0, 8.0]]), 0).data, [7.0, 8.0])

    def test_sparse_gradient(self):
        table = P([[1.0, 2.0], [3.0, 4.0]])
        g = np.array([0.5, -2.0])
        out = nn.embedding_lookup(table, 1)
        nn.backward(nn.sum(nn.mul(out, g)))
        np.testing.assert_array_equal(table.grad[1], g)
        np.testing.assert_array_equal(table.grad[0], 0.0)

    def test_out_of_range_names_feature(self):
        with pytest.raises(DataError, match="publisher.*5"):
            nn.embedding_lookup(P(np.zeros((3, 2))), 5, feature="publisher")


class TestDropout:
    def test_rate_zero(self, rng):
        x = nn.Tensor(rng.normal(size=(4, 5)))
        for mode in ("train", "mc_inference", "off"):
            assert nn.dropout(x, 0.0, mode, rng).data is x.data

    def test_off_mode(self, rng):
        x = nn.Tensor(rng.normal(size=7))
        np.testing.assert_array_equal(nn.dropout(x, 0.6, "off", rng).data, x.data)

    def test_monte_carlo_expectation(self):
        # oracle: E[mask / (1 - rate)] = 1, so each unit's mean equals its input
        x = np.array([1.0, -2.0, 0.5, 3.0])
        rng = np.random.default_rng(7)
        reps = 100_000
        outs = np.stack([nn.dropout(nn.Tensor(x), 0.5, "train", rng).data for _ in range(reps)])
        se = outs.std(axis=0, ddof=1) / np.sqrt(reps)
        assert np.all(np.abs(outs.mean(axis=0) - x) < 3 * se)

    def test_rate_one_rejected(self, rng):
        with pytest.raises(ConfigError):
            nn.dropout(nn.Tensor(np.ones(3)), 1.0, "train", rng)

    def test_trace_replay_bit_exact(self, rng):
        x = nn.Tensor(rng.normal(size=(3, 6)))
        trace = nn.ForwardTrace()
        a = nn.dropout(x, 0.3, "train", rng, trace)
        b = nn.dropout(a, 0.3, "train", rng, trace)
        again = nn.dropout(nn.dropout(x, 0.3, "train", None, rep := trace.replay()), 0.3, "train", None, rep)
        np.testing.assert_array_equal(again.data, b.data)

    def test_off_matches_unwrapped_layer(self, rng):
        W, b = P(rng.normal(size=(3, 4))), P(rng.normal(size=4))
        x = rng.normal(size=(5, 3))
        plain = nn.dense_forward(x, W, b, "relu").data
        wrapped = nn.dropout(nn.dense_forward(x, W, b, "relu"), 0.4, "off").data
        np.testing.assert_array_equal(plain, wrapped)


class TestBackward:
    def test_sum_gives_ones(self):
        p = P(np.arange(4.0))
        nn.backward(nn.sum(p))
        np.testing.assert_array_equal(p.grad, np.ones(4))

    def test_square(self):
        w = P([3.0])
        nn.backward(nn.sum(nn.square(w)))
        np.testing.assert_array_equal(w.grad, [6.0])

    def test_twice_is_usage_error(self):
        w = P([3.0])
        loss = nn.sum(nn.square(w))
        nn.backward(loss)
        with pytest.raises(UsageError):
            nn.backward(loss)

    def test_non_scalar_rejected(self):
        with pytest.raises(UsageError):
            nn.backward(nn.square(P([1.0, 2.0])))

    def test_gradient_accumulates_over_shared_use(self):
        w = P([2.0])
        nn.backward(nn.sum(nn.mul(w, w) + w))
        np.testing.assert_allclose(w.grad, [5.0])


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        w = P([1.0, -1.0])
        opt = nn.Adam([w], lr=0.1)
        opt.zero_grad()
        opt.step()
        np.testing.assert_array_equal(w.data, [1.0, -1.0])
        assert opt.state.step == 1

    def test_quadratic_convergence(self):
        # minimiser of (w - 2)^2 is 2
        w = P([0.0])
        opt = nn.Adam([w], lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            nn.backward(nn.sum(nn.square(nn.sub(w, 2.0))))
            opt.step()
        assert abs(w.data[0] - 2.0) < 1e-2

    def test_zero_learning_rate(self):
        w = P([0.5])
        opt = nn.Adam([w], lr=0.0)
        nn.backward(nn.sum(nn.square(w)))
        opt.step()
        assert w.data[0] == 0.5

    def test_nan_gradient_names_parameter(self):
        w = P([0.5, 1.0], name="fusion.weight")
        opt = nn.Adam([w])
        w.grad[1] = np.nan
        with pytest.raises(NumericalError, match=r"fusion\.weight.*\(1,\)"):
            opt.step()

    def test_moments_match_shapes_and_step_increases(self, rng):
        ps = [P(rng.normal(size=(2, 3))), P(rng.normal(size=4))]
        opt = nn.Adam(ps)
        for i in range(3):
            nn.backward(nn.sum(nn.square(ps[0])) + nn.sum(ps[1]))
            opt.step()
            opt.zero_grad()
            assert opt.state.step == i + 1
        assert [m.shape for m in opt.state.m] == [p.shape for p in ps]
        assert [v.shape for v in opt.state.v] == [p.shape for p in ps]


# gradient checks on every op, random points ---------------------------------

def _check(loss_fn, params, tol=1e-4):
    err = nn.gradient_check(loss_fn, params)
    assert err < tol, err


arrays = st.integers(0, 2**31 - 1)


@given(arrays)
def test_gradcheck_dense_softplus(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    W, b = P(rng.normal(size=(3, 2))), P(rng.normal(size=2))
    c = rng.normal(size=(4, 2))
    _check(lambda: nn.sum(nn.mul(nn.dense_forward(x, W, b, "softplus"), c)), [W, b])


@given(arrays)
def test_gradcheck_dense_softmax(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    W, b = P(rng.normal(size=(3, 3))), P(rng.normal(size=3))
    c = rng.normal(size=(4, 3))
    _check(lambda: nn.sum(nn.mul(nn.dense_forward(x, W, b, "softmax"), c)), [W, b])


@given(arrays)
def test_gradcheck_dense_relu_away_from_kink(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    W, b = P(rng.normal(size=(3, 2))), P(rng.normal(size=2))
    with nn.relu_margin_probe() as margins:
        nn.dense_forward(x, W, b, "relu")
    if min(margins) < 1e-2:
        return
    c = rng.normal(size=(4, 2))
    _check(lambda: nn.sum(nn.mul(nn.dense_forward(x, W, b, "relu"), c)), [W, b])


@given(arrays)
def test_gradcheck_embeddings(seed):
    rng = np.random.default_rng(seed)
    import scipy.sparse as sp

    table = P(rng.normal(size=(6, 3)))
    idx = rng.integers(0, 6, size=5)
    pool = sp.csr_matrix(rng.random((4, 6)) * (rng.random((4, 6)) < 0.5))
    c1, c2 = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    _check(lambda: nn.sum(nn.mul(nn.embedding_lookup(table, idx), c1))
           + nn.sum(nn.mul(nn.pooled_embedding(table, pool), c2)), [table])


@given(arrays)
def test_gradcheck_elementwise_and_reductions(seed):
    rng = np.random.default_rng(seed)
    a = P(rng.normal(size=(3, 4)))
    b = P(rng.uniform(0.5, 2.0, size=(3, 4)))
    c = rng.normal(size=3)

    def loss():
        t = nn.concat([nn.exp(nn.mul(a, 0.3)), nn.log(b), nn.log_softmax(a, axis=1)], axis=1)
        return nn.sum(nn.mul(nn.logsumexp(t, axis=1), c)) + nn.mean(nn.square(a - b))

    _check(loss, [a, b])


@given(arrays)
def test_gradcheck_dropout_fixed_mask(seed):
    rng = np.random.default_rng(seed)
    W, b = P(rng.normal(size=(3, 5))), P(rng.normal(size=5))
    x = rng.normal(size=(4, 3))
    trace = nn.ForwardTrace()
    nn.dropout(nn.dense_forward(x, W, b), 0.3, "train", rng, trace)

    def loss():
        return nn.sum(nn.square(nn.dropout(nn.dense_forward(x, W, b), 0.3, "train", None, trace.replay())))

    _check(loss, [W, b])


def test_determinism(rng):
    def run(seed):
        r = np.random.default_rng(seed)
        W, b = P(nn.glorot_uniform(r, 3, 4)), P(np.zeros(4))
        return nn.dropout(nn.dense_forward(np.ones((2, 3)), W, b, "relu"), 0.5, "train", r).data

    np.testing.assert_array_equal(run(3), run(3))


def test_glorot_bounds():
    r = np.random.default_rng(0)
    w = nn.glorot_uniform(r, 30, 20)
    assert np.abs(w).max() <= np.sqrt(6 / 50)
