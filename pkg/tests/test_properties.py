import math
from collections import Counter

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from probe import core, flow1d, flownd, heads
from probe import timeevo as te
from probe.config import TrainConfig
from probe.numeric import dual as D
from probe.numeric import finite_diff_gradient, matrix_exp

PROPS = settings(max_examples=100, deadline=None, derandomize=True)
SLOW = settings(max_examples=25, deadline=None, derandomize=True)
finite = st.floats(-30, 30, allow_nan=False)
seeds = st.integers(0, 2**32 - 1)

# Each primitive is applied to a bounded argument so every composition stays finite.
PRIMITIVES = [
    lambda v: D.exp(D.tanh(v)),
    lambda v: D.log(1.0 + v * v),
    D.sigmoid,
    lambda v: D.softplus(v) - 1.0,
    D.tanh,
    lambda v: v * 0.7 + 0.3,
    lambda v: v / (1.0 + D.sigmoid(v)),
]


@PROPS
@given(arrays(float, st.integers(1, 20), elements=finite))
def test_softmax_normalized(z):
    p = core.softmax(z)
    assert abs(p.sum() - 1) <= 1e-12 and np.all(p >= 0)


@PROPS
@given(st.floats(1e-150, 1e150), st.floats(1e-150, 1e150))
def test_log_loss_additive(a, b):
    assert abs(core.log_loss(a * b) - core.log_loss(a) - core.log_loss(b)) <= 1e-12 * max(
        1.0, abs(core.log_loss(a * b)))


@settings(max_examples=15, deadline=None, derandomize=True)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=16).filter(lambda c: sum(c) > 0))
def test_fit_discrete_reaches_frequencies(counts):
    data = [k for k, c in enumerate(counts) for _ in range(c)]
    est = core.fit_discrete(data, support=range(len(counts)))
    freqs = np.array(counts) / sum(counts)
    assert np.max(np.abs(est.probabilities - freqs)) <= 1e-4
    entropy = -sum(f * math.log(f) for f in freqs if f > 0)
    assert abs(core.expected_loss(est.prob, data) - entropy) <= 1e-4


@settings(max_examples=1000, deadline=None, derandomize=True)
@given(st.lists(st.integers(0, len(PRIMITIVES) - 1), min_size=1, max_size=6),
       st.floats(-3, 3))
def test_dual_matches_central_difference(ops, x):
    def f(v):
        for k in ops:
            v = PRIMITIVES[k](v)
        return v
    _, d = D.dual_forward(f, x)
    fd = finite_diff_gradient(lambda v: f(float(v[0])), [x], 1e-5)[0]
    assert abs(d - fd) <= 1e-5 * max(1.0, abs(fd))


@PROPS
@given(seeds, st.floats(0, 1), st.floats(0, 1))
def test_expm_semigroup(seed, s, t):
    a = np.random.default_rng(seed).normal(size=(4, 4))
    a *= 2.0 / max(abs(np.linalg.eigvals(a)))
    np.testing.assert_allclose(matrix_exp(a, s + t), matrix_exp(a, s) @ matrix_exp(a, t),
                               rtol=0, atol=1e-9)


@SLOW
@given(seeds)
def test_flow1d_monotone(seed):
    rng = np.random.default_rng(seed)
    net = flow1d.MonotoneNet.init(rng)
    x = np.sort(rng.normal(0, 20, 400))
    y, dydx = flow1d.forward_cdf(net, x)
    assert np.all(np.diff(y)[np.diff(x) > 0] >= 0)
    assert np.all((y >= 0) & (y <= 1)) and np.all(dydx >= 0)
    lo, hi = rng.normal(0, 3, size=(2, 100))
    lo, hi = np.minimum(lo, hi) - 1e-3, np.maximum(lo, hi)
    assert np.all(flow1d.forward_cdf(net, lo)[0] < flow1d.forward_cdf(net, hi)[0])


@SLOW
@given(seeds, st.integers(2, 4))
def test_flownd_triangular(seed, n):
    from probe.numeric import finite_diff_jacobian
    rng = np.random.default_rng(seed)
    net = flownd.TriangularFlowNet.init(n, rng)
    a = rng.normal(0, 1.5, size=n)
    jac = finite_diff_jacobian(flownd.flow_map(net), a, 1e-6)
    assert np.max(np.abs(np.triu(jac, 1))) <= 1e-8
    _, diag = flownd.forward_flow(net, a)
    assert np.all(diag > 0)


@SLOW
@given(seeds, st.integers(1, 4))
def test_local_table_sums_to_nll(seed, n):
    rng = np.random.default_rng(seed)
    net = flownd.TriangularFlowNet.init(n, rng)
    a = rng.normal(0, 2, size=n)
    table = flownd.local_losses(net, a)
    assert abs(math.fsum(table.losses.ravel()) - flownd.nll_nd(net, a)) <= 1e-12


@SLOW
@given(seeds, st.integers(1, 3))
def test_time_states_confined(seed, n):
    rng = np.random.default_rng(seed)
    m = te.NonlinearTimeModel.init(n, n, rng, coupling=rng.uniform(0, 0.3),
                                   push=rng.uniform(0, 0.15), boundary=rng.uniform(0.02, 0.5))
    states = te.evolve_nonlinear(m, rng.uniform(1e-3, 1 - 1e-3, size=(40, n))).states
    assert np.all((states > 0) & (states < 1))


@PROPS
@given(seeds, st.integers(1, 6))
def test_linear_unit_determinant(seed, n):
    m = te.LinearTimeModel.random(n, np.random.default_rng(seed))
    assert abs(np.linalg.det(m.propagator()) - 1) <= 1e-8


@PROPS
@given(seeds, st.integers(2, 6))
def test_classifier_normalized(seed, k):
    rng = np.random.default_rng(seed)
    clf = heads.SoftmaxClassifier.init(range(k), 2, rng)
    p = clf.probabilities(rng.normal(0, 10, size=(20, 2)))
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-12


@PROPS
@given(seeds, st.integers(1, 4))
def test_covariance_factor_spd(seed, n):
    vec = np.random.default_rng(seed).normal(0, 5, size=n * (n + 1) // 2)
    factor = heads.tril_from_vector(vec, n)
    sigma = factor @ factor.T
    assert np.all(np.diag(factor) > 0) and np.all(np.triu(factor, 1) == 0)
    assert np.array_equal(sigma, sigma.T)
    assert np.prod(np.diag(factor)) ** 2 > 0


@SLOW
@given(st.lists(st.sampled_from("abc"), min_size=1, max_size=30))
def test_conditional_rows_sum_to_one(labels):
    from probe.verify import empirical_conditional
    pairs = [(i % 3, v) for i, v in enumerate(labels)]
    for row in empirical_conditional(pairs).values():
        assert abs(math.fsum(row.values()) - 1) <= 1e-12
    counts = Counter(pairs)
    assert sum(counts.values()) == len(labels)


def test_schema_rejects_negative_rate():
    import pytest
    from probe.errors import ConfigError
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1.0)
