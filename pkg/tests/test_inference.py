import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats
from scipy.optimize import minimize

from acss.errors import InvalidArgument, Unsupported
from acss.inference import (
    SparsityBasis,
    TestStatistic,
    compute_pvalue,
    evaluate_many,
    evaluate_statistic,
    h_v_bound,
    h_v_mc,
    kmeans_wcss,
    v_sparsity,
)


# ---------------------------------------------------------------- p-values


def test_pvalue_examples():
    assert compute_pvalue(5.0, [1.0, 2.0, 3.0]) == 0.25
    assert compute_pvalue(2.0, [2.0, 2.0, 2.0]) == 1.0
    assert compute_pvalue(0.0, [1.0, 1.0, 1.0, 1.0]) == 1.0
    with pytest.raises(InvalidArgument):
        compute_pvalue(0.0, [])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.floats(-6, 6), st.floats(0, 3))
def test_pvalue_grid_and_monotonicity(copies, t, dt):
    m = len(copies)
    p = compute_pvalue(t, copies)
    j = round(p * (m + 1)) - 1
    assert 0 <= j <= m and p == (1 + j) / (m + 1)
    assert compute_pvalue(t + dt, copies) <= p


# ---------------------------------------------------------------- sparsity


def test_v_sparsity_canonical():
    assert v_sparsity(np.array([0.0, 3.0, 0.0, -1.0]), SparsityBasis.canonical(4)) == 2
    assert v_sparsity(np.zeros(4), SparsityBasis.canonical(4)) == 0


def test_v_sparsity_changepoint_piecewise_constant():
    basis = SparsityBasis.changepoint(8)
    w = np.array([2.0, 2, 2, -1, -1, 5, 5, 5])
    # two changepoints -> three basis vectors
    assert v_sparsity(w, basis) == 3
    assert v_sparsity(np.zeros(8), basis) == 0


def brute_sparsity(w, vs):
    for k in range(vs.shape[0] + 1):
        for sub in itertools.combinations(range(vs.shape[0]), k):
            a = vs[list(sub)]
            if k == 0:
                if np.allclose(w, 0):
                    return 0
                continue
            coef = np.linalg.lstsq(a.T, w, rcond=None)[0]
            if np.allclose(a.T @ coef, w, atol=1e-9):
                return k
    return math.inf


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-2, 2), min_size=2, max_size=7))
def test_v_sparsity_changepoint_matches_brute_force(vals):
    w = np.array(vals, dtype=float)
    basis = SparsityBasis.changepoint(w.size)
    assert v_sparsity(w, basis) == brute_sparsity(w, basis.vectors)
    general = SparsityBasis(basis.vectors)
    assert v_sparsity(w, general) == brute_sparsity(w, basis.vectors)


def test_v_sparsity_outside_span():
    basis = SparsityBasis(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    assert v_sparsity(np.array([0.0, 0.0, 1.0]), basis) == math.inf
    with pytest.raises(InvalidArgument):
        SparsityBasis(np.zeros((1, 3)))


def test_h_v_bound():
    assert h_v_bound(5, 7, 5) == 5
    assert h_v_bound(1, 4, 100) == pytest.approx(4 * math.log(16))
    assert h_v_bound(2, 100, 1000) == pytest.approx(8 * math.log(200))
    assert 8 * math.log(200) == pytest.approx(42.3865, abs=1e-4)
    with pytest.raises(InvalidArgument):
        h_v_bound(0, 4, 3)
    with pytest.raises(InvalidArgument):
        h_v_bound(4, 4, 3)


def max_two_chi2_mean():
    # E max(Z1², Z2²) = ∫ P(max > t) dt with P(Z² <= t) = erf(√(t/2))
    return integrate.quad(lambda t: 1 - math.erf(math.sqrt(t / 2)) ** 2, 0, np.inf)[0]


def test_h_v_mc_canonical():
    rng = np.random.default_rng(0)
    est = h_v_mc(SparsityBasis.canonical(6), 6, 20_000, rng)
    assert abs(est.mean - 6) <= 3 * est.stderr
    est = h_v_mc(SparsityBasis.canonical(2), 1, 50_000, rng)
    assert max_two_chi2_mean() == pytest.approx(1.6366, abs=1e-3)
    assert abs(est.mean - max_two_chi2_mean()) <= 3 * est.stderr


def test_h_v_mc_nondecreasing_in_k():
    # common random numbers across k
    means = [h_v_mc(SparsityBasis.canonical(8), k, 5000, np.random.default_rng(1)).mean for k in range(1, 9)]
    assert all(a <= b for a, b in zip(means, means[1:]))


def test_h_v_mc_changepoint_below_bound():
    rng = np.random.default_rng(2)
    basis = SparsityBasis.changepoint(6)
    for k in (1, 2, 3):
        est = h_v_mc(basis, k, 2000, rng)
        assert est.exact
        assert est.mean <= h_v_bound(k, 6, 6) + 3 * est.stderr


def test_h_v_mc_large_changepoint_falls_back():
    est = h_v_mc(SparsityBasis.changepoint(30), 2, 10, np.random.default_rng(0))
    assert not est.exact and est.mean == h_v_bound(2, 30, 30)


def test_h_v_mc_enumeration_limit():
    basis = SparsityBasis(np.random.default_rng(0).standard_normal((60, 20)))
    with pytest.raises(Unsupported):
        h_v_mc(basis, 10, 10, np.random.default_rng(0))


# ---------------------------------------------------------------- k-means


def brute_kmeans_1d(x, k):
    """Optimal 1-d k-means by dynamic programming over sorted data."""
    xs = np.sort(x)
    n = xs.size
    c1 = np.concatenate([[0], np.cumsum(xs)])
    c2 = np.concatenate([[0], np.cumsum(xs**2)])

    def cost(i, j):  # points i..j-1
        s, s2, m = c1[j] - c1[i], c2[j] - c2[i], j - i
        return s2 - s * s / m

    dp = np.full((k + 1, n + 1), np.inf)
    dp[0, 0] = 0
    for kk in range(1, k + 1):
        for j in range(1, n + 1):
            if j >= kk:
                dp[kk, j] = min(dp[kk - 1, i] + cost(i, j) for i in range(kk - 1, j))
    return dp[k, n]


def test_kmeans_three_clusters():
    x = np.repeat([-1.0, 0.0, 1.0], 5)
    ts = TestStatistic("kmeans_wcss_decrease")
    assert evaluate_statistic(ts, x) > 0
    assert kmeans_wcss(x, 3) == pytest.approx(0.0, abs=1e-12)


def test_kmeans_close_to_optimal():
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = np.concatenate([rng.normal(0.4, 0.1, 30), rng.normal(-0.4, 0.1, 30), rng.normal(0, 0.1, 10)])
        for k in (2, 3):
            assert kmeans_wcss(x, k) == pytest.approx(brute_kmeans_1d(x, k), rel=1e-9)


def test_statistic_is_deterministic():
    x = np.random.default_rng(4).standard_normal(50)
    ts = TestStatistic("kmeans_wcss_decrease")
    assert evaluate_statistic(ts, x) == evaluate_statistic(ts, x)


# ---------------------------------------------------------------- other statistics


def test_abs_correlation():
    y = np.array([1.0, 2.0, 4.0, 3.0])
    ts = TestStatistic("abs_correlation", y=y)
    assert evaluate_statistic(ts, y) == pytest.approx(1.0)
    assert evaluate_statistic(ts, -y) == pytest.approx(1.0)
    x = np.array([0.5, -1.0, 2.0, 0.0])
    assert evaluate_statistic(ts, x) == pytest.approx(abs(stats.pearsonr(x, y)[0]))
    with pytest.warns(RuntimeWarning):
        assert evaluate_statistic(ts, np.ones(4)) == 0.0
    with pytest.raises(InvalidArgument):
        evaluate_statistic(ts, np.ones(3))


def enet_oracle(x, y, z, ridge, lam):
    """|b_x| via L-BFGS-B on split variables for the Z coefficients."""
    p = z.shape[1]

    def f(v):
        bx, pz, qz = v[0], v[1:p + 1], v[p + 1:]
        bz = pz - qz
        r = y - bx * x - z @ bz
        val = 0.5 * r @ r + 0.5 * ridge * bz @ bz + lam * (pz.sum() + qz.sum())
        gz = -z.T @ r + ridge * bz
        return val, np.concatenate([[-x @ r], gz + lam, -gz + lam])

    bounds = [(None, None)] + [(0, None)] * (2 * p)
    res = minimize(f, np.zeros(2 * p + 1), jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 20_000})
    return abs(res.x[0])


def test_elastic_net_statistic_matches_oracle():
    rng = np.random.default_rng(5)
    n, p = 50, 100
    z = rng.standard_normal((n, p)) / math.sqrt(p)
    theta = np.zeros(p)
    theta[:5] = 5
    x = z @ theta + rng.standard_normal(n)
    y = z[:, :5].sum(axis=1) + rng.standard_normal(n)
    ts = TestStatistic("elastic_net_coef", y=y, z=z)
    val = evaluate_statistic(ts, x)
    assert val == pytest.approx(enet_oracle(x, y, z, 3.0, 7.0), abs=1e-5)
    assert val < 0.5


def test_statistic_validation():
    with pytest.raises(InvalidArgument):
        TestStatistic("median")
    with pytest.raises(InvalidArgument):
        TestStatistic("abs_correlation")
    with pytest.raises(InvalidArgument):
        TestStatistic("elastic_net_coef", y=np.zeros(3))


def test_evaluate_many_rows():
    y = np.arange(5.0)
    ts = TestStatistic("abs_correlation", y=y)
    xs = np.vstack([y, -y, y**2])
    out = evaluate_many(ts, xs)
    assert out.shape == (3,)
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(1.0)
