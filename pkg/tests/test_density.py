import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import multivariate_normal

from acss.constraints import builtin_constraints
from acss.density import (
    ConditioningState,
    log_density_ratio,
    log_unnorm_density,
    membership_check,
)
from acss.errors import InvalidArgument
from acss.estimation import EstimationProblem, fit, mixture_constraints
from acss.models import GaussianLinear, GaussianMixture2, draw_perturbation

THETA0 = np.array([0.5, 0.4, 0.1, -0.4, 0.1])


def linear_state(seed=0, n=6, d=3, sigma=2.0, ridge=0.3, nu2=1.5):
    rng = np.random.default_rng(seed)
    model = GaussianLinear(rng.standard_normal((n, d)), nu2=nu2, ridge=ridge)
    prob = EstimationProblem(model, "constrained", sigma, "activeset_qp",
                             constraints=builtin_constraints("nonnegative", d))
    x = model.simulate(rng.standard_normal(d), rng)
    res = fit(prob, x, draw_perturbation(d, sigma, rng))
    return ConditioningState.from_fit(prob, res, x), x, rng


def mixture_state(seed=0, sigma=8.0):
    rng = np.random.default_rng(seed)
    x = GaussianMixture2().simulate(THETA0, rng, n=200)
    prob = EstimationProblem(GaussianMixture2(), "constrained", sigma, "projected_gradient",
                             constraints=mixture_constraints(0.098))
    res = fit(prob, x, draw_perturbation(5, sigma, rng))
    assert res.ssosp
    return ConditioningState.from_fit(prob, res, x), x, rng


def plugin_normal(state):
    """Closed-form Gaussian of the plug-in law, written out from first principles.

    Completing the square in log f(x; θ̂) - d/(2σ²)||ĝ - ∇L(θ̂; x)||² with
    ∇L = Zᵀ(Zθ̂ - x)/ν² + ∇R(θ̂) gives precision P = I/ν² + (d/σ²) Z Zᵀ/ν⁴.
    """
    m = state.model
    z, nu2, d, s2 = m.z, m.nu2, state.d, state.sigma**2
    prec = np.eye(m.n) / nu2 + (d / s2) * z @ z.T / nu2**2
    # linear coefficient from both quadratics
    r = state.g_hat - z.T @ z @ state.theta_hat / nu2 - m.regularizer_grad(state.theta_hat)
    lin = z @ state.theta_hat / nu2 - (d / s2) * z @ r / nu2
    cov = np.linalg.inv(prec)
    return cov @ lin, cov


def test_decomposition_sums():
    state, x, _ = linear_state()
    v = log_unnorm_density(state, x)
    assert v.log_value == v.log_f + v.gauss_exponent + v.log_det
    assert v.indicator


def test_gaussian_density_proportional_to_closed_form():
    state, _, rng = linear_state(seed=1)
    mean, cov = plugin_normal(state)
    mvn = multivariate_normal(mean, cov)
    diffs = []
    for _ in range(100):
        x = mean + 3 * rng.standard_normal(mean.shape[0])
        diffs.append(log_unnorm_density(state, x).log_value - mvn.logpdf(x))
    assert np.var(diffs) <= 1e-16


def test_fast_path_agrees_with_general_path():
    state, _, rng = linear_state(seed=2)
    for _ in range(20):
        x = rng.standard_normal(state.model.n)
        a = log_unnorm_density(state, x, check_membership=True)
        b = log_unnorm_density(state, x, fast=True)
        assert a.indicator and b.indicator
        assert a.log_value == pytest.approx(b.log_value, abs=1e-9)


def test_fast_path_rejects_mixture():
    state, x, _ = mixture_state()
    with pytest.raises(InvalidArgument):
        log_unnorm_density(state, x, fast=True)


def test_exponent_vanishes_at_stationary_x():
    # with Z = I and ν² = 1, ∇L(θ̂; x) = θ̂ - x, so x = θ̂ - ĝ zeroes the residual
    rng = np.random.default_rng(3)
    model = GaussianLinear(np.eye(4))
    prob = EstimationProblem(model, "constrained", 3.0, "pava", constraints=builtin_constraints("monotone", 4))
    x = rng.standard_normal(4)
    state = ConditioningState.from_fit(prob, fit(prob, x, draw_perturbation(4, 3.0, rng)), x)
    v = log_unnorm_density(state, state.theta_hat - state.g_hat)
    assert v.gauss_exponent == 0.0
    assert log_unnorm_density(state, x).gauss_exponent < 0.0


def test_ratio_matches_closed_form():
    state, _, rng = linear_state(seed=4)
    mean, cov = plugin_normal(state)
    mvn = multivariate_normal(mean, cov)
    for _ in range(10):
        a, b = rng.standard_normal((2, mean.shape[0]))
        assert log_density_ratio(state, a, b) == pytest.approx(mvn.logpdf(a) - mvn.logpdf(b), abs=1e-9)
    assert log_density_ratio(state, a, a) == 0.0


def test_penalized_density_uses_support_block():
    rng = np.random.default_rng(5)
    model = GaussianLinear(rng.standard_normal((8, 5)), ridge=0.01)
    prob = EstimationProblem(model, "l1_penalized", 2.0, "coordinate_descent", lambda_l1=1.0)
    x = model.simulate(np.array([2.0, 0, 0, -1, 0]), rng)
    res = fit(prob, x, draw_perturbation(5, 2.0, rng))
    state = ConditioningState.from_fit(prob, res, x)
    s = state.active
    v = log_unnorm_density(state, x)
    h = model.hessian_constant()[np.ix_(s, s)]
    assert v.log_det == pytest.approx(np.linalg.slogdet(h)[1], abs=1e-10)
    mean, cov = plugin_normal(state)
    mvn = multivariate_normal(mean, cov)
    diffs = [log_unnorm_density(state, y).log_value - mvn.logpdf(y) for y in rng.standard_normal((30, 8))]
    assert np.var(diffs) <= 1e-16


def test_membership_gaussian_always_true():
    state, _, rng = linear_state(seed=6)
    assert all(membership_check(state, 3 * rng.standard_normal(state.model.n)) for _ in range(20))


def test_membership_self_consistency_mixture():
    state, x, _ = mixture_state(seed=7)
    assert membership_check(state, x)


def test_membership_far_dataset_is_deterministic():
    state, x, _ = mixture_state(seed=8)
    far = x + 5.0
    a = membership_check(state, far)
    b = membership_check(state, far)
    assert isinstance(a, bool) and a == b


def test_checked_implies_unchecked():
    state, x, rng = mixture_state(seed=9)
    for _ in range(10):
        y = x.copy()
        idx = rng.choice(x.shape[0], 5, replace=False)
        y[idx] = GaussianMixture2().simulate(state.theta_hat, rng, n=5)
        checked = log_unnorm_density(state, y, check_membership=True)
        unchecked = log_unnorm_density(state, y, check_membership=False)
        if checked.indicator:
            assert unchecked.indicator
            assert checked.log_value == unchecked.log_value


def test_mixture_slice_integrates_finitely():
    state, x, _ = mixture_state(seed=10)

    def dens(t):
        y = x.copy()
        y[0] = t
        return np.exp(log_unnorm_density(state, y, check_membership=False).log_value - base)

    base = log_unnorm_density(state, x, check_membership=False).log_value
    val, err = quad(dens, -3, 3, limit=200)
    assert np.isfinite(val) and val > 0
    tail = dens(10.0)
    assert tail < 1e-10


def test_mixture_ratio_shift_invariance():
    state, x, rng = mixture_state(seed=11)
    y = x.copy()
    y[:3] = rng.standard_normal(3) * 0.1
    r = log_density_ratio(state, y, x, check_membership=False)
    a = log_unnorm_density(state, y, check_membership=False).log_value
    b = log_unnorm_density(state, x, check_membership=False).log_value
    assert r == pytest.approx((a + 123.4) - (b + 123.4), abs=1e-10)


def test_mixture_non_pd_hessian_gives_minus_infinity():
    state, x, _ = mixture_state(seed=12)
    # all data at one point: curvature in the mixing weight collapses
    y = np.full_like(x, state.theta_hat[1])
    v = log_unnorm_density(state, y, check_membership=False)
    if not v.indicator:
        assert v.log_value == -np.inf


def test_from_fit_requires_ssosp():
    from acss.estimation import FitResult, certify
    from acss.models import Perturbation

    model = GaussianLinear(np.eye(2))
    prob = EstimationProblem(model, "constrained", 1.0, "activeset_qp")
    cert = certify(prob, np.ones(2), np.zeros(2), Perturbation(np.zeros(2), 1.0))
    assert not cert.ssosp
    with pytest.raises(InvalidArgument):
        ConditioningState.from_fit(prob, FitResult(cert, 0, False, 0.0), np.zeros(2))
