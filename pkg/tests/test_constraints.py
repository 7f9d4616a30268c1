import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from acss.constraints import (
    ConstraintSet,
    Tolerances,
    active_set,
    builtin_constraints,
    check_ssosp_constrained,
    check_ssosp_penalized,
    ortho_complement_basis,
)
from acss.errors import InfeasiblePoint, InvalidArgument, Unsupported
from acss.estimation import solve_pava
from acss.models import GaussianLinear, Perturbation


def test_nonnegative_catalog():
    cs = builtin_constraints("nonnegative", 3)
    np.testing.assert_array_equal(cs.a, -np.eye(3))
    np.testing.assert_array_equal(cs.b, np.zeros(3))


def test_monotone_catalog():
    cs = builtin_constraints("monotone", 3)
    np.testing.assert_array_equal(cs.a, [[1, -1, 0], [0, 1, -1]])
    assert cs.is_feasible(np.array([1.0, 2, 3]))
    assert not cs.is_feasible(np.array([2.0, 1, 3]))


def test_linf_catalog():
    cs = builtin_constraints("linf", 2, C=1.0)
    assert cs.r == 4
    assert cs.is_feasible(np.array([0.5, -0.5]))
    assert not cs.is_feasible(np.array([1.5, 0.0]))


def test_l1_and_fused_catalog():
    cs = builtin_constraints("l1", 3, C=1.0)
    assert cs.r == 8
    assert cs.is_feasible(np.array([0.3, -0.3, 0.4]))
    assert not cs.is_feasible(np.array([0.5, -0.3, 0.4]))
    fused = builtin_constraints("fused_l1", 3, C=1.0)
    assert fused.is_feasible(np.array([0.0, 0.5, 0.0]))
    assert not fused.is_feasible(np.array([0.0, 0.6, 0.0]))
    with pytest.raises(Unsupported):
        builtin_constraints("l1", 25, C=1.0)
    with pytest.raises(InvalidArgument):
        builtin_constraints("l1", 3)


def test_lower_bound_indices():
    cs = builtin_constraints("lower_bound", 5, c=0.098, indices=[2, 4])
    assert cs.r == 2
    assert cs.is_feasible(np.array([0.5, 0, 0.1, 0, 0.098]))
    assert not cs.is_feasible(np.array([0.5, 0, 0.05, 0, 0.1]))


def test_constraint_validation():
    with pytest.raises(InvalidArgument):
        ConstraintSet(np.array([[0.0, 0.0]]), np.array([1.0]))
    with pytest.raises(InvalidArgument):
        ConstraintSet(np.eye(2), np.zeros(3))
    with pytest.raises(InvalidArgument):
        ConstraintSet(np.array([[np.inf, 0.0]]), np.array([1.0]))


def test_json_roundtrip():
    cs = builtin_constraints("monotone", 4)
    back = ConstraintSet.from_json(cs.to_json())
    np.testing.assert_array_equal(back.a, cs.a)
    np.testing.assert_array_equal(back.b, cs.b)
    assert back.kind == "monotone"


def test_active_set_examples():
    assert active_set(builtin_constraints("monotone", 3), np.array([1.0, 1.0, 2.0]), 1e-8).tolist() == [0]
    assert active_set(ConstraintSet.unconstrained(3), np.zeros(3)).size == 0
    assert active_set(builtin_constraints("nonnegative", 2), np.array([1e-9, 1.0]), 1e-8).tolist() == [0]
    with pytest.raises(InfeasiblePoint):
        active_set(builtin_constraints("nonnegative", 2), np.array([-1e-3, 1.0]), 1e-8)


def test_ortho_basis_examples():
    cs = ConstraintSet(np.array([[1.0, -1.0], [1.0, 0.0], [2.0, 0.0]]), np.zeros(3))
    np.testing.assert_array_equal(ortho_complement_basis(cs, np.array([], dtype=int)), np.eye(2))
    u = ortho_complement_basis(cs, np.array([0]))
    np.testing.assert_allclose(u @ u.T, 0.5 * np.ones((2, 2)), atol=1e-12)
    u = ortho_complement_basis(cs, np.array([1, 2]))
    assert u.shape == (2, 1)
    np.testing.assert_allclose(np.abs(u[:, 0]), [0.0, 1.0], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
              elements=st.floats(-3, 3, allow_subnormal=False)))
def test_ortho_basis_properties(rows):
    rows = rows[np.any(np.abs(rows) > 1e-3, axis=1)]
    if rows.shape[0] == 0:
        return
    cs = ConstraintSet(rows, np.zeros(rows.shape[0]))
    u = ortho_complement_basis(cs, np.arange(cs.r))
    np.testing.assert_allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-10)
    np.testing.assert_allclose(rows @ u, 0.0, atol=1e-8 * (1 + np.abs(rows).max()))
    # projector oracle from the pseudo-inverse of the active rows
    proj = np.eye(cs.d) - np.linalg.pinv(rows, rcond=1e-10) @ rows
    np.testing.assert_allclose(u @ u.T, proj, atol=1e-8)


def test_certificate_unconstrained_minimizer():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((6, 3))
    model = GaussianLinear(z)
    x = rng.standard_normal(6)
    theta = np.linalg.solve(z.T @ z, z.T @ x)
    cert = check_ssosp_constrained(model, ConstraintSet.unconstrained(3), theta, x, None)
    assert cert.ssosp and cert.feasible and cert.kkt_ok and cert.second_order_ok
    np.testing.assert_allclose(cert.g_hat, 0.0, atol=1e-10)


def test_certificate_pava_multipliers():
    # KKT for min ½||θ - y||² s.t. θ monotone: θ - y + Aᵀλ = 0; λ by cumulative sums
    y = np.array([3.0, 1.0, 2.0, 5.0, 4.0])
    theta = solve_pava(y)
    cs = builtin_constraints("monotone", 5)
    cert = check_ssosp_constrained(GaussianLinear(np.eye(5)), cs, theta, y, None)
    assert cert.ssosp
    lam_oracle = np.cumsum(y - theta)[:-1]
    np.testing.assert_allclose(cert.multipliers, lam_oracle, atol=1e-10)
    assert np.all(cert.multipliers >= 0)
    inactive = np.setdiff1d(np.arange(cs.r), cert.active)
    np.testing.assert_array_equal(cert.multipliers[inactive], 0.0)


def test_certificate_detects_infeasible():
    cs = builtin_constraints("nonnegative", 2)
    cert = check_ssosp_constrained(GaussianLinear(np.eye(2)), cs, np.array([-1e-3, 1.0]), np.zeros(2), None)
    assert not cert.feasible and not cert.ssosp


def test_certificate_flags_nonstationary_point():
    cs = ConstraintSet.unconstrained(2)
    cert = check_ssosp_constrained(GaussianLinear(np.eye(2)), cs, np.ones(2), np.zeros(2), None)
    assert cert.feasible and not cert.kkt_ok and not cert.ssosp


def test_certificate_second_order_failure():
    # Z with a null direction: the Hessian is singular on the free subspace
    model = GaussianLinear(np.array([[1.0, 0.0]]))
    cert = check_ssosp_constrained(model, ConstraintSet.unconstrained(2), np.zeros(2), np.zeros(1), None)
    assert cert.kkt_ok and not cert.second_order_ok
    # pinning the null direction restores it
    cs = ConstraintSet(np.array([[0.0, 1.0], [0.0, -1.0]]), np.zeros(2))
    cert = check_ssosp_constrained(model, cs, np.zeros(2), np.zeros(1), None)
    assert cert.ssosp


def soft(v, lam):
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0)


def test_penalized_soft_threshold_solution():
    model = GaussianLinear(np.eye(4))
    x = np.array([3.0, -0.5, 1.5, -2.5])
    lam = 1.0
    theta = soft(x, lam)
    cert = check_ssosp_penalized(model, lam, theta, x, None)
    assert cert.ssosp
    np.testing.assert_array_equal(cert.active, [0, 2, 3])
    s = cert.multipliers
    np.testing.assert_array_equal(s[cert.active], np.sign(theta[cert.active]))
    assert np.all(np.abs(s) <= 1)
    # stationarity: g + λ s = 0 on the support, so g_S = -λ sign(θ_S)
    np.testing.assert_allclose(cert.g_hat[cert.active], -lam * np.sign(theta[cert.active]), atol=1e-12)


def test_penalized_zero_solution():
    model = GaussianLinear(np.eye(3))
    cert = check_ssosp_penalized(model, 1.0, np.zeros(3), np.array([0.5, -0.9, 0.1]), None)
    assert cert.ssosp and cert.active.size == 0


def test_penalized_sign_violation():
    model = GaussianLinear(np.eye(2))
    x = np.array([2.0, 0.0])
    cert = check_ssosp_penalized(model, 1.0, np.array([-1.0, 0.0]), x, None)
    assert not cert.kkt_ok


def test_penalized_requires_positive_lambda():
    with pytest.raises(InvalidArgument):
        check_ssosp_penalized(GaussianLinear(np.eye(2)), 0.0, np.zeros(2), np.zeros(2), None)


def test_tolerance_scaling():
    tol = Tolerances()
    assert tol.kkt_bound(np.array([3.0, 4.0])) == pytest.approx(6e-6)


def test_perturbation_enters_certificate():
    model = GaussianLinear(np.eye(2))
    w = Perturbation(np.array([1.0, -1.0]), 2.0)
    x = np.array([1.0, 1.0])
    theta = x - w.term
    cert = check_ssosp_constrained(model, ConstraintSet.unconstrained(2), theta, x, w)
    assert cert.ssosp
