"""Plug-in conditional density of the data given ``(theta_hat, g_hat)``.

Up to a constant that does not depend on ``x``::

    log p(x) = log f(x; theta_hat)
               - d / (2 sigma^2) * ||g_hat - grad L(theta_hat; x)||^2
               + log det(projected Hessian at (theta_hat; x))
               + log 1{x in the membership set}

Here ``grad L`` and the Hessian exclude the noise term.  The projected
Hessian is ``Uᵀ ∇²L U`` in constrained mode and ``∇²L`` restricted to the
support in penalized mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import ortho_complement_basis
from .errors import InvalidArgument
from .estimation import EstimationProblem, FitResult, fit
from .models import GaussianLinear, Perturbation


@dataclass(frozen=True)
class ConditioningState:
    """Everything the copies are conditioned on, plus the solver that produced it."""

    theta_hat: np.ndarray
    g_hat: np.ndarray
    mode: str
    active: np.ndarray
    u: np.ndarray | None
    problem: EstimationProblem
    n_obs: int

    @property
    def model(self):
        return self.problem.model

    @property
    def sigma(self) -> float:
        return self.problem.sigma

    @property
    def d(self) -> int:
        return self.theta_hat.shape[0]

    @property
    def lambda_l1(self) -> float | None:
        return self.problem.lambda_l1

    @classmethod
    def from_fit(cls, problem: EstimationProblem, result: FitResult, x) -> "ConditioningState":
        cert = result.certificate
        if not cert.ssosp:
            raise InvalidArgument("conditioning requires an SSOSP fit")
        u = ortho_complement_basis(problem.constraints, cert.active) if cert.mode == "constrained" else None
        return cls(cert.theta_hat.copy(), cert.g_hat.copy(), cert.mode, cert.active.copy(), u, problem,
                   int(np.shape(x)[0]))

    def project_hessian(self, hess: np.ndarray) -> np.ndarray:
        if self.mode == "constrained":
            return self.u.T @ hess @ self.u
        return hess[np.ix_(self.active, self.active)]


@dataclass(frozen=True)
class LogDensityValue:
    log_value: float
    log_f: float
    gauss_exponent: float
    log_det: float
    indicator: bool


def _logdet_cholesky(m: np.ndarray) -> float | None:
    if m.size == 0:
        return 0.0
    try:
        chol = np.linalg.cholesky(0.5 * (m + m.T))
    except np.linalg.LinAlgError:
        return None
    return float(2.0 * np.log(np.diag(chol)).sum())


def _unperturbed_terms(state: ConditioningState, x):
    """``log f(x; θ̂)``, ``∇L(θ̂; x)`` and ``∇²L(θ̂; x)`` without the noise term."""
    model = state.model
    ev = model.nll_terms(state.theta_hat, x)
    return model.log_density(state.theta_hat, x), ev.gradient, ev.hessian


def gauss_exponent(state: ConditioningState, grad: np.ndarray) -> float:
    r = state.g_hat - grad
    return float(-state.d / (2.0 * state.sigma**2) * (r @ r))


def membership_check(state: ConditioningState, x, solver: EstimationProblem | None = None) -> bool:
    """Refit at the noise implied by ``(θ̂, ĝ)`` and check it returns ``θ̂``."""
    problem = solver or state.problem
    _, grad, _ = _unperturbed_terms(state, x)
    w_star = (state.g_hat - grad) / state.sigma
    res = fit(problem, x, Perturbation(w_star, state.sigma))
    if not (res.converged and res.ssosp):
        return False
    tol = problem.options.tolerances.tol_member * (1.0 + np.linalg.norm(state.theta_hat))
    if np.linalg.norm(res.theta_hat - state.theta_hat) > tol:
        return False
    return np.array_equal(res.certificate.active, state.active)


def log_unnorm_density(state: ConditioningState, x, check_membership: bool = True,
                       solver: EstimationProblem | None = None, fast: bool = False) -> LogDensityValue:
    """Unnormalized log density of the plug-in conditional law at ``x``.

    ``fast`` applies to Gaussian linear models only: the determinant is
    constant in ``x`` and membership holds almost surely, so both are
    evaluated once at ``θ̂`` and the refit is skipped.
    """
    x = np.asarray(x, dtype=float)
    log_f, grad, hess = _unperturbed_terms(state, x)
    expo = gauss_exponent(state, grad)
    if fast:
        if not isinstance(state.model, GaussianLinear):
            raise InvalidArgument("the fast path is only valid for gaussian_linear models")
        ld = _logdet_cholesky(state.project_hessian(state.model.hessian_constant()))
        if ld is None:
            return LogDensityValue(-np.inf, log_f, expo, -np.inf, False)
        return LogDensityValue(log_f + expo + ld, log_f, expo, ld, True)

    ld = _logdet_cholesky(state.project_hessian(hess))
    if ld is None:
        return LogDensityValue(-np.inf, log_f, expo, -np.inf, False)
    if check_membership:
        if not membership_check(state, x, solver):
            return LogDensityValue(-np.inf, log_f, expo, ld, False)
    return LogDensityValue(log_f + expo + ld, log_f, expo, ld, True)


def log_density_ratio(state: ConditioningState, x_new, x_old, check_membership: bool = True,
                      solver: EstimationProblem | None = None, fast: bool = False) -> float:
    """``log p(x_new) - log p(x_old)``; ``-inf`` when ``x_new`` fails its indicator."""
    new = log_unnorm_density(state, x_new, check_membership, solver, fast)
    if not new.indicator:
        return -np.inf
    old = log_unnorm_density(state, x_old, False, solver, fast)
    return float(new.log_value - old.log_value)
