"""Perturbed constrained and l1-penalized estimation.

``fit`` returns a :class:`FitResult` whose certificate records whether the
estimate is a strict second-order stationary point.  A failed certificate is
a value, not an exception: the sampling layer falls back to the degenerate
copies in that case.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit
from scipy.optimize import linprog

from . import _mixture_kernels as mk
from .constraints import (
    DEFAULT_TOLERANCES,
    ConstraintSet,
    SsospCertificate,
    Tolerances,
    builtin_constraints,
    check_ssosp_constrained,
    check_ssosp_penalized,
)
from .errors import InfeasibleProblem, InvalidArgument
from .models import GaussianLinear, GaussianMixture2, Model, Perturbation, loss

SOLVERS = ("activeset_qp", "pava", "coordinate_descent", "projected_gradient")
MODES = ("constrained", "l1_penalized")


@dataclass(frozen=True)
class SolverOptions:
    """Knobs shared by the solvers.

    ``step_rule`` applies to the mixture solver: ``"newton"`` (projected
    Newton with Armijo backtracking) or ``"gradient"`` (projected gradient
    with the same line search).
    """

    max_iter: int = 1000
    step_rule: str = "newton"
    em_iters: int = 20
    tol_stop: float = 1e-8
    tolerances: Tolerances = DEFAULT_TOLERANCES
    coordinate_order: tuple | None = None

    def __post_init__(self):
        if self.step_rule not in ("newton", "gradient"):
            raise InvalidArgument(f"unknown step rule {self.step_rule!r}")
        if self.max_iter < 1:
            raise InvalidArgument("max_iter must be >= 1")


class QPResult(NamedTuple):
    theta: np.ndarray
    multipliers: np.ndarray
    iterations: int
    converged: bool


class ElasticNetResult(NamedTuple):
    theta: np.ndarray
    sweeps: int
    converged: bool
    kkt_residual: float


@dataclass
class FitResult:
    certificate: SsospCertificate
    iterations: int
    converged: bool
    objective: float

    @property
    def theta_hat(self) -> np.ndarray:
        return self.certificate.theta_hat

    @property
    def g_hat(self) -> np.ndarray:
        return self.certificate.g_hat

    @property
    def ssosp(self) -> bool:
        return self.certificate.ssosp


# ---------------------------------------------------------------- active-set QP


def _independent_rows(rows: np.ndarray, candidates: list[int], tol: float = 1e-10) -> list[int]:
    chosen: list[int] = []
    for i in candidates:
        trial = rows[chosen + [i]]
        sv = np.linalg.svd(trial, compute_uv=False)
        if sv[-1] > tol * max(sv[0], 1.0):
            chosen.append(i)
    return chosen


def _phase_one(cs: ConstraintSet) -> np.ndarray:
    res = linprog(np.zeros(cs.d), A_ub=cs.a, b_ub=cs.b, bounds=[(None, None)] * cs.d, method="highs")
    if res.status == 2:
        raise InfeasibleProblem("constraint system Aθ <= b has no feasible point")
    if res.status != 0:
        raise InfeasibleProblem(f"phase-one LP failed: {res.message}")
    return np.asarray(res.x, dtype=float)


def solve_activeset_qp(h: np.ndarray, c: np.ndarray, cs: ConstraintSet, options: SolverOptions | None = None) -> QPResult:
    """Minimize ``0.5 θᵀHθ + cᵀθ`` subject to ``Aθ <= b`` by a primal active-set method."""
    options = options or SolverOptions()
    h = np.asarray(h, dtype=float)
    c = np.asarray(c, dtype=float)
    d = c.shape[0]
    if h.shape != (d, d) or cs.d != d:
        raise InvalidArgument("dimension mismatch between H, c and constraints")
    try:
        chol = np.linalg.cholesky(0.5 * (h + h.T))
    except np.linalg.LinAlgError:
        raise InvalidArgument("H must be positive definite") from None

    def solve_h(v):
        return np.linalg.solve(chol.T, np.linalg.solve(chol, v))

    theta_u = -solve_h(c)
    if cs.r == 0:
        return QPResult(theta_u, np.zeros(0), 0, True)
    tol = 1e-12 * (1.0 + np.abs(cs.b).max())
    if cs.is_feasible(theta_u, tol):
        return QPResult(theta_u, np.zeros(cs.r), 0, True)

    # warm start: ray from a feasible point toward the unconstrained minimizer
    start = _phase_one(cs)
    direction = theta_u - start
    ad = cs.a @ direction
    slack = np.maximum(cs.slack(start), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(ad > 0, slack / ad, np.inf)
    t = min(1.0, float(ratios.min()))
    theta = start + t * direction

    act_tol = 1e-10 * (1.0 + np.abs(cs.b).max())
    working = _independent_rows(cs.a, [int(i) for i in np.flatnonzero(cs.slack(theta) <= act_tol)])
    lam_full = np.zeros(cs.r)
    converged = False
    it = 0
    for it in range(1, options.max_iter + 1):
        g = h @ theta + c
        k = len(working)
        aw = cs.a[working] if k else np.zeros((0, d))
        kkt = np.block([[h, aw.T], [aw, np.zeros((k, k))]])
        sol = np.linalg.solve(kkt, np.concatenate([-g, np.zeros(k)]))
        p = sol[:d]
        lam = sol[d:]
        if np.linalg.norm(p) <= 1e-12 * (1.0 + np.linalg.norm(theta)):
            if k == 0 or lam.min() >= -1e-12:
                lam_full[:] = 0.0
                if k:
                    lam_full[working] = np.maximum(lam, 0.0)
                converged = True
                break
            working.pop(int(np.argmin(lam)))
            continue
        ap = cs.a @ p
        slack = cs.slack(theta)
        alpha = 1.0
        blocking = -1
        for i in range(cs.r):
            if i in working or ap[i] <= 1e-14:
                continue
            step = max(slack[i], 0.0) / ap[i]
            if step < alpha:
                alpha = step
                blocking = i
        theta = theta + alpha * p
        if blocking >= 0:
            working.append(blocking)
    return QPResult(theta, lam_full, it, converged)


# ---------------------------------------------------------------- PAVA


def solve_pava(y: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Least-squares projection onto nondecreasing sequences (pool adjacent violators)."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or not np.all(np.isfinite(y)):
        raise InvalidArgument("PAVA input must be a finite vector")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    means: list[float] = []
    wts: list[float] = []
    sizes: list[int] = []
    for yi, wi in zip(y, w):
        means.append(float(yi))
        wts.append(float(wi))
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, n2 = means.pop(), wts.pop(), sizes.pop()
            wt = wts[-1] + w2
            means[-1] = (means[-1] * wts[-1] + m2 * w2) / wt
            wts[-1] = wt
            sizes[-1] += n2
    return np.repeat(means, sizes)


# ---------------------------------------------------------------- coordinate descent


@njit(cache=True)
def _cd_quadratic(hmat, c, l1w, theta0, order, max_sweeps, tol_update, tol_kkt):
    d = c.shape[0]
    theta = theta0.copy()
    grad = hmat @ theta + c
    sweeps = 0
    converged = False
    for sweeps in range(1, max_sweeps + 1):
        max_delta = 0.0
        for jj in range(d):
            j = order[jj]
            hjj = hmat[j, j]
            rho = hjj * theta[j] - grad[j]
            if rho > l1w[j]:
                new = (rho - l1w[j]) / hjj
            elif rho < -l1w[j]:
                new = (rho + l1w[j]) / hjj
            else:
                new = 0.0
            delta = new - theta[j]
            if delta != 0.0:
                theta[j] = new
                for k in range(d):
                    grad[k] += hmat[k, j] * delta
                max_delta = max(max_delta, abs(delta))
        if max_delta <= tol_update:
            grad = hmat @ theta + c
            if _kkt_residual(theta, grad, l1w) <= tol_kkt:
                converged = True
                break
    return theta, sweeps, converged


@njit(cache=True)
def _kkt_residual(theta, grad, l1w):
    worst = 0.0
    for j in range(theta.shape[0]):
        if theta[j] > 0.0:
            r = abs(grad[j] + l1w[j])
        elif theta[j] < 0.0:
            r = abs(grad[j] - l1w[j])
        else:
            r = max(abs(grad[j]) - l1w[j], 0.0)
        worst = max(worst, r)
    return worst


def solve_quadratic_l1(h, c, l1_weights, options: SolverOptions | None = None, theta0=None) -> ElasticNetResult:
    """Minimize ``0.5 θᵀHθ + cᵀθ + Σ_j l1_j |θ_j|`` by cyclic coordinate descent."""
    options = options or SolverOptions()
    h = np.ascontiguousarray(h, dtype=float)
    c = np.asarray(c, dtype=float)
    d = c.shape[0]
    l1w = np.broadcast_to(np.asarray(l1_weights, dtype=float), (d,)).copy()
    if np.any(np.diag(h) <= 0):
        raise InvalidArgument("coordinate descent needs a positive diagonal")
    order = np.arange(d) if options.coordinate_order is None else np.asarray(options.coordinate_order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(d)):
        raise InvalidArgument("coordinate_order must be a permutation")
    start = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=float)
    theta, sweeps, conv = _cd_quadratic(h, c, l1w, start, order, options.max_iter, 1e-10,
                                        options.tolerances.tol_kkt)
    kkt = float(_kkt_residual(theta, h @ theta + c, l1w))
    return ElasticNetResult(theta, int(sweeps), bool(conv), kkt)


def solve_elastic_net_cd(z, x, lambda_ridge: float, lambda_l1: float, sigma_w_term,
                         options: SolverOptions | None = None, nu2: float = 1.0) -> ElasticNetResult:
    """Elastic net ``‖x − Zθ‖²/(2ν²) + ridge/2‖θ‖² + λ‖θ‖₁ + (σw)ᵀθ``."""
    if lambda_ridge < 0 or not lambda_l1 > 0:
        raise InvalidArgument("need lambda_ridge >= 0 and lambda_l1 > 0")
    z = np.asarray(z, dtype=float)
    h = z.T @ z / nu2 + lambda_ridge * np.eye(z.shape[1])
    c = -z.T @ np.asarray(x, dtype=float) / nu2 + np.asarray(sigma_w_term, dtype=float)
    return solve_quadratic_l1(h, c, lambda_l1, options)


# ---------------------------------------------------------------- mixture


def mixture_lower_sd(cs: ConstraintSet) -> float:
    """Recover ``c`` from the constraint system ``sd_j >= c`` on coordinates 2 and 4."""
    expected = builtin_constraints("lower_bound", 5, c=0.0, indices=[2, 4]).a
    if cs.a.shape != expected.shape or not np.array_equal(cs.a, expected):
        raise InvalidArgument("the mixture solver needs the constraints sd1 >= c, sd2 >= c")
    if cs.b[0] != cs.b[1] or not -cs.b[0] > 0:
        raise InvalidArgument("the mixture scale bound must be a common positive constant")
    return float(-cs.b[0])


def mixture_constraints(lower_sd: float) -> ConstraintSet:
    return builtin_constraints("lower_bound", 5, c=lower_sd, indices=[2, 4])


def _mixture_solve(x, wterm, lower_sd, init, options: SolverOptions):
    x = np.ascontiguousarray(x, dtype=float)
    wterm = np.asarray(wterm, dtype=float)
    newton = options.step_rule == "newton"
    tol = options.tolerances
    if init is None:
        return mk.fit(x, wterm, lower_sd, options.em_iters, options.max_iter, options.tol_stop,
                      tol.tol_kkt, newton)
    return mk.projected_newton(x, wterm, lower_sd, np.asarray(init, dtype=float), options.max_iter,
                               options.tol_stop, tol.tol_kkt, newton)


def fit_mixture_constrained(x, w, sigma: float, lower_sd: float, init=None,
                            options: SolverOptions | None = None) -> FitResult:
    """Perturbed mixture MLE under ``sd_j >= lower_sd``.

    With ``init=None`` the start is the deterministic quartile k-means
    followed by ``options.em_iters`` EM steps.
    """
    options = options or SolverOptions()
    if not lower_sd > 0:
        raise InvalidArgument("lower_sd must be positive")
    if init is not None:
        init = GaussianMixture2().check_theta(init)
        if init[2] < lower_sd or init[4] < lower_sd:
            raise InvalidArgument("initial point violates the scale bounds")
    pert = Perturbation(np.asarray(w, dtype=float), float(sigma))
    theta, iters, conv = _mixture_solve(x, pert.term, lower_sd, init, options)
    model = GaussianMixture2()
    cert = check_ssosp_constrained(model, mixture_constraints(lower_sd), theta, x, pert, options.tolerances)
    value = loss(model, theta, x, pert).value
    return FitResult(cert, int(iters), bool(conv) and cert.kkt_ok, float(value))


# ---------------------------------------------------------------- problems


@dataclass(frozen=True)
class EstimationProblem:
    model: Model
    mode: str
    sigma: float
    solver: str
    constraints: ConstraintSet | None = None
    lambda_l1: float | None = None
    options: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"unknown mode {self.mode!r}")
        if self.solver not in SOLVERS:
            raise InvalidArgument(f"unknown solver {self.solver!r}")
        if not self.sigma > 0:
            raise InvalidArgument("sigma must be positive")
        linear = isinstance(self.model, GaussianLinear)
        if self.mode == "constrained":
            if self.constraints is None:
                object.__setattr__(self, "constraints", ConstraintSet.unconstrained(self.model.dim))
            if self.constraints.d != self.model.dim:
                raise InvalidArgument("constraint dimension does not match the model")
        elif not (self.lambda_l1 is not None and self.lambda_l1 > 0):
            raise InvalidArgument("l1_penalized mode needs lambda_l1 > 0")
        if self.solver in ("activeset_qp", "pava") and not (linear and self.mode == "constrained"):
            raise InvalidArgument(f"{self.solver} needs a constrained gaussian_linear problem")
        if self.solver == "pava":
            if self.constraints.kind != "monotone" or self.model.z.shape[0] != self.model.z.shape[1] \
                    or not np.array_equal(self.model.z, np.eye(self.model.dim)):
                raise InvalidArgument("pava needs Z = I and the monotone constraint")
        if self.solver == "coordinate_descent" and not (linear and self.mode == "l1_penalized"):
            raise InvalidArgument("coordinate_descent needs an l1-penalized gaussian_linear problem")
        if self.solver == "projected_gradient":
            if not isinstance(self.model, GaussianMixture2) or self.mode != "constrained":
                raise InvalidArgument("projected_gradient is the constrained mixture solver")
            mixture_lower_sd(self.constraints)

    @property
    def d(self) -> int:
        return self.model.dim


def _as_perturbation(problem: EstimationProblem, w) -> Perturbation:
    if isinstance(w, Perturbation):
        if w.sigma != problem.sigma:
            raise InvalidArgument("perturbation sigma differs from the problem's sigma")
        return w
    return Perturbation(np.asarray(w, dtype=float), problem.sigma)


def certify(problem: EstimationProblem, theta, x, w: Perturbation) -> SsospCertificate:
    tol = problem.options.tolerances
    if problem.mode == "constrained":
        return check_ssosp_constrained(problem.model, problem.constraints, theta, x, w, tol)
    return check_ssosp_penalized(problem.model, problem.lambda_l1, theta, x, w, tol)


def fit(problem: EstimationProblem, x, w, rng=None) -> FitResult:
    """Compute the perturbed estimate for data ``x`` and noise ``w`` (``W``, not ``σW``).

    All solvers are deterministic; ``rng`` is accepted for interface symmetry.
    """
    pert = _as_perturbation(problem, w)
    if np.shape(pert.w) != (problem.d,):
        raise InvalidArgument("noise dimension does not match the model")
    x = np.asarray(x, dtype=float)
    model = problem.model
    opts = problem.options

    if problem.solver == "projected_gradient":
        return fit_mixture_constrained(x, pert.w, pert.sigma, mixture_lower_sd(problem.constraints),
                                       None, opts)

    h = model.hessian_constant()
    c = -model.z.T @ x / model.nu2 + pert.term
    if problem.solver == "activeset_qp":
        res = solve_activeset_qp(h, c, problem.constraints, opts)
        theta, iters, conv = res.theta, res.iterations, res.converged
    elif problem.solver == "pava":
        scale = 1.0 / model.nu2 + model.ridge
        theta = solve_pava((x / model.nu2 - pert.term) / scale)
        iters, conv = 1, True
    else:
        res = solve_quadratic_l1(h, c, problem.lambda_l1, opts)
        theta, iters, conv = res.theta, res.sweeps, res.converged

    cert = certify(problem, theta, x, pert)
    value = loss(model, theta, x, pert).value
    if problem.mode == "l1_penalized":
        value += problem.lambda_l1 * float(np.abs(theta).sum())
    return FitResult(cert, int(iters), bool(conv) and cert.kkt_ok, float(value))
