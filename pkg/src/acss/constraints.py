"""Linear constraint systems ``A theta <= b`` and stationarity certificates.

Indices are 0-based throughout.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.optimize import nnls

from .errors import InfeasiblePoint, InvalidArgument, Unsupported
from .models import Model, Perturbation, loss

MAX_L1_DIM = 20


@dataclass(frozen=True)
class Tolerances:
    """Numerical slack for the stationarity checks.

    ``tol_kkt`` is relative: the KKT residual must be at most
    ``tol_kkt * (1 + ||grad L||)``.
    """

    tol_act: float = 1e-8
    tol_kkt: float = 1e-6
    tol_pd: float = 1e-8
    tol_supp: float = 1e-10
    tol_member: float = 1e-6

    def kkt_bound(self, grad: np.ndarray) -> float:
        return self.tol_kkt * (1.0 + float(np.linalg.norm(grad)))


DEFAULT_TOLERANCES = Tolerances()


@dataclass(frozen=True)
class ConstraintSet:
    a: np.ndarray
    b: np.ndarray
    kind: str | None = None

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if a.ndim != 2:
            raise InvalidArgument("constraint matrix must be 2-d (use shape (0, d) for none)")
        if a.shape[0] != b.shape[0]:
            raise InvalidArgument(f"A has {a.shape[0]} rows but b has {b.shape[0]} entries")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise InvalidArgument("constraints must be finite")
        if a.shape[0] and np.any(np.all(a == 0, axis=1)):
            raise InvalidArgument("constraint matrix has an all-zero row")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def r(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return self.a.shape[1]

    @classmethod
    def unconstrained(cls, d: int) -> "ConstraintSet":
        return cls(np.zeros((0, d)), np.zeros(0), kind="none")

    def slack(self, theta: np.ndarray) -> np.ndarray:
        return self.b - self.a @ np.asarray(theta, dtype=float)

    def is_feasible(self, theta: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(self.slack(theta) >= -tol))

    def to_json(self) -> str:
        doc: dict[str, Any] = {"A": self.a.tolist(), "b": self.b.tolist()}
        if self.kind is not None:
            doc["kind"] = self.kind
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "ConstraintSet":
        doc = json.loads(text)
        a = np.asarray(doc["A"], dtype=float)
        b = np.asarray(doc["b"], dtype=float)
        if a.size == 0:
            d = int(doc.get("d", 0))
            a = np.zeros((0, d))
        return cls(a, b, kind=doc.get("kind"))


def _sign_rows(k: int) -> np.ndarray:
    return np.array(list(itertools.product((1.0, -1.0), repeat=k)))


def builtin_constraints(kind: str, d: int, **params) -> ConstraintSet:
    """Catalog of standard constraint systems.

    kinds: ``nonnegative``, ``lower_bound`` (``c``, optional ``indices``),
    ``monotone``, ``linf`` (``C``), ``l1`` (``C``), ``fused_l1`` (``C``), ``none``.
    """
    if d < 1:
        raise InvalidArgument("d must be >= 1")
    eye = np.eye(d)
    if kind == "none":
        return ConstraintSet.unconstrained(d)
    if kind == "nonnegative":
        return ConstraintSet(-eye, np.zeros(d), kind)
    if kind == "lower_bound":
        c = float(params["c"])
        idx = list(params.get("indices", range(d)))
        return ConstraintSet(-eye[idx], -c * np.ones(len(idx)), kind)
    if kind == "monotone":
        a = np.zeros((d - 1, d))
        a[np.arange(d - 1), np.arange(d - 1)] = 1.0
        a[np.arange(d - 1), np.arange(1, d)] = -1.0
        return ConstraintSet(a, np.zeros(d - 1), kind)
    c = params.get("C")
    if c is None or not c > 0:
        raise InvalidArgument(f"{kind} constraint needs a positive bound C")
    if kind == "linf":
        return ConstraintSet(np.vstack([eye, -eye]), c * np.ones(2 * d), kind)
    if kind == "l1":
        if d > MAX_L1_DIM:
            raise Unsupported(f"l1 constraint needs 2^{d} rows; use the penalized path")
        return ConstraintSet(_sign_rows(d), c * np.ones(2**d), kind)
    if kind == "fused_l1":
        if d - 1 > MAX_L1_DIM:
            raise Unsupported(f"fused l1 constraint needs 2^{d - 1} rows")
        diff = builtin_constraints("monotone", d).a
        a = _sign_rows(d - 1) @ diff
        return ConstraintSet(a, c * np.ones(a.shape[0]), kind)
    raise InvalidArgument(f"unknown constraint kind {kind!r}")


def active_set(cs: ConstraintSet, theta: np.ndarray, tol_act: float = DEFAULT_TOLERANCES.tol_act) -> np.ndarray:
    """Indices ``i`` with ``b_i - A_i theta <= tol_act``."""
    if not tol_act > 0:
        raise InvalidArgument("tol_act must be positive")
    slack = cs.slack(theta)
    if np.any(slack < -tol_act):
        worst = int(np.argmin(slack))
        raise InfeasiblePoint(f"constraint {worst} violated by {-slack[worst]:.3g}")
    return np.flatnonzero(slack <= tol_act)


def borderline_set(cs: ConstraintSet, theta: np.ndarray, tol_act: float) -> np.ndarray:
    slack = cs.slack(theta)
    return np.flatnonzero((slack > tol_act) & (slack <= 10 * tol_act))


def ortho_complement_basis(cs: ConstraintSet, aset: np.ndarray) -> np.ndarray:
    """Orthonormal basis ``U`` of the orthogonal complement of the active rows."""
    d = cs.d
    aset = np.asarray(aset, dtype=int)
    if aset.size == 0:
        return np.eye(d)
    rows = cs.a[aset]
    _, sv, vt = np.linalg.svd(rows, full_matrices=True)
    rank = int(np.sum(sv > 1e-10 * sv[0])) if sv.size else 0
    return vt[rank:].T.copy()


@dataclass
class SsospCertificate:
    """Outcome of a stationarity check at ``theta_hat``.

    ``mode`` is ``"constrained"`` (``active`` holds constraint indices and
    ``multipliers`` the KKT lambdas, one per row) or ``"penalized"``
    (``active`` holds the support and ``multipliers`` the subgradient signs).
    """

    theta_hat: np.ndarray
    g_hat: np.ndarray
    mode: str
    active: np.ndarray
    multipliers: np.ndarray
    feasible: bool
    kkt_ok: bool
    second_order_ok: bool
    min_proj_hess_eig: float
    kkt_residual: float
    borderline: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def ssosp(self) -> bool:
        return self.feasible and self.kkt_ok and self.second_order_ok


def _min_eig(m: np.ndarray) -> float:
    if m.size == 0:
        return float("inf")
    return float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])


def check_ssosp_constrained(
    model: Model,
    cs: ConstraintSet,
    theta: np.ndarray,
    x: np.ndarray,
    w: Perturbation | None,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> SsospCertificate:
    theta = model.check_theta(theta)
    ev = loss(model, theta, x, w)
    slack = cs.slack(theta)
    feasible = bool(np.all(slack >= -tolerances.tol_act))
    aset = np.flatnonzero(np.abs(slack) <= tolerances.tol_act)

    lam = np.zeros(cs.r)
    if aset.size:
        coef, resid = nnls(cs.a[aset].T, -ev.gradient)
        lam[aset] = coef
    else:
        resid = float(np.linalg.norm(ev.gradient))
    kkt_ok = bool(resid <= tolerances.kkt_bound(ev.gradient))

    u = ortho_complement_basis(cs, aset)
    min_eig = _min_eig(u.T @ ev.hessian @ u)
    second_ok = bool(min_eig >= tolerances.tol_pd)
    return SsospCertificate(
        theta_hat=theta.copy(),
        g_hat=ev.gradient,
        mode="constrained",
        active=aset,
        multipliers=lam,
        feasible=feasible,
        kkt_ok=kkt_ok,
        second_order_ok=second_ok,
        min_proj_hess_eig=min_eig,
        kkt_residual=float(resid),
        borderline=borderline_set(cs, theta, tolerances.tol_act),
    )


def check_ssosp_penalized(
    model: Model,
    lambda_l1: float,
    theta: np.ndarray,
    x: np.ndarray,
    w: Perturbation | None,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> SsospCertificate:
    if not lambda_l1 > 0:
        raise InvalidArgument("lambda_l1 must be positive")
    theta = model.check_theta(theta)
    ev = loss(model, theta, x, w)
    g = ev.gradient
    support = np.flatnonzero(np.abs(theta) > tolerances.tol_supp)
    off = np.setdiff1d(np.arange(theta.size), support)

    s = np.clip(-g / lambda_l1, -1.0, 1.0)
    s[support] = np.sign(theta[support])
    on_viol = np.abs(g[support] + lambda_l1 * s[support])
    off_viol = np.maximum(np.abs(g[off]) - lambda_l1, 0.0)
    resid = float(np.sqrt(np.sum(on_viol**2) + np.sum(off_viol**2)))
    bound = tolerances.kkt_bound(g)
    kkt_ok = bool(np.all(on_viol <= bound) and np.all(off_viol <= bound))

    min_eig = _min_eig(ev.hessian[np.ix_(support, support)])
    return SsospCertificate(
        theta_hat=theta.copy(),
        g_hat=g,
        mode="penalized",
        active=support,
        multipliers=s,
        feasible=True,
        kkt_ok=kkt_ok,
        second_order_ok=bool(min_eig >= tolerances.tol_pd),
        min_proj_hess_eig=min_eig,
        kkt_residual=resid,
    )
