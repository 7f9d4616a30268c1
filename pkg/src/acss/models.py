"""Parametric null families and the perturbed loss.

Two families are supported:

* :class:`GaussianLinear` -- ``X ~ N(Z theta, nu2 I_n)`` with an optional
  ridge regularizer ``R(theta) = ridge/2 * ||theta||^2``.
* :class:`GaussianMixture2` -- ``X_i`` i.i.d. from a two-component normal
  mixture, parameterized as ``(pi1, mu1, sd1, mu2, sd2)``.

The perturbed loss is ``L(theta; x, w) = -log f(x; theta) + R(theta) + sigma * w @ theta``.
Densities are taken with respect to Lebesgue measure.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DomainError, InvalidArgument, ParseError

_LOG_2PI = float(np.log(2.0 * np.pi))
_BOUNDARY_EPS = 1e-12


@dataclass(frozen=True)
class Perturbation:
    """Noise vector ``w`` together with its scale ``sigma``."""

    w: np.ndarray
    sigma: float

    @property
    def term(self) -> np.ndarray:
        """The linear term ``sigma * w`` added to the gradient."""
        return self.sigma * self.w


@dataclass(frozen=True)
class LossEvaluation:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray


def draw_perturbation(d: int, sigma: float, rng: np.random.Generator) -> Perturbation:
    """Draw ``W ~ N(0, I_d / d)``."""
    if int(d) != d or d < 1:
        raise InvalidArgument(f"dimension must be a positive integer, got {d!r}")
    if not sigma > 0:
        raise InvalidArgument(f"sigma must be positive, got {sigma!r}")
    w = rng.standard_normal(int(d)) / np.sqrt(d)
    return Perturbation(w=w, sigma=float(sigma))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianLinear:
    """``X ~ N(Z theta, nu2 I)`` with ridge regularizer ``ridge/2 ||theta||^2``."""

    z: np.ndarray
    nu2: float = 1.0
    ridge: float = 0.0
    family: str = field(default="gaussian_linear", init=False)

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        if not np.all(np.isfinite(z)):
            raise InvalidArgument("design matrix must be finite")
        if not self.nu2 > 0:
            raise InvalidArgument(f"nu2 must be positive, got {self.nu2}")
        if self.ridge < 0:
            raise InvalidArgument(f"ridge must be nonnegative, got {self.ridge}")
        object.__setattr__(self, "z", _frozen(z))
        if self.ridge > 0:
            # strong convexity is part of the model contract
            np.linalg.cholesky(self.hessian_constant())

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def check_theta(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise InvalidArgument(f"theta must have shape ({self.dim},), got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise DomainError("theta must be finite")
        return theta

    def hessian_constant(self) -> np.ndarray:
        return self.z.T @ self.z / self.nu2 + self.ridge * np.eye(self.dim)

    def mean(self, theta: np.ndarray) -> np.ndarray:
        return self.z @ theta

    def log_density(self, theta: np.ndarray, x: np.ndarray) -> float:
        theta = self.check_theta(theta)
        r = np.asarray(x, dtype=float) - self.z @ theta
        return float(-0.5 * r @ r / self.nu2 - 0.5 * self.n * (_LOG_2PI + np.log(self.nu2)))

    def regularizer_grad(self, theta: np.ndarray) -> np.ndarray:
        return self.ridge * np.asarray(theta, dtype=float)

    def nll_terms(self, theta: np.ndarray, x: np.ndarray) -> LossEvaluation:
        """Value, gradient and Hessian of ``-log f(x; theta) + R(theta)``."""
        theta = self.check_theta(theta)
        x = np.asarray(x, dtype=float)
        r = x - self.z @ theta
        value = 0.5 * r @ r / self.nu2 + 0.5 * self.n * (_LOG_2PI + np.log(self.nu2))
        value += 0.5 * self.ridge * theta @ theta
        grad = -self.z.T @ r / self.nu2 + self.ridge * theta
        return LossEvaluation(float(value), grad, self.hessian_constant())

    def simulate(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        theta = self.check_theta(theta)
        return self.z @ theta + np.sqrt(self.nu2) * rng.standard_normal(self.n)

    # per-coordinate pieces used by the MH proposal
    def coordinate_log_density(self, theta, values, idx) -> np.ndarray:
        mu = self.z[idx] @ theta
        return -0.5 * (values - mu) ** 2 / self.nu2 - 0.5 * (_LOG_2PI + np.log(self.nu2))

    def coordinate_draws(self, theta, idx, u_comp, z) -> np.ndarray:
        return self.z[idx] @ theta + np.sqrt(self.nu2) * z


@dataclass(frozen=True)
class GaussianMixture2:
    """Two-component univariate normal mixture, ``theta = (pi1, mu1, sd1, mu2, sd2)``."""

    family: str = field(default="gaussian_mixture2", init=False)

    @property
    def dim(self) -> int:
        return 5

    def check_theta(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (5,):
            raise InvalidArgument(f"theta must have shape (5,), got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise DomainError("theta must be finite")
        p, _, s1, _, s2 = theta
        if not (_BOUNDARY_EPS < p < 1.0 - _BOUNDARY_EPS):
            raise DomainError(f"mixing weight {p} outside (0, 1)")
        if not (s1 > _BOUNDARY_EPS and s2 > _BOUNDARY_EPS):
            raise DomainError(f"component scales ({s1}, {s2}) must be positive")
        return theta

    def point_terms(self, theta: np.ndarray, x: np.ndarray):
        """Per-point ``log f_i``, its gradient ``(n, 5)`` and Hessian ``(n, 5, 5)``."""
        theta = self.check_theta(theta)
        x = np.asarray(x, dtype=float)
        p, m1, s1, m2, s2 = theta
        z1 = (x - m1) / s1
        z2 = (x - m2) / s2
        a1 = np.log(p) - 0.5 * z1**2 - np.log(s1) - 0.5 * _LOG_2PI
        a2 = np.log1p(-p) - 0.5 * z2**2 - np.log(s2) - 0.5 * _LOG_2PI
        lse = np.logaddexp(a1, a2)
        r1 = np.exp(a1 - lse)
        r2 = np.exp(a2 - lse)

        n = x.shape[0]
        da1 = np.zeros((n, 5))
        da1[:, 0] = 1.0 / p
        da1[:, 1] = z1 / s1
        da1[:, 2] = (z1**2 - 1.0) / s1
        da2 = np.zeros((n, 5))
        da2[:, 0] = -1.0 / (1.0 - p)
        da2[:, 3] = z2 / s2
        da2[:, 4] = (z2**2 - 1.0) / s2

        d2a1 = np.zeros((n, 5, 5))
        d2a1[:, 0, 0] = -1.0 / p**2
        d2a1[:, 1, 1] = -1.0 / s1**2
        d2a1[:, 1, 2] = d2a1[:, 2, 1] = -2.0 * z1 / s1**2
        d2a1[:, 2, 2] = (1.0 - 3.0 * z1**2) / s1**2
        d2a2 = np.zeros((n, 5, 5))
        d2a2[:, 0, 0] = -1.0 / (1.0 - p) ** 2
        d2a2[:, 3, 3] = -1.0 / s2**2
        d2a2[:, 3, 4] = d2a2[:, 4, 3] = -2.0 * z2 / s2**2
        d2a2[:, 4, 4] = (1.0 - 3.0 * z2**2) / s2**2

        grad = r1[:, None] * da1 + r2[:, None] * da2
        hess = (
            r1[:, None, None] * (d2a1 + da1[:, :, None] * da1[:, None, :])
            + r2[:, None, None] * (d2a2 + da2[:, :, None] * da2[:, None, :])
            - grad[:, :, None] * grad[:, None, :]
        )
        return lse, grad, hess

    def log_density(self, theta: np.ndarray, x: np.ndarray) -> float:
        theta = self.check_theta(theta)
        x = np.asarray(x, dtype=float)
        return float(np.sum(self.coordinate_log_density(theta, x, None)))

    def regularizer_grad(self, theta: np.ndarray) -> np.ndarray:
        return np.zeros(5)

    def nll_terms(self, theta: np.ndarray, x: np.ndarray) -> LossEvaluation:
        logf, grad, hess = self.point_terms(theta, x)
        return LossEvaluation(float(-logf.sum()), -grad.sum(axis=0), -hess.sum(axis=0))

    def simulate(self, theta: np.ndarray, rng: np.random.Generator, n: int = 200) -> np.ndarray:
        p, m1, s1, m2, s2 = self.check_theta(theta)
        first = rng.random(n) < p
        z = rng.standard_normal(n)
        return np.where(first, m1 + s1 * z, m2 + s2 * z)

    def coordinate_log_density(self, theta, values, idx) -> np.ndarray:
        p, m1, s1, m2, s2 = theta
        values = np.asarray(values, dtype=float)
        a1 = np.log(p) - 0.5 * ((values - m1) / s1) ** 2 - np.log(s1)
        a2 = np.log1p(-p) - 0.5 * ((values - m2) / s2) ** 2 - np.log(s2)
        return np.logaddexp(a1, a2) - 0.5 * _LOG_2PI

    def coordinate_draws(self, theta, idx, u_comp, z) -> np.ndarray:
        p, m1, s1, m2, s2 = theta
        return np.where(u_comp < p, m1 + s1 * z, m2 + s2 * z)


Model = GaussianLinear | GaussianMixture2


def loss(model: Model, theta: np.ndarray, x: np.ndarray, w: Perturbation | None = None) -> LossEvaluation:
    """Evaluate ``L(theta; x, w)`` with gradient and Hessian.

    ``w=None`` evaluates the unperturbed loss ``-log f + R``.
    """
    ev = model.nll_terms(theta, x)
    if w is None:
        return ev
    if np.shape(w.w) != (model.dim,):
        raise InvalidArgument("perturbation dimension does not match the model")
    t = w.term
    theta = np.asarray(theta, dtype=float)
    return LossEvaluation(ev.value + float(t @ theta), ev.gradient + t, ev.hessian)


def simulate(model: Model, theta: np.ndarray, rng: np.random.Generator, **kwargs) -> np.ndarray:
    """One draw ``X ~ P_theta``."""
    return model.simulate(theta, rng, **kwargs)


def load_matrix_csv(path: str | Path) -> np.ndarray:
    """Read a dense, row-major numeric CSV (no header)."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise ParseError("matrix rows are empty or ragged")
    return np.array(rows)


def model_from_dict(doc: dict[str, Any], base_dir: str | Path = ".") -> Model:
    """Build a model from a config mapping.

    ``{"family": "gaussian_linear", "z": <nested list or CSV path>, "nu2": 1.0, "ridge": 0.0}``
    or ``{"family": "gaussian_mixture2"}``.
    """
    family = doc.get("family")
    if family == "gaussian_mixture2":
        return GaussianMixture2()
    if family == "gaussian_linear":
        z = doc["z"]
        if isinstance(z, str):
            z = load_matrix_csv(Path(base_dir) / z)
        elif isinstance(z, dict) and z.get("identity"):
            z = np.eye(int(z["identity"]))
        return GaussianLinear(z=np.asarray(z, dtype=float), nu2=float(doc.get("nu2", 1.0)),
                              ridge=float(doc.get("ridge", 0.0)))
    raise InvalidArgument(f"unknown model family {family!r}")
