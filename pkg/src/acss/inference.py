"""Resampling p-values, sparsity measures, effective dimension and test statistics."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import InvalidArgument, Unsupported
from .estimation import SolverOptions, solve_quadratic_l1

MAX_SUBSETS = 10**6
MAX_CHANGEPOINT_ENUM_DIM = 20


def compute_pvalue(t_obs: float, t_copies) -> float:
    """``(1 + #{m : T(copy_m) >= T(x)}) / (M + 1)``, ties counted as exceedances."""
    t = np.asarray(t_copies, dtype=float).reshape(-1)
    if t.size == 0:
        raise InvalidArgument("need at least one copy")
    return float((1 + np.count_nonzero(t >= t_obs)) / (t.size + 1))


# ---------------------------------------------------------------- sparsity and effective dimension


@dataclass(frozen=True)
class SparsityBasis:
    """A list of nonzero vectors ``v_1..v_p`` in ``R^d`` (stored as rows)."""

    vectors: np.ndarray
    kind: str = "general"

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        if np.any(np.all(v == 0, axis=1)):
            raise InvalidArgument("basis vectors must be nonzero")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def p(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def canonical(cls, d: int) -> "SparsityBasis":
        return cls(np.eye(d), "canonical")

    @classmethod
    def changepoint(cls, d: int) -> "SparsityBasis":
        """``v_i = e_1 + ... + e_i``."""
        return cls(np.tril(np.ones((d, d))), "changepoint")


def _in_span(vs: np.ndarray, w: np.ndarray, tol: float) -> bool:
    if vs.shape[0] == 0:
        return bool(np.linalg.norm(w) <= tol)
    coef, *_ = np.linalg.lstsq(vs.T, w, rcond=None)
    return bool(np.linalg.norm(vs.T @ coef - w) <= tol)


def v_sparsity(w, basis: SparsityBasis) -> float:
    """Fewest basis vectors whose span contains ``w`` (``inf`` if none)."""
    w = np.asarray(w, dtype=float)
    if w.shape != (basis.d,):
        raise InvalidArgument("w has the wrong dimension")
    if basis.kind == "canonical":
        return int(np.count_nonzero(w))
    if basis.kind == "changepoint":
        return int(np.count_nonzero(w[:-1] != w[1:]) + (w[-1] != 0))
    if basis.p > basis.d and basis.d > MAX_CHANGEPOINT_ENUM_DIM:
        raise Unsupported("exhaustive span search needs d <= 20 when p > d")
    tol = 1e-10 * (1.0 + np.linalg.norm(w))
    if not _in_span(basis.vectors, w, tol):
        return math.inf
    for k in range(basis.p + 1):
        for sub in itertools.combinations(range(basis.p), k):
            if _in_span(basis.vectors[list(sub)], w, tol):
                return k
    return math.inf


def h_v_bound(k: int, p: int, d: int) -> float:
    """``min(4k log(4p/k), d)``."""
    if not 1 <= k <= d:
        raise InvalidArgument(f"k must lie in [1, d={d}], got {k}")
    if p < 1:
        raise InvalidArgument("p must be positive")
    return float(min(4.0 * k * math.log(4.0 * p / k), d))


class HvEstimate(NamedTuple):
    mean: float
    stderr: float
    exact: bool


def h_v_mc(basis: SparsityBasis, k: int, n_samples: int, rng: np.random.Generator) -> HvEstimate:
    """Monte Carlo estimate of ``E max_{|S|<=k} ||P_S Z||^2`` for ``Z ~ N(0, I_d)``.

    ``exact=False`` flags a changepoint basis too large to enumerate, in
    which case the upper bound is returned with zero standard error.
    """
    d, p = basis.d, basis.p
    if not 1 <= k <= d:
        raise InvalidArgument(f"k must lie in [1, d={d}], got {k}")
    if n_samples < 2:
        raise InvalidArgument("need at least two samples")
    z = rng.standard_normal((n_samples, d))
    if basis.kind == "canonical":
        vals = np.sort(z**2, axis=1)[:, d - k:].sum(axis=1)
    else:
        kk = min(k, p)
        if basis.kind == "changepoint" and d > MAX_CHANGEPOINT_ENUM_DIM:
            return HvEstimate(h_v_bound(k, p, d), 0.0, False)
        if math.comb(p, kk) > MAX_SUBSETS:
            raise Unsupported(f"C({p}, {kk}) subsets exceed the enumeration limit")
        vals = np.zeros(n_samples)
        # larger subsets contain smaller ones, so size exactly kk suffices
        for sub in itertools.combinations(range(p), kk):
            q, _ = np.linalg.qr(basis.vectors[list(sub)].T)
            vals = np.maximum(vals, ((z @ q) ** 2).sum(axis=1))
    return HvEstimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples)), True)


# ---------------------------------------------------------------- k-means


@njit(cache=True)
def _lloyd_1d(x, centers, max_iter):
    n = x.shape[0]
    k = centers.shape[0]
    labels = np.full(n, -1)
    c = centers.copy()
    for _ in range(max_iter):
        changed = False
        for i in range(n):
            best = 0
            bd = (x[i] - c[0]) ** 2
            for j in range(1, k):
                dj = (x[i] - c[j]) ** 2
                if dj < bd:
                    bd = dj
                    best = j
            if labels[i] != best:
                labels[i] = best
                changed = True
        if not changed:
            break
        sums = np.zeros(k)
        counts = np.zeros(k)
        for i in range(n):
            sums[labels[i]] += x[i]
            counts[labels[i]] += 1.0
        for j in range(k):
            if counts[j] > 0:
                c[j] = sums[j] / counts[j]
    wcss = 0.0
    for i in range(n):
        wcss += (x[i] - c[labels[i]]) ** 2
    return wcss


@njit(cache=True)
def _kmeans_pp_1d(x, k, tape, max_iter):
    """Best WCSS over restarts; ``tape[r, j]`` drives the j-th seeding draw of restart r."""
    n = x.shape[0]
    best = np.inf
    dist = np.empty(n)
    for r in range(tape.shape[0]):
        centers = np.empty(k)
        centers[0] = x[min(int(tape[r, 0] * n), n - 1)]
        for i in range(n):
            dist[i] = (x[i] - centers[0]) ** 2
        for j in range(1, k):
            total = dist.sum()
            if total <= 0.0:
                centers[j] = centers[0]
            else:
                target = tape[r, j] * total
                acc = 0.0
                pick = n - 1
                for i in range(n):
                    acc += dist[i]
                    if acc > target:
                        pick = i
                        break
                centers[j] = x[pick]
            for i in range(n):
                dist[i] = min(dist[i], (x[i] - centers[j]) ** 2)
        best = min(best, _lloyd_1d(x, centers, max_iter))
    return best


def kmeans_wcss(x, k: int, restarts: int = 10, seed: int = 0) -> float:
    """Best total within-cluster sum of squares of 1-d k-means (k-means++ seeding)."""
    tape = np.random.default_rng([seed, k]).random((restarts, k))
    return float(_kmeans_pp_1d(np.ascontiguousarray(x, dtype=float), k, tape, 300))


# ---------------------------------------------------------------- test statistics

STATISTICS = ("kmeans_wcss_decrease", "abs_correlation", "elastic_net_coef")


@dataclass(frozen=True)
class TestStatistic:
    """A fixed statistic ``T(x)``.

    * ``kmeans_wcss_decrease``: ``WCSS(k_from) - WCSS(k_to)``.
    * ``abs_correlation``: ``|corr(x, y)|``.
    * ``elastic_net_coef``: ``|b_x|`` from regressing ``y`` on ``(x, Z)`` with
      ``lambda_ridge/2 ||b||^2 + lambda_l1 ||b||_1`` on the ``Z`` coefficients only.
    """

    __test__ = False

    kind: str
    y: np.ndarray | None = None
    z: np.ndarray | None = None
    k_from: int = 2
    k_to: int = 3
    restarts: int = 10
    seed: int = 0
    lambda_ridge: float = 3.0
    lambda_l1: float = 7.0
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in STATISTICS:
            raise InvalidArgument(f"unknown statistic {self.kind!r}")
        if self.kind in ("abs_correlation", "elastic_net_coef") and self.y is None:
            raise InvalidArgument(f"{self.kind} needs the response y")
        if self.kind == "elastic_net_coef":
            if self.z is None:
                raise InvalidArgument("elastic_net_coef needs the covariate matrix z")
            z = np.asarray(self.z, dtype=float)
            y = np.asarray(self.y, dtype=float)
            self._cache["ztz"] = z.T @ z
            self._cache["zty"] = z.T @ y


def _abs_corr(x, y) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    den = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if den == 0.0:
        warnings.warn("zero variance in correlation statistic; returning 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return abs(float(xc @ yc) / den)


def _enet_coef(ts: TestStatistic, x) -> float:
    z = np.asarray(ts.z, dtype=float)
    y = np.asarray(ts.y, dtype=float)
    p = z.shape[1]
    h = np.empty((p + 1, p + 1))
    h[1:, 1:] = ts._cache["ztz"] + ts.lambda_ridge * np.eye(p)
    zx = z.T @ x
    h[0, 0] = x @ x
    h[0, 1:] = zx
    h[1:, 0] = zx
    c = -np.concatenate([[x @ y], ts._cache["zty"]])
    l1 = np.full(p + 1, ts.lambda_l1)
    l1[0] = 0.0
    res = solve_quadratic_l1(h, c, l1, SolverOptions(max_iter=10000))
    return abs(float(res.theta[0]))


def evaluate_statistic(ts: TestStatistic, x, rng=None) -> float:
    """``T(x)``; deterministic in ``x`` (k-means seeding uses ``ts.seed``)."""
    x = np.asarray(x, dtype=float)
    if ts.kind == "kmeans_wcss_decrease":
        return kmeans_wcss(x, ts.k_from, ts.restarts, ts.seed) - kmeans_wcss(x, ts.k_to, ts.restarts, ts.seed)
    if x.shape != np.shape(ts.y):
        raise InvalidArgument("x and y must have the same length")
    if ts.kind == "abs_correlation":
        return _abs_corr(x, np.asarray(ts.y, dtype=float))
    return _enet_coef(ts, x)


def evaluate_many(ts: TestStatistic, xs) -> np.ndarray:
    return np.array([evaluate_statistic(ts, row) for row in np.atleast_2d(xs)])
