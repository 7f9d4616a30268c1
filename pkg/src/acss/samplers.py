"""Copy generation: exact Gaussian draws and hub-and-spoke Metropolis-Hastings.

Random numbers for a chain are drawn up front as a "tape" (subset uniforms,
component uniforms, normal innovations and acceptance uniforms).  The pure
Python chain and the compiled mixture chain consume the same tape, so they
produce the same copies.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from . import _mixture_kernels as mk
from .density import ConditioningState, log_density_ratio, membership_check
from .errors import InvalidArgument, TuningFailed
from .estimation import EstimationProblem, fit, mixture_lower_sd
from .models import GaussianLinear, draw_perturbation

MAX_CHAIN_LENGTH = 2000
MIN_ACCEPTANCE = 0.05


@dataclass
class CopySet:
    copies: np.ndarray
    method: str
    acceptance_rate: float | None = None
    details: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.copies.shape[0]


@dataclass(frozen=True)
class ProposalSpec:
    """Number ``s`` of coordinates resampled per proposal."""

    s: int
    abar: float | None = None
    table: dict | None = None
    warning: bool = False


class Tape(NamedTuple):
    u_subset: np.ndarray
    u_component: np.ndarray
    z: np.ndarray
    u_accept: np.ndarray


def draw_tape(rng: np.random.Generator, length: int, s: int) -> Tape:
    return Tape(rng.random((length, s)), rng.random((length, s)),
                rng.standard_normal((length, s)), rng.random(length))


def chain_rng(entropy: int, key: int) -> np.random.Generator:
    """Independent sub-stream ``key`` of a chain family (0 = hub, m + 1 = spoke m)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy, spawn_key=(key,))))


def degenerate_copies(x, m_copies: int) -> CopySet:
    x = np.asarray(x, dtype=float)
    return CopySet(np.tile(x, (m_copies, 1)), "degenerate")


# ---------------------------------------------------------------- exact Gaussian sampler


def exact_gaussian_moments(state: ConditioningState):
    """Mean and covariance of the plug-in conditional law for a Gaussian linear model."""
    model = state.model
    if not isinstance(model, GaussianLinear):
        raise InvalidArgument("exact sampling needs a gaussian_linear model")
    chol, mean = _exact_factor(state)
    inv_chol = solve_triangular(chol, np.eye(chol.shape[0]), lower=True)
    cov = model.nu2 * inv_chol.T @ inv_chol
    return mean, cov


def _exact_factor(state: ConditioningState):
    model = state.model
    z = model.z
    d, sigma, nu2 = state.d, state.sigma, model.nu2
    b = np.eye(model.n) + (d / (sigma**2 * nu2)) * (z @ z.T)
    try:
        chol = np.linalg.cholesky(b)
    except np.linalg.LinAlgError:
        raise RuntimeError("Cholesky of I + (d/(σ²ν²))ZZᵀ failed") from None
    rhs = z @ (model.regularizer_grad(state.theta_hat) - state.g_hat)
    shift = solve_triangular(chol.T, solve_triangular(chol, rhs, lower=True), lower=False)
    mean = z @ state.theta_hat + (d / sigma**2) * shift
    return chol, mean


def sample_exact_gaussian(state: ConditioningState, m_copies: int, rng: np.random.Generator) -> CopySet:
    """I.i.d. draws from the Gaussian plug-in conditional law."""
    if m_copies < 1:
        raise InvalidArgument("m_copies must be >= 1")
    chol, mean = _exact_factor(state)
    xi = rng.standard_normal((state.model.n, m_copies))
    noise = solve_triangular(chol.T, xi, lower=False) * math.sqrt(state.model.nu2)
    return CopySet(mean[None, :] + noise.T, "exact_gaussian")


# ---------------------------------------------------------------- Metropolis-Hastings


def metropolis_accept(log_ratio: float, u: float) -> bool:
    """Accept with probability ``min(1, exp(log_ratio))`` given a uniform ``u``."""
    if log_ratio == -np.inf:
        return False
    return u <= 0.0 or math.log(u) < log_ratio


def metropolis_hastings_step(current, propose: Callable, log_target: Callable,
                             log_proposal: Callable, rng: np.random.Generator):
    """Generic MH transition.

    ``propose(current, rng)`` draws a candidate and ``log_proposal(a, b)`` is
    ``log q(a | b)``.
    """
    cand = propose(current, rng)
    ratio = (log_target(cand) - log_target(current)
             + log_proposal(current, cand) - log_proposal(cand, current))
    return cand if metropolis_accept(ratio, rng.random()) else current


def _use_kernel(state: ConditioningState) -> bool:
    return state.problem.solver == "projected_gradient" and state.mode == "constrained"


def _kernel_args(state: ConditioningState):
    prob = state.problem
    lower_sd = mixture_lower_sd(prob.constraints)
    active = np.zeros(5, dtype=bool)
    active[np.array([2, 4])[state.active]] = True
    o = prob.options
    t = o.tolerances
    tail = (o.em_iters, o.max_iter, o.tol_stop, t.tol_act, t.tol_kkt, t.tol_pd, t.tol_member,
            o.step_rule == "newton")
    return lower_sd, active, tail


def _subset(n: int, u_row: np.ndarray) -> np.ndarray:
    perm = np.arange(n)
    mk.subset_from_uniforms(perm, np.ascontiguousarray(u_row))
    return perm[: u_row.shape[0]].copy()


def _propose(state: ConditioningState, x, u_sub, u_comp, z):
    idx = _subset(x.shape[0], u_sub)
    new_vals = state.model.coordinate_draws(state.theta_hat, idx, u_comp, z)
    prop = x.copy()
    prop[idx] = new_vals
    # log q(x | prop) - log q(prop | x) on the resampled coordinates only
    model, th = state.model, state.theta_hat
    log_q = float(np.sum(model.coordinate_log_density(th, x[idx], idx)
                         - model.coordinate_log_density(th, new_vals, idx)))
    return prop, log_q


def _python_step(state, x, u_sub, u_comp, z, u_acc, check_membership, solver):
    fast = isinstance(state.model, GaussianLinear)
    prop, log_q = _propose(state, x, u_sub, u_comp, z)
    ratio = log_q + log_density_ratio(state, prop, x, check_membership=False, solver=solver, fast=fast)
    if not metropolis_accept(ratio, u_acc):
        return x, False
    if check_membership and not fast and not membership_check(state, prop, solver):
        return x, False
    return prop, True


def mh_step(state: ConditioningState, x_current, proposal: ProposalSpec, check_membership: bool,
            solver: EstimationProblem | None, rng: np.random.Generator):
    """One MH transition resampling ``proposal.s`` coordinates from the fitted model.

    Gaussian linear models skip the membership refit (it holds almost surely).
    """
    x = np.asarray(x_current, dtype=float)
    _check_s(proposal.s, x.shape[0])
    tape = draw_tape(rng, 1, proposal.s)
    out, _ = _python_step(state, x, tape.u_subset[0], tape.u_component[0], tape.z[0],
                          tape.u_accept[0], check_membership, solver)
    return out


def _check_s(s: int, n: int):
    if not 1 <= s <= n:
        raise InvalidArgument(f"proposal size must lie in [1, {n}], got {s}")


def run_chain(state: ConditioningState, x0, tape: Tape, check_membership: bool = True,
              solver: EstimationProblem | None = None, use_kernel: bool | None = None):
    """Run one chain over ``tape``; returns ``(x_final, n_accepted)``."""
    x = np.ascontiguousarray(x0, dtype=float)
    if use_kernel is None:
        use_kernel = _use_kernel(state) and (solver is None or solver == state.problem)
    if use_kernel:
        lower_sd, active, tail = _kernel_args(state)
        out, acc, _ = mk.run_chain(x, state.theta_hat, state.g_hat, active, state.sigma, lower_sd,
                                   tape.u_subset, tape.u_component, tape.z, tape.u_accept,
                                   check_membership, *tail)
        return out, int(acc)
    accepted = 0
    for k in range(tape.u_accept.shape[0]):
        x, ok = _python_step(state, x, tape.u_subset[k], tape.u_component[k], tape.z[k],
                             tape.u_accept[k], check_membership, solver)
        accepted += ok
    return x, accepted


def _one_step_acceptance(state: ConditioningState, x, tape: Tape, check_membership: bool) -> float:
    if _use_kernel(state):
        lower_sd, active, tail = _kernel_args(state)
        return float(mk.step_acceptance(np.ascontiguousarray(x), state.theta_hat, state.g_hat, active,
                                        state.sigma, lower_sd, tape.u_subset[0], tape.u_component[0],
                                        tape.z[0], check_membership, *tail))
    fast = isinstance(state.model, GaussianLinear)
    prop, log_q = _propose(state, x, tape.u_subset[0], tape.u_component[0], tape.z[0])
    ratio = log_q + log_density_ratio(state, prop, x, check_membership=False, fast=fast)
    if ratio == -np.inf:
        return 0.0
    a = 1.0 if ratio >= 0 else math.exp(ratio)
    if check_membership and not fast and a > 0 and not membership_check(state, prop):
        return 0.0
    return a


def tune_proposal_size(state: ConditioningState, candidate_s, rng: np.random.Generator,
                       n_sim: int = 100, check_membership: bool = True) -> ProposalSpec:
    """Choose ``s`` by simulating from the fitted model.

    Each simulated data set is refit with fresh noise; non-SSOSP fits are
    discarded.  One MH step per candidate gives its acceptance probability,
    with indicator failures counted as rejections.
    """
    cands = sorted({int(s) for s in candidate_s})
    if not cands:
        raise InvalidArgument("need at least one candidate proposal size")
    n = state.n_obs
    for s in cands:
        _check_s(s, n)
    problem = state.problem
    sums = dict.fromkeys(cands, 0.0)
    used = 0
    for _ in range(n_sim):
        x_sim = _simulate(state, rng)
        w_sim = draw_perturbation(state.d, state.sigma, rng)
        res = fit(problem, x_sim, w_sim)
        tapes = {s: draw_tape(rng, 1, s) for s in cands}
        if not res.ssosp:
            continue
        used += 1
        sim_state = ConditioningState.from_fit(problem, res, x_sim)
        for s in cands:
            sums[s] += _one_step_acceptance(sim_state, x_sim, tapes[s], check_membership)
    if used == 0:
        raise TuningFailed(f"none of the {n_sim} simulated fits was an SSOSP")
    abar = {s: sums[s] / used for s in cands}
    eligible = [s for s in cands if abar[s] >= MIN_ACCEPTANCE]
    if eligible:
        best = max(eligible, key=lambda s: (s * abar[s], -s))
        return ProposalSpec(best, abar[best], abar, False)
    best = max(cands, key=lambda s: (abar[s], -s))
    warnings.warn(f"no proposal size reached acceptance {MIN_ACCEPTANCE}; using s={best} "
                  f"(acceptance {abar[best]:.3g})", RuntimeWarning, stacklevel=2)
    return ProposalSpec(best, abar[best], abar, True)


def _simulate(state: ConditioningState, rng):
    model = state.model
    if isinstance(model, GaussianLinear):
        return model.simulate(state.theta_hat, rng)
    return model.simulate(state.theta_hat, rng, n=state.n_obs)


def chain_length(s: int, abar: float, n: int) -> int:
    """``min(2000, ceil(2n / (s * abar)))``."""
    if not abar > 0:
        raise InvalidArgument("average acceptance must be positive")
    if s < 1 or n < 1:
        raise InvalidArgument("s and n must be positive")
    return int(min(MAX_CHAIN_LENGTH, math.ceil(2.0 * n / (s * abar))))


def hub_and_spoke(state: ConditioningState, x_data, m_copies: int, l_steps: int,
                  proposal: ProposalSpec, check_membership: bool = True,
                  solver: EstimationProblem | None = None, rng: np.random.Generator | None = None) -> CopySet:
    """Run a chain from the data to a hub, then ``m_copies`` independent chains from the hub."""
    if l_steps < 1 or m_copies < 1:
        raise InvalidArgument("l_steps and m_copies must be >= 1")
    if rng is None:
        raise InvalidArgument("an explicit random generator is required")
    x = np.ascontiguousarray(x_data, dtype=float)
    _check_s(proposal.s, x.shape[0])
    entropy = int(rng.integers(2**63))
    hub, acc = run_chain(state, x, draw_tape(chain_rng(entropy, 0), l_steps, proposal.s),
                         check_membership, solver)
    total = acc
    copies = np.empty((m_copies, x.shape[0]))
    for m in range(m_copies):
        tape = draw_tape(chain_rng(entropy, m + 1), l_steps, proposal.s)
        copies[m], acc = run_chain(state, hub, tape, check_membership, solver)
        total += acc
    rate = total / (l_steps * (m_copies + 1))
    return CopySet(copies, "hub_and_spoke", rate, {"L": l_steps, "s": proposal.s, "hub": hub})
