"""Simulation harness: null calibration and power studies for the three examples.

Seeds: the data for trial ``t`` at signal index ``j`` come from
``SeedSequence([seed, j, t])``; each method draws from its own sub-stream
keyed by method and sigma, so all methods see the same data.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .constraints import builtin_constraints
from .density import ConditioningState
from .errors import InvalidArgument, ParseError, TuningFailed, Unsupported
from .estimation import EstimationProblem, SolverOptions, fit, mixture_constraints
from .inference import TestStatistic, compute_pvalue, evaluate_many, evaluate_statistic
from .models import GaussianLinear, GaussianMixture2, draw_perturbation
from .samplers import (
    MAX_CHAIN_LENGTH,
    ProposalSpec,
    chain_length,
    degenerate_copies,
    hub_and_spoke,
    sample_exact_gaussian,
    tune_proposal_size,
)

EXPERIMENTS = ("mixture_gof", "isotonic_regression", "sparse_regression")
METHODS = ("reg_acss", "plain_acss", "oracle")
MIXTURE_THETA0 = (0.5, 0.4, 0.1, -0.4, 0.1)


def _grid(stop: float, step: float) -> list[float]:
    return [round(i * step, 10) for i in range(int(round(stop / step)) + 1)]


DEFAULTS: dict[str, dict[str, Any]] = {
    "mixture_gof": {
        "signals": _grid(0.5, 0.05),
        "sigmas": [8.0],
        "alpha": 0.05,
        "methods": ["reg_acss", "oracle"],
        "params": {"n": 200, "lower_sd": 0.098, "s_candidates": [1, 2, 5, 10, 20], "n_tune": 100},
    },
    "isotonic_regression": {
        "signals": _grid(0.5, 0.05),
        "sigmas": [1.0, 4.0, 7.0, 10.0],
        "alpha": 0.1,
        "methods": ["reg_acss", "plain_acss", "oracle"],
        "params": {"n": 100},
    },
    "sparse_regression": {
        "signals": _grid(1.0, 0.1),
        "sigmas": [7.0],
        "alpha": 0.1,
        "methods": ["reg_acss", "plain_acss", "oracle"],
        "params": {"n": 50, "d": 100, "k": 5, "theta_value": 5.0, "lambda_ridge": 0.01, "lambda_l1": 2.0},
    },
}
DESK_TRIALS = 500
DESK_COPIES = 100


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    signals: list
    sigmas: list
    n_trials: int = DESK_TRIALS
    m_copies: int = DESK_COPIES
    alpha: float = 0.1
    methods: list = field(default_factory=lambda: ["reg_acss", "oracle"])
    seed: int = 0
    output_path: str | None = None
    params: dict = field(default_factory=dict)
    n_jobs: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise InvalidArgument(f"unknown experiment {self.experiment!r}")
        if int(self.n_trials) < 1 or int(self.m_copies) < 1:
            raise InvalidArgument("n_trials and m_copies must be >= 1")
        if not 0 < self.alpha < 1:
            raise InvalidArgument("alpha must lie in (0, 1)")
        if not self.signals or not self.sigmas:
            raise InvalidArgument("signal and sigma grids must be nonempty")
        if not self.methods:
            raise InvalidArgument("method list is empty")
        for m in self.methods:
            if m not in METHODS:
                raise InvalidArgument(f"unknown method {m!r}")
        if any(not s > 0 for s in self.sigmas):
            raise InvalidArgument("sigmas must be positive")
        if self.experiment == "mixture_gof" and "plain_acss" in self.methods:
            raise Unsupported("unconstrained aCSS is undefined for the mixture (the MLE degenerates)")
        return self

    def param(self, key: str):
        if key in self.params:
            return self.params[key]
        return DEFAULTS[self.experiment]["params"][key]

    def to_dict(self) -> dict:
        return asdict(self)


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a config, filling experiment defaults for missing keys."""
    doc = dict(doc)
    exp = doc.get("experiment")
    if exp not in EXPERIMENTS:
        raise InvalidArgument(f"unknown experiment {exp!r}")
    base = DEFAULTS[exp]
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
    merged = {"signals": base["signals"], "sigmas": base["sigmas"], "alpha": base["alpha"],
              "methods": base["methods"]}
    merged.update(doc)
    merged["signals"] = [float(v) for v in merged["signals"]]
    merged["sigmas"] = [float(v) for v in merged["sigmas"]]
    merged["methods"] = list(merged["methods"])
    return ExperimentConfig(**merged).validate()


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, exc.lineno) from None
    return config_from_dict(doc)


def paper_scale(config: ExperimentConfig) -> ExperimentConfig:
    """Full-size trial counts: 500 trials with M=300 for the mixture, 5000 trials otherwise."""
    if config.experiment == "mixture_gof":
        return replace(config, n_trials=500, m_copies=300)
    return replace(config, n_trials=5000)


# ---------------------------------------------------------------- data generation


@dataclass
class TrialData:
    x: np.ndarray
    statistic: TestStatistic
    theta0: np.ndarray
    z: np.ndarray | None = None


def _stream(*keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


def isotonic_signal(n: int) -> np.ndarray:
    return 0.1 * np.ceil(np.arange(1, n + 1) / 10.0)


def generate_data(config: ExperimentConfig, signal: float, rng: np.random.Generator) -> TrialData:
    exp = config.experiment
    if exp == "mixture_gof":
        n = int(config.param("n"))
        u = rng.random(n)
        centers = np.where(u < signal, 0.0, np.where(rng.random(n) < 0.5, 0.4, -0.4))
        x = centers + 0.1 * rng.standard_normal(n)
        return TrialData(x, TestStatistic("kmeans_wcss_decrease"), np.array(MIXTURE_THETA0))
    if exp == "isotonic_regression":
        n = int(config.param("n"))
        theta0 = isotonic_signal(n)
        x = theta0 + rng.standard_normal(n)
        y = signal * x + rng.standard_normal(n)
        return TrialData(x, TestStatistic("abs_correlation", y=y), theta0)
    n, d, k = int(config.param("n")), int(config.param("d")), int(config.param("k"))
    theta0 = np.zeros(d)
    theta0[:k] = float(config.param("theta_value"))
    z = rng.standard_normal((n, d)) / math.sqrt(d)
    x = z @ theta0 + rng.standard_normal(n)
    y = signal * x + z[:, :k].sum(axis=1) + rng.standard_normal(n)
    return TrialData(x, TestStatistic("elastic_net_coef", y=y, z=z), theta0, z)


def _problem(config: ExperimentConfig, method: str, sigma: float, data: TrialData) -> EstimationProblem:
    exp = config.experiment
    if exp == "mixture_gof":
        return EstimationProblem(GaussianMixture2(), "constrained", sigma, "projected_gradient",
                                 constraints=mixture_constraints(float(config.param("lower_sd"))))
    if exp == "isotonic_regression":
        model = GaussianLinear(np.eye(data.x.shape[0]))
        if method == "reg_acss":
            return EstimationProblem(model, "constrained", sigma, "pava",
                                     constraints=builtin_constraints("monotone", model.dim))
        return EstimationProblem(model, "constrained", sigma, "activeset_qp")
    model = GaussianLinear(data.z, ridge=float(config.param("lambda_ridge")))
    if method == "reg_acss":
        return EstimationProblem(model, "l1_penalized", sigma, "coordinate_descent",
                                 lambda_l1=float(config.param("lambda_l1")),
                                 options=SolverOptions(max_iter=100000))
    return EstimationProblem(model, "constrained", sigma, "activeset_qp")


def _oracle_copies(config: ExperimentConfig, data: TrialData, m: int, rng) -> np.ndarray:
    if config.experiment == "mixture_gof":
        model = GaussianMixture2()
        return np.array([model.simulate(data.theta0, rng, n=data.x.shape[0]) for _ in range(m)])
    mean = data.theta0 if data.z is None else data.z @ data.theta0
    return mean[None, :] + rng.standard_normal((m, mean.shape[0]))


# ---------------------------------------------------------------- trials


@dataclass
class TrialResult:
    trial_id: int
    method: str
    signal_level: float
    sigma: float
    pvalue: float
    ssosp_ok: bool
    acceptance_rate: float | None
    proposal_size: int | None
    chain_length: int | None
    t_obs: float
    wall_time_ms: float = 0.0


METHOD_KEYS = {m: i for i, m in enumerate(METHODS)}


def trial_seed(config: ExperimentConfig, signal_index: int, trial: int) -> int:
    ss = np.random.SeedSequence([int(config.seed), int(signal_index), int(trial)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def run_trial(config: ExperimentConfig, method: str, signal: float, sigma: float, seed: int,
              trial_id: int = 0, data: TrialData | None = None) -> TrialResult:
    """One trial: generate data from ``seed``, build copies with ``method``, return the p-value."""
    if method not in METHODS:
        raise InvalidArgument(f"unknown method {method!r}")
    if config.experiment == "mixture_gof" and method == "plain_acss":
        raise Unsupported("unconstrained aCSS is undefined for the mixture (the MLE degenerates)")
    start = time.perf_counter()
    if data is None:
        data = generate_data(config, signal, _stream(seed, 0))
    rng = _stream(seed, 1, METHOD_KEYS[method], int(round(sigma * 1e6)))
    m = int(config.m_copies)
    t_obs = evaluate_statistic(data.statistic, data.x)
    acc = s = length = None
    ssosp_ok = True

    if method == "oracle":
        copies = _oracle_copies(config, data, m, rng)
    else:
        problem = _problem(config, method, sigma, data)
        res = fit(problem, data.x, draw_perturbation(problem.d, sigma, rng))
        ssosp_ok = bool(res.ssosp)
        if not ssosp_ok:
            copies = degenerate_copies(data.x, m).copies
        elif config.experiment == "mixture_gof":
            state = ConditioningState.from_fit(problem, res, data.x)
            s, length = _tuned_chain(config, state, rng)
            cs = hub_and_spoke(state, data.x, m, length, ProposalSpec(s), True, None, rng)
            copies, acc = cs.copies, cs.acceptance_rate
        else:
            state = ConditioningState.from_fit(problem, res, data.x)
            copies = sample_exact_gaussian(state, m, rng).copies

    if not ssosp_ok:
        pval = 1.0
    else:
        pval = compute_pvalue(t_obs, evaluate_many(data.statistic, copies))
    wall = (time.perf_counter() - start) * 1e3
    return TrialResult(trial_id, method, float(signal), float(sigma), pval, ssosp_ok, acc, s, length,
                       float(t_obs), wall)


def _tuned_chain(config: ExperimentConfig, state: ConditioningState, rng):
    """Proposal size and chain length; falls back to ``s = min candidate`` and the cap."""
    cands = [int(c) for c in config.param("s_candidates")]
    n = state.n_obs
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            spec = tune_proposal_size(state, cands, rng, int(config.param("n_tune")))
    except TuningFailed:
        return min(cands), MAX_CHAIN_LENGTH
    if spec.abar > 0:
        return spec.s, chain_length(spec.s, spec.abar, n)
    return spec.s, MAX_CHAIN_LENGTH


def _trial_unit(args) -> list[TrialResult]:
    config, j, signal, t = args
    seed = trial_seed(config, j, t)
    data = generate_data(config, signal, _stream(seed, 0))
    out = []
    for sigma in config.sigmas:
        for method in config.methods:
            out.append(run_trial(config, method, signal, sigma, seed, trial_id=t, data=data))
    return out


# ---------------------------------------------------------------- persistence


TRIAL_COLUMNS = ("trial_id", "method", "signal_level", "sigma", "pvalue", "ssosp_ok",
                 "acceptance_rate", "proposal_size", "chain_length", "t_obs")
SUMMARY_COLUMNS = ("method", "signal_level", "sigma", "rejection_rate", "standard_error", "n_trials",
                   "n_ssosp_fail")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


@dataclass
class SummaryRow:
    method: str
    signal_level: float
    sigma: float
    rejection_rate: float
    standard_error: float
    n_trials: int
    n_ssosp_fail: int


def summarize(results: list[TrialResult], alpha: float) -> list[SummaryRow]:
    groups: dict[tuple, list[TrialResult]] = {}
    for r in results:
        groups.setdefault((r.method, r.signal_level, r.sigma), []).append(r)
    rows = []
    for (method, sig, sigma), rs in groups.items():
        n = len(rs)
        rate = sum(r.pvalue <= alpha for r in rs) / n
        rows.append(SummaryRow(method, sig, sigma, rate, math.sqrt(rate * (1 - rate) / n), n,
                               sum(not r.ssosp_ok for r in rs)))
    rows.sort(key=lambda r: (METHOD_KEYS[r.method], r.signal_level, r.sigma))
    return rows


def _git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None,
                   progress=None) -> tuple[list[SummaryRow], list[TrialResult]]:
    """Run the full grid; writes ``trials.csv``, ``summary.csv``, ``timings.csv`` and ``manifest.json``."""
    config.validate()
    units = [(config, j, float(sig), t) for j, sig in enumerate(config.signals)
             for t in range(int(config.n_trials))]
    results: list[TrialResult] = []
    if config.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            for chunk in pool.map(_trial_unit, units, chunksize=4):
                results.extend(chunk)
    else:
        for k, unit in enumerate(units):
            results.extend(_trial_unit(unit))
            if progress is not None:
                progress(k + 1, len(units))
    summary = summarize(results, config.alpha)
    target = out_dir if out_dir is not None else config.output_path
    if target is not None:
        write_outputs(Path(target), config, results, summary)
    return summary, results


def write_outputs(out: Path, config: ExperimentConfig, results: list[TrialResult],
                  summary: list[SummaryRow]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    trials = _csv_text(TRIAL_COLUMNS, [asdict(r) for r in results]).encode()
    summ = _csv_text(SUMMARY_COLUMNS, [asdict(r) for r in summary]).encode()
    timings = _csv_text(("trial_id", "method", "signal_level", "sigma", "wall_time_ms"),
                        [asdict(r) for r in results]).encode()
    written = []
    try:
        for name, blob in (("trials.csv", trials), ("summary.csv", summ), ("timings.csv", timings)):
            (out / name).write_bytes(blob)
            written.append(name)
        manifest = {
            "config": config.to_dict(),
            "trial_seeds": {str(j): [trial_seed(config, j, t) for t in range(int(config.n_trials))]
                            for j in range(len(config.signals))},
            "content_hash": {"trials.csv": _git_blob_hash(trials), "summary.csv": _git_blob_hash(summ)},
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError:
        (out / "PARTIAL").write_text("incomplete outputs: " + ", ".join(written) + "\n")
        raise


# ---------------------------------------------------------------- histograms


def read_trials(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        need = {"method", "signal_level", "sigma", "pvalue"}
        if not need <= set(header):
            raise ParseError(f"header lacks columns {sorted(need - set(header))}", 1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            rec = dict(zip(header, row))
            try:
                rec["pvalue"] = float(rec["pvalue"])
                rec["signal_level"] = float(rec["signal_level"])
                rec["sigma"] = float(rec["sigma"])
            except ValueError as exc:
                raise ParseError(str(exc), line) from None
            if not 0.0 < rec["pvalue"] <= 1.0:
                raise ParseError(f"p-value {rec['pvalue']} outside (0, 1]", line)
            rows.append(rec)
    return rows


def emit_histogram_data(per_trial_csv: str | Path, bins: int, out: str | Path | None = None) -> str:
    """Counts of p-values in ``bins`` right-closed bins on (0, 1], per (method, signal, sigma)."""
    if bins < 1:
        raise InvalidArgument("bins must be >= 1")
    rows = read_trials(per_trial_csv)
    groups: dict[tuple, np.ndarray] = {}
    for r in rows:
        key = (r["method"], r["signal_level"], r["sigma"])
        counts = groups.setdefault(key, np.zeros(bins, dtype=int))
        idx = min(max(math.ceil(r["pvalue"] * bins) - 1, 0), bins - 1)
        counts[idx] += 1
    recs = []
    for (method, sig, sigma), counts in sorted(groups.items()):
        for b in range(bins):
            recs.append({"method": method, "signal_level": sig, "sigma": sigma,
                         "bin_lo": b / bins, "bin_hi": (b + 1) / bins, "count": int(counts[b])})
    text = _csv_text(("method", "signal_level", "sigma", "bin_lo", "bin_hi", "count"), recs)
    if out is not None:
        Path(out).write_text(text)
    return text
