"""Monte Carlo studies of the L1-constrained estimator and a Nelder-Mead timing baseline.

Every study is a pure function of its `StudyConfig`: replication ``rep`` at
sample size ``n`` draws its data from ``default_rng([seed, rep, n])``, so
results do not depend on execution order or on ``jobs``.
"""

from __future__ import annotations

import json
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from .metrics import ReplicationSet, bias, variance, variance_improvement
from .models import (
    Dataset,
    ModelEvaluationError,
    NonlinearModel,
    expsum_design,
    expsum_model,
    generate_reference,
    headneck_surrogate,
    linear_model,
    residuals,
    simulate,
)
from .params import vector_from_mapping
from .selection import SelectionConfig, SelectionError, select
from .solver import SolverConfig, fit

RADIUS_POLICIES = ("oracle", "fixed", "select", "none")


class StudyError(RuntimeError):
    pass


@dataclass(frozen=True)
class StudyConfig:
    """One Monte Carlo design.

    ``truth`` maps parameter names to normalized deviations; unnamed
    parameters sit at their typical values.  ``sigma`` is the noise standard
    deviation as a fraction of the clean output RMS.
    """

    model: str = "expsum"
    truth: dict = field(default_factory=dict)
    sample_sizes: tuple = (1800,)
    sigma: float = 0.05
    replications: int = 50
    seed: int = 0
    radius_policy: str = "oracle"
    radius: float | None = None
    n_star: int | None = None
    p: int = 6
    typical: dict | None = None
    sample_rate: float = 60.0
    max_failure_frac: float = 0.2
    timing_repeats: int = 5
    baseline_maxfev: int = 200_000
    solver: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))
        if self.replications < 2:
            raise ValueError("replications must be at least 2")
        if list(self.sample_sizes) != sorted(set(self.sample_sizes)):
            raise ValueError("sample_sizes must be strictly increasing")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.radius_policy not in RADIUS_POLICIES:
            raise ValueError(f"radius_policy must be one of {RADIUS_POLICIES}")
        if self.radius_policy == "fixed" and self.radius is None:
            raise ValueError("radius_policy 'fixed' needs a radius")

    @classmethod
    def from_json(cls, doc: dict) -> "StudyConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known - {"study"}
        if unknown:
            raise ValueError(f"unknown study config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in doc.items() if k in known})

    def to_json(self) -> dict:
        d = asdict(self)
        d["sample_sizes"] = list(self.sample_sizes)
        return d


@dataclass
class StudyReport:
    kind: str
    config: dict
    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"kind": self.kind, "config": self.config, "tables": self.tables,
                "summary": self.summary, "failures": self.failures}

    def write_tables(self, directory) -> list[Path]:
        """One flat CSV per table, for plotting."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, rows in self.tables.items():
            if not rows:
                continue
            cols = list(rows[0])
            path = directory / f"{self.kind}_{name}.csv"
            with path.open("w") as fh:
                fh.write(",".join(cols) + "\n")
                for row in rows:
                    fh.write(",".join(_cell(row[c]) for c in cols) + "\n")
            paths.append(path)
        return paths


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------- data

def make_model(cfg: StudyConfig) -> NonlinearModel:
    if cfg.model == "expsum":
        model = expsum_model(cfg.p)
    elif cfg.model == "headneck":
        model = headneck_surrogate()
    elif cfg.model == "linear":
        model = linear_model(cfg.p)
    else:
        raise ValueError(f"unknown model {cfg.model!r}")
    if cfg.typical:
        model = type(model)(model.spec.with_typical(cfg.typical))
    return model


def truth_vector(model: NonlinearModel, cfg: StudyConfig) -> np.ndarray:
    return vector_from_mapping(model.spec, cfg.truth)


def replicate_dataset(model: NonlinearModel, cfg: StudyConfig, n: int, rep: int) -> Dataset:
    """Noisy observations for replication ``rep`` at sample size ``n``."""
    rng = np.random.default_rng([cfg.seed, rep, n])
    if cfg.model == "expsum":
        inputs = expsum_design(n, sample_rate=cfg.sample_rate)
    elif cfg.model == "linear":
        X = rng.normal(size=(n, model.spec.size))
        inputs = Dataset(np.arange(n) / cfg.sample_rate, X, None, cfg.sample_rate)
    else:
        ref_seed = int(rng.integers(2**32))
        inputs = generate_reference(n / cfg.sample_rate, cfg.sample_rate, seed=ref_seed)
    return simulate(model, inputs, truth_vector(model, cfg), cfg.sigma, rng)


def _solver_cfg(cfg: StudyConfig) -> SolverConfig:
    return SolverConfig(**cfg.solver)


def estimate(model, data, cfg: StudyConfig, policy: str | None = None):
    """Deviation estimate under a radius policy; returns ``(d, radius, selected, status)``."""
    policy = policy or cfg.radius_policy
    scfg = _solver_cfg(cfg)
    threshold = scfg.active_threshold
    if policy == "select":
        n_star = cfg.n_star or len([v for v in cfg.truth.values() if v != 0])
        out = select(model, data, SelectionConfig(n_star, select_threshold=threshold), scfg)
        return out.result.deviations, out.radius, out.selected, out.result.status
    if policy == "none":
        radius = np.inf
    elif policy == "oracle":
        radius = float(np.abs(truth_vector(model, cfg)).sum())
    else:
        radius = float(cfg.radius)
    res = fit(model, data, None, scfg.with_radius(radius))
    selected = [n for n, d in zip(model.spec.names, res.deviations) if abs(d) > threshold]
    return res.deviations, radius, selected, res.status


def run_replications(model, cfg: StudyConfig, n: int, policy: str | None = None, jobs: int = 1):
    """Estimates for all replications at one sample size.

    Model and selection errors exclude a replication and are listed in
    ``failed``; fits that stop without converging are kept and listed too.
    """

    def one(rep):
        try:
            data = replicate_dataset(model, cfg, n, rep)
            return estimate(model, data, cfg, policy)
        except (ModelEvaluationError, SelectionError) as exc:
            return exc

    reps = range(cfg.replications)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outs = list(pool.map(one, reps))
    else:
        outs = [one(r) for r in reps]
    ok = [o for o in outs if not isinstance(o, Exception)]
    failed = [f"{r}: {o}" for r, o in zip(reps, outs) if isinstance(o, Exception)]
    if len(failed) > cfg.max_failure_frac * cfg.replications:
        raise StudyError(f"{len(failed)}/{cfg.replications} replications failed at n={n}: {failed[:5]}")
    failed += [f"{r}: {o[3]} (kept)" for r, o in zip(reps, outs)
               if not isinstance(o, Exception) and o[3] != "converged"]
    est = np.array([o[0] for o in ok])
    return est, [o[1] for o in ok], [o[2] for o in ok], failed


def _support(model, cfg):
    truth = truth_vector(model, cfg)
    return truth, np.nonzero(truth)[0]


# ---------------------------------------------------------------- studies

def run_bias_variance_study(cfg: StudyConfig, jobs: int = 1) -> StudyReport:
    """Regularized (``cfg.radius_policy``) versus unregularized fits on the same data."""
    model = make_model(cfg)
    truth, _ = _support(model, cfg)
    names = model.spec.names
    rows, summary, failures = [], {}, {}
    for n in cfg.sample_sizes:
        sets = {}
        for method, policy in (("lasso", cfg.radius_policy), ("unregularized", "none")):
            est, _, _, failed = run_replications(model, cfg, n, policy, jobs)
            failures[f"{n}/{method}"] = failed
            reps = ReplicationSet(est, truth, tuple(names))
            sets[method] = reps
            for name, b, v in zip(names, bias(reps), variance(reps)):
                rows.append({"n": n, "method": method, "param": name, "bias": float(b),
                             "variance": float(v), "r_effective": reps.n_reps})
        b_reg, b_all = bias(sets["lasso"]), bias(sets["unregularized"])
        summary[str(n)] = {
            "improvement": variance_improvement(sets["lasso"], sets["unregularized"]),
            "median_bias_lasso": float(np.median(b_reg)),
            "median_bias_unregularized": float(np.median(b_all)),
        }
    return StudyReport("bias_variance", cfg.to_json(), {"cells": rows}, summary, failures)


def run_consistency_study(cfg: StudyConfig, jobs: int = 1) -> StudyReport:
    """RMSE on the true support versus ``n`` and its log-log slope."""
    if len(cfg.sample_sizes) < 3 or cfg.sample_sizes[-1] < 4 * cfg.sample_sizes[0]:
        raise ValueError("consistency study needs >= 3 sample sizes spanning >= 4x")
    model = make_model(cfg)
    truth, supp = _support(model, cfg)
    rows, failures = [], {}
    for n in cfg.sample_sizes:
        est, _, _, failed = run_replications(model, cfg, n, None, jobs)
        failures[str(n)] = failed
        err = est[:, supp] - truth[supp]
        rows.append({"n": n, "rmse": float(np.sqrt(np.mean(err ** 2))), "r_effective": len(est)})
    slope = float(np.polyfit(np.log([r["n"] for r in rows]), np.log([r["rmse"] for r in rows]), 1)[0])
    return StudyReport("consistency", cfg.to_json(), {"rmse": rows}, {"slope": slope}, failures)


def normal_quantile_correlation(x) -> float:
    """Correlation of the standardized sample with normal quantiles (probability-plot r)."""
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    if sd == 0:
        return float("nan")
    return float(stats.probplot((x - x.mean()) / sd)[1][2])


def run_oracle_study(cfg: StudyConfig, jobs: int = 1) -> StudyReport:
    """Exact-support recovery rate per ``n`` and normality of the support estimates at the largest ``n``."""
    model = make_model(cfg)
    truth, supp = _support(model, cfg)
    names = model.spec.names
    want = sorted(names[k] for k in supp)
    rows, failures, last = [], {}, None
    for n in cfg.sample_sizes:
        est, radii, selected, failed = run_replications(model, cfg, n, None, jobs)
        failures[str(n)] = failed
        hits = sum(sorted(s) == want for s in selected)
        # failed replications count as misses
        counts = Counter(radii)
        modal = min(counts, key=lambda t: (-counts[t], t))
        rows.append({"n": n, "recovery": hits / cfg.replications, "r_effective": len(est),
                     "median_radius": float(np.median(radii)), "modal_radius": float(modal)})
        last = est
    normality = [{"param": names[k], "qq_r": normal_quantile_correlation(last[:, k])} for k in supp]
    rates = [r["recovery"] for r in rows]
    inversions = int(sum(b < a for a, b in zip(rates, rates[1:])))
    summary = {"recovery": {str(r["n"]): r["recovery"] for r in rows},
               "inversions": inversions,
               "normality": {r["param"]: r["qq_r"] for r in normality}}
    return StudyReport("oracle", cfg.to_json(), {"recovery": rows, "normality": normality},
                       summary, failures)


# ---------------------------------------------------------------- Nelder-Mead baseline

class _TargetReached(Exception):
    pass


@dataclass
class BaselineResult:
    deviations: np.ndarray
    sse: float
    nfev: int
    wall_time: float
    weight: float
    feasible: bool
    reached_target: bool
    converged: bool


def nelder_mead_fit(model: NonlinearModel, data: Dataset, radius: float, init=None,
                    target: float | None = None, maxfev: int = 200_000,
                    simplex_step: float = 0.05, feas_tol: float = 1e-6) -> BaselineResult:
    """Simplex minimization of ``S_n + w * max(0, ||d||_1 - radius)``.

    The weight starts at ``S_n(init)`` and doubles until the minimizer is
    feasible within ``feas_tol``.  Each weight level restarts the simplex from
    the best point until a restart no longer improves the objective.  With
    ``target`` set, the run stops as soon as a feasible point with
    ``S_n <= target`` is evaluated (time-to-target protocol).
    """
    t0 = time.perf_counter()
    p = model.spec.size
    x = np.zeros(p) if init is None else np.asarray(init, dtype=float).copy()
    nfev = 0
    best = {"x": x.copy(), "sse": np.inf}

    def sse(d):
        nonlocal nfev
        nfev += 1
        try:
            r = residuals(model, data, d)
        except ModelEvaluationError:
            return np.inf
        s = float(r @ r)
        if np.abs(d).sum() <= radius + feas_tol and s < best["sse"]:
            best["x"], best["sse"] = d.copy(), s
            if target is not None and s <= target:
                raise _TargetReached
        return s

    s0 = sse(x)
    weight = max(s0, 1e-12) if np.isfinite(s0) else 1.0
    reached = False
    converged = False
    try:
        while nfev < maxfev:
            def f(d, w=weight):
                return sse(d) + w * max(0.0, float(np.abs(d).sum()) - radius)
            fx = f(x)
            while nfev < maxfev:
                simplex = np.vstack([x, x + simplex_step * np.eye(p)])
                o = optimize.minimize(f, x, method="Nelder-Mead", options=dict(
                    adaptive=True, initial_simplex=simplex, xatol=1e-9, fatol=1e-12,
                    maxfev=maxfev - nfev))
                improved = o.fun < fx - 1e-12 * max(abs(fx), 1.0)
                x, fx = o.x, o.fun
                if not improved:
                    break
            if np.abs(x).sum() <= radius + feas_tol:
                converged = True
                break
            weight *= 2.0
    except _TargetReached:
        reached = True
        converged = True
    d = best["x"] if np.isfinite(best["sse"]) else x
    return BaselineResult(d, float(best["sse"]), nfev, time.perf_counter() - t0, weight,
                          bool(np.abs(d).sum() <= radius + feas_tol), reached, converged)


def run_timing_benchmark(cfg: StudyConfig, jobs: int = 1) -> StudyReport:
    """Time-to-target wall clock of the L1 LM solver versus the simplex baseline.

    Each of ``timing_repeats`` trials fits one dataset (replication index =
    trial) at the largest sample size.  A full LM run fixes the target
    ``1.01 * S_n``; both solvers are then timed until they first reach a
    feasible point at or below the target.  The LM path is deterministic, so
    its time-to-target is measured by rerunning it capped at the first outer
    iteration whose ``S_n`` meets the target.  Trials always run
    sequentially; ``jobs`` is ignored so that timings are not distorted by
    contention.
    """
    model = make_model(cfg)
    truth = truth_vector(model, cfg)
    n = cfg.sample_sizes[-1]
    scfg = _solver_cfg(cfg)
    if cfg.radius_policy == "fixed":
        radius = float(cfg.radius)
    elif cfg.radius_policy == "none":
        radius = np.inf
    else:
        radius = float(np.abs(truth).sum())
    scfg = scfg.with_radius(radius)
    rows = []
    for trial in range(cfg.timing_repeats):
        data = replicate_dataset(model, cfg, n, trial)
        t0 = time.perf_counter()
        full = fit(model, data, None, scfg)
        t_full = time.perf_counter() - t0
        target = 1.01 * full.sse
        k = int(np.argmax(full.trace[:, 1] <= target))
        t0 = time.perf_counter()
        res = fit(model, data, None, replace(scfg, max_outer=max(k, 1)))
        t_lm = time.perf_counter() - t0
        base = nelder_mead_fit(model, data, radius, target=target, maxfev=cfg.baseline_maxfev)
        rows.append({"trial": trial, "lm_full_time": t_full, "lm_time": t_lm, "nm_time": base.wall_time,
                     "lm_sse": full.sse, "lm_status": full.status, "lm_iters_to_target": k,
                     "lm_target_sse": res.sse, "nm_sse": base.sse, "nm_nfev": base.nfev,
                     "nm_reached_target": base.reached_target, "nm_feasible": base.feasible})
    med = {key: float(np.median([r[key] for r in rows])) for key in ("lm_full_time", "lm_time", "nm_time")}
    matched = all(r["nm_reached_target"] and r["lm_target_sse"] <= 1.01 * r["lm_sse"] for r in rows)
    numeric = [{k: v for k, v in r.items() if not k.endswith("_time")} for r in rows]
    summary = {"matched": matched, "n": n, "radius": radius}
    timing = {"trials": [{k: v for k, v in r.items() if k == "trial" or k.endswith("_time")}
                         for r in rows],
              "lm_median": med["lm_time"], "lm_full_median": med["lm_full_time"],
              "nm_median": med["nm_time"], "speedup": med["nm_time"] / med["lm_time"],
              "speedup_full": med["nm_time"] / med["lm_full_time"]}
    return StudyReport("timing", cfg.to_json(), {"trials": numeric}, summary, {}, timing)


STUDIES = {
    "bias_variance": run_bias_variance_study,
    "consistency": run_consistency_study,
    "oracle": run_oracle_study,
    "timing": run_timing_benchmark,
}


def load_study_config(path) -> tuple[str, StudyConfig]:
    """Read a JSON study config; its ``study`` key names the study to run."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    kind = doc.get("study")
    if kind not in STUDIES:
        raise ValueError(f"{path}: 'study' must be one of {sorted(STUDIES)}")
    return kind, StudyConfig.from_json(doc)
