"""Levenberg-Marquardt with an L1-ball constraint on the normalized deviations.

Each outer step linearizes ``r(d) = y - f(d)`` at the current deviation
vector and solves the constrained subproblem of `sparse_nls.l1` with
``Lam = J'J + mu diag(J'J)``.  A candidate is accepted iff it strictly lowers
``S_n = sum r^2``; then ``mu /= nu``.  Otherwise ``mu *= nu`` and the
subproblem is re-solved on the same linearization.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .l1 import SubproblemError, SubproblemSpec, project_l1, solve_subproblem
from .metrics import MetricError, vaf
from .models import Dataset, ModelEvaluationError, NonlinearModel, evaluate, residuals
from .params import deviation, deviation_to_physical

TRACE_COLUMNS = ("iter", "sse", "mu", "step_inf", "l1_norm")


class SolverError(RuntimeError):
    pass


class MultistartError(SolverError):
    def __init__(self, msg, statuses):
        super().__init__(msg)
        self.statuses = statuses


@dataclass(frozen=True)
class SolverConfig:
    mu0: float = 1e-3
    nu: float = 2.0
    max_outer: int = 200
    step_tol: float = 1e-6
    radius: float = np.inf
    subproblem_tol: float = 1e-10
    subproblem_method: str = "homotopy"
    mu_max: float = 1e10
    active_threshold: float = 1e-3

    def __post_init__(self):
        if not self.mu0 > 0:
            raise ValueError("mu0 must be positive")
        if not self.nu > 1:
            raise ValueError("nu must exceed 1")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")
        if not (self.step_tol > 0 and self.subproblem_tol > 0):
            raise ValueError("tolerances must be positive")
        if not self.radius >= 0:
            raise ValueError("radius must be non-negative")

    def with_radius(self, radius: float) -> "SolverConfig":
        return replace(self, radius=float(radius))


@dataclass
class SolveResult:
    deviations: np.ndarray
    params: np.ndarray
    sse: float
    vaf: float
    outer_iters: int
    trace: np.ndarray           # rows of TRACE_COLUMNS
    accepted: np.ndarray        # per trace row after the first
    active_mask: np.ndarray
    wall_time: float
    status: str
    radius: float
    names: list = field(default_factory=list)
    starts: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def active(self) -> list[str]:
        return [n for n, m in zip(self.names, self.active_mask) if m]


def _vaf(data: Dataset, r: np.ndarray) -> float:
    try:
        return vaf(data.y, data.y - r)
    except MetricError:
        return float("nan")


def fit(model: NonlinearModel, data: Dataset, init=None, cfg: SolverConfig | None = None) -> SolveResult:
    """Minimize ``S_n`` over ``{d : ||d||_1 <= cfg.radius}`` starting from ``init``.

    Terminates with status ``converged`` when a step's infinity norm drops
    below ``step_tol``, ``stalled`` when ``mu`` exceeds ``mu_max`` and
    ``max_iter`` after ``max_outer`` candidate steps.  Model failures at a
    candidate count as rejections; a failure at the start propagates.
    """
    cfg = cfg or SolverConfig()
    spec = model.spec
    t0 = time.perf_counter()
    d = np.zeros(spec.size) if init is None else np.asarray(init, dtype=float).copy()
    if np.isfinite(cfg.radius):
        d = project_l1(d, cfg.radius)

    ev = evaluate(model, data, d)
    sse = ev.sse
    mu = cfg.mu0
    trace = [(0, sse, mu, 0.0, float(np.abs(d).sum()))]
    accepted = []
    status = "max_iter"
    warm = d
    for it in range(1, cfg.max_outer + 1):
        sp = SubproblemSpec.from_lm(ev.jacobian, ev.residuals, d, mu, cfg.radius)
        try:
            cand = solve_subproblem(sp, warm_start=warm, tol=cfg.subproblem_tol,
                                    method=cfg.subproblem_method)
        except SubproblemError as exc:
            cand = exc.best
        step_inf = float(np.max(np.abs(cand - d))) if len(d) else 0.0
        try:
            r_new = residuals(model, data, cand)
            sse_new = float(r_new @ r_new)
        except ModelEvaluationError:
            sse_new = np.inf

        ok = sse_new < sse
        accepted.append(ok)
        if ok:
            d, sse = cand, sse_new
            mu /= cfg.nu
        else:
            mu *= cfg.nu
        trace.append((it, sse, mu, step_inf, float(np.abs(d).sum())))

        if step_inf < cfg.step_tol:
            status = "converged"
            break
        if ok:
            ev = evaluate(model, data, d)
            warm = d
        else:
            warm = cand
        if mu > cfg.mu_max:
            status = "stalled"
            break

    r = residuals(model, data, d)
    return SolveResult(
        deviations=d,
        params=deviation_to_physical(spec, d),
        sse=float(r @ r),
        vaf=_vaf(data, r),
        outer_iters=len(accepted),
        trace=np.array(trace, dtype=float),
        accepted=np.array(accepted, dtype=bool),
        active_mask=np.abs(d) > cfg.active_threshold,
        wall_time=time.perf_counter() - t0,
        status=status,
        radius=float(cfg.radius),
        names=spec.names,
    )


def random_starts(spec, n_starts: int, seed: int, radius: float = np.inf, init=None) -> list[np.ndarray]:
    """Deterministic start list: ``init`` (default the typical point) then uniform draws.

    Random starts are uniform in the normalized box, converted to deviations
    and projected onto the L1 ball.
    """
    rng = np.random.default_rng(seed)
    first = np.zeros(spec.size) if init is None else np.asarray(init, dtype=float)
    starts = [first]
    for _ in range(n_starts - 1):
        d = deviation(spec, rng.uniform(size=spec.size))
        starts.append(project_l1(d, radius) if np.isfinite(radius) else d)
    return starts


def fit_multistart(model: NonlinearModel, data: Dataset, cfg: SolverConfig | None = None,
                   n_starts: int = 5, seed: int = 0, init=None, jobs: int = 1) -> SolveResult:
    """Best-of-``n_starts`` fit; ties in ``S_n`` go to the lower start index."""
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    cfg = cfg or SolverConfig()
    starts = random_starts(model.spec, n_starts, seed, cfg.radius, init)

    def run(d0):
        try:
            return fit(model, data, d0, cfg)
        except ModelEvaluationError as exc:
            return exc

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outcomes = list(pool.map(run, starts))
    else:
        outcomes = [run(d0) for d0 in starts]

    statuses = [o.status if isinstance(o, SolveResult) else f"failed: {o}" for o in outcomes]
    ok = [(o.sse, i) for i, o in enumerate(outcomes) if isinstance(o, SolveResult)]
    if not ok:
        raise MultistartError(f"all {n_starts} starts failed: {statuses}", statuses)
    best = outcomes[min(ok)[1]]
    best.starts = [{"index": i, "status": s,
                    "sse": o.sse if isinstance(o, SolveResult) else None}
                   for i, (o, s) in enumerate(zip(outcomes, statuses))]
    return best


def write_trace(result: SolveResult, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in result.trace:
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
