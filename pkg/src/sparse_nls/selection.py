"""Sparsity-targeted choice of the L1 radius.

Starting from ``t_init`` the radius moves by ``-(NumParams - n_star) / (p + n_star)``
per round, where ``NumParams`` counts deviations above ``select_threshold``.
Once the count has been seen on both sides of ``n_star`` the search bisects
between the bracketing radii.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .l1 import project_l1
from .metrics import selection_frequency
from .models import Dataset, NonlinearModel
from .solver import SolveResult, SolverConfig, fit


class SelectionError(RuntimeError):
    def __init__(self, msg, round_trace=None):
        super().__init__(msg)
        self.round_trace = round_trace or []


class InfeasibleTargetError(SelectionError):
    pass


@dataclass(frozen=True)
class SelectionConfig:
    n_star: int
    t_init: float = 1.0
    select_threshold: float = 1e-3
    max_rounds: int = 100
    denominator: float | None = None    # None -> p + n_star

    def __post_init__(self):
        if self.n_star < 1:
            raise ValueError("n_star must be at least 1")
        if not self.select_threshold > 0:
            raise ValueError("select_threshold must be positive")
        if not self.t_init >= 0:
            raise ValueError("t_init must be non-negative")


@dataclass
class SelectionOutcome:
    radius: float
    selected: list[str]
    result: SolveResult
    rounds: int
    round_trace: list[tuple[float, int]] = field(default_factory=list)


def count_sensitive(d, threshold: float) -> int:
    return int(np.sum(np.abs(d) > threshold))


def select(model: NonlinearModel, data: Dataset, cfg: SelectionConfig,
           solver_cfg: SolverConfig | None = None, init=None) -> SelectionOutcome:
    spec = model.spec
    p = spec.size
    n_star = cfg.n_star
    if n_star > p:
        raise InfeasibleTargetError(f"n_star={n_star} exceeds the {p} free parameters")
    solver_cfg = solver_cfg or SolverConfig()
    denom = cfg.denominator if cfg.denominator is not None else p + n_star

    radius = cfg.t_init
    warm = np.zeros(p) if init is None else np.asarray(init, dtype=float)
    big = small = None     # radii known to give too many / too few parameters
    trace = []
    for rnd in range(1, cfg.max_rounds + 1):
        res = fit(model, data, project_l1(warm, radius), solver_cfg.with_radius(radius))
        num = count_sensitive(res.deviations, cfg.select_threshold)
        trace.append((radius, num))
        if num == n_star:
            selected = [n for n, d in zip(spec.names, res.deviations) if abs(d) > cfg.select_threshold]
            return SelectionOutcome(radius, selected, res, rnd, trace)

        if num > n_star:
            big = radius if big is None else min(big, radius)
            if radius == 0:
                raise InfeasibleTargetError("radius reached 0 with too many parameters", trace)
        else:
            small = radius if small is None else max(small, radius)
            slack = radius - float(np.abs(res.deviations).sum())
            if big is None and slack > 1e-6 * max(radius, 1.0):
                # constraint inactive: a larger ball cannot add parameters
                raise InfeasibleTargetError(
                    f"only {num} parameters deviate with the constraint inactive", trace)

        if big is not None and small is not None:
            if big - small <= 1e-12 * max(big, 1.0):
                raise SelectionError("bracket collapsed without reaching n_star", trace)
            radius = 0.5 * (big + small)
        else:
            radius = max(radius - (num - n_star) / denom, 0.0)
        warm = res.deviations
    raise SelectionError(f"no radius with {n_star} parameters after {cfg.max_rounds} rounds", trace)


def most_frequent_subset(outcomes: Sequence[SelectionOutcome | Iterable[str]]) -> list[str]:
    """Most common selected subset; ties go to the lexicographically smallest sorted tuple."""
    if not outcomes:
        raise ValueError("no outcomes given")
    subsets = [o.selected if isinstance(o, SelectionOutcome) else list(o) for o in outcomes]
    return list(selection_frequency(subsets)[0][0])
