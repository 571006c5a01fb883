"""Fit quality and estimator-quality metrics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class MetricError(ValueError):
    """A metric is undefined for the given input."""


def vaf(y, yhat) -> float:
    """Variance accounted for, in percent: ``(1 - sum (y - yhat)^2 / sum y^2) * 100``."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise MetricError(f"length mismatch: {y.shape} vs {yhat.shape}")
    denom = float(y @ y)
    if denom == 0:
        raise MetricError("VAF undefined for an all-zero observation series")
    r = y - yhat
    return (1.0 - float(r @ r) / denom) * 100.0


@dataclass(frozen=True)
class ReplicationSet:
    """Estimates from ``R`` replications (rows) of ``p`` parameters, normalized frame."""

    estimates: np.ndarray
    truth: np.ndarray | None = None
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        est = np.atleast_2d(np.asarray(self.estimates, dtype=float))
        object.__setattr__(self, "estimates", est)
        if est.shape[0] < 1:
            raise MetricError("need at least one replication")
        if self.truth is not None:
            truth = np.asarray(self.truth, dtype=float)
            if truth.shape != (est.shape[1],):
                raise MetricError("truth length does not match estimate columns")
            object.__setattr__(self, "truth", truth)
        labels = self.labels
        if labels is None:
            labels = tuple(f"p{k}" for k in range(est.shape[1]))
        labels = tuple(labels)
        if len(labels) != est.shape[1]:
            raise MetricError("label count does not match estimate columns")
        object.__setattr__(self, "labels", labels)

    @property
    def n_reps(self) -> int:
        return self.estimates.shape[0]


class BiasVariance(NamedTuple):
    bias: np.ndarray
    variance: np.ndarray


def bias(reps: ReplicationSet) -> np.ndarray:
    if reps.truth is None:
        raise MetricError("bias needs a truth vector")
    return np.abs(reps.estimates.mean(axis=0) - reps.truth)


def variance(reps: ReplicationSet) -> np.ndarray:
    """Unbiased (ddof=1) sample variance per parameter."""
    if reps.n_reps < 2:
        raise MetricError("variance needs at least two replications")
    return reps.estimates.var(axis=0, ddof=1)


def bias_variance(reps: ReplicationSet) -> BiasVariance:
    return BiasVariance(bias(reps), variance(reps))


def variance_improvement(regularized: ReplicationSet, unregularized: ReplicationSet) -> float:
    """``(1 - mean_k var_reg / mean_k var_unreg) * 100``.

    Per-parameter variances are averaged before the ratio, giving one number
    per study.
    """
    if regularized.estimates.shape[1] != unregularized.estimates.shape[1]:
        raise MetricError("replication sets cover different parameter counts")
    v_reg = float(np.mean(variance(regularized)))
    v_all = float(np.mean(variance(unregularized)))
    if v_all == 0:
        raise MetricError("unregularized variance is zero")
    return (1.0 - v_reg / v_all) * 100.0


def selection_frequency(subsets: Sequence[Sequence[str]]) -> list[tuple[tuple[str, ...], int]]:
    """Counts of each selected subset, most frequent first, ties by sorted names."""
    counts = Counter(tuple(sorted(s)) for s in subsets)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
