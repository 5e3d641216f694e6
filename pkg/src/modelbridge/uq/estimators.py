"""Forward propagation: Monte Carlo and quasi-Monte Carlo mean estimators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..client import evaluate_batch
from .distributions import as_product, sample
from .halton import halton


class EstimatorError(RuntimeError):
    """A model evaluation failed; ``completed`` maps indices to the outputs that did succeed."""

    def __init__(self, message, failures, completed):
        super().__init__(message)
        self.failures = failures
        self.completed = completed


@dataclass
class MeanEstimate:
    mean: np.ndarray
    stderr: np.ndarray | None
    n: int
    points: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    provenance: str = "MC"


def propagate(model, points: np.ndarray, config=None, parallelism: int = 1) -> np.ndarray:
    """Evaluate *model* at every row of *points*; returns the flattened outputs, one row per point."""
    batch = [[row.tolist()] for row in np.asarray(points, dtype=float)]
    results = evaluate_batch(model, batch, config, parallelism)
    failures = {i: r for i, r in enumerate(results) if isinstance(r, Exception)}
    if failures:
        first = next(iter(failures.values()))
        completed = {i: r for i, r in enumerate(results) if i not in failures}
        raise EstimatorError(
            f"{len(failures)} of {len(results)} evaluations failed (first: {first})", failures, completed
        )
    return np.array([np.concatenate([np.asarray(v, dtype=float) for v in r]) for r in results])


def mc_mean(model, dist, n: int, parallelism: int = 1, seed=None, config=None) -> MeanEstimate:
    """Plain Monte Carlo estimate of E[F(theta)] with its standard error."""
    points = sample(dist, n, seed)
    values = propagate(model, points, config, parallelism)
    mean = values.mean(axis=0)
    stderr = values.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full_like(mean, np.nan)
    return MeanEstimate(mean, stderr, n, points, values, "MC")


def qmc_points(dist, n: int) -> np.ndarray:
    dist = as_product(dist)
    dist.check_ppf()
    return dist.ppf(halton(n, dist.dim))


def qmc_mean(model, dist, n: int, parallelism: int = 1, config=None) -> MeanEstimate:
    """Quasi-Monte Carlo estimate over Halton points mapped through the inverse CDFs.

    Every component must have an inverse CDF; this is checked before any
    evaluation is issued.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    points = qmc_points(dist, n)
    values = propagate(model, points, config, parallelism)
    return MeanEstimate(values.mean(axis=0), None, n, points, values, "QMC")
