"""CSV and JSON writers for sampler and estimator results.

Formats (all CSV files have a header row):

* samples CSV for MC/QMC: ``index,theta_0..theta_{d-1},output_0..output_{m-1}``
* chain CSV for MCMC: ``chain,level,step,theta_0..theta_{d-1},log_density``
* KDE CSV: ``x,density``
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def _fmt(x: float) -> str:
    return repr(float(x))


def write_samples_csv(path, points: np.ndarray, values: np.ndarray) -> None:
    points, values = np.atleast_2d(points), np.atleast_2d(values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"theta_{i}" for i in range(points.shape[1])]
                   + [f"output_{j}" for j in range(values.shape[1])])
        for i, (p, v) in enumerate(zip(points, values)):
            w.writerow([i] + [_fmt(x) for x in p] + [_fmt(x) for x in v])


def write_chains_csv(path, results) -> None:
    dim = next((r.samples.shape[1] for r in results if r.samples.size), 0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chain", "level", "step"] + [f"theta_{i}" for i in range(dim)] + ["log_density"])
        for r in results:
            for level, (pts, lds) in enumerate(zip(r.level_samples, r.level_log_densities)):
                for step, (p, lp) in enumerate(zip(pts, lds)):
                    w.writerow([r.chain, level, step] + [_fmt(x) for x in p] + [_fmt(lp)])


def read_chains_csv(path) -> dict[tuple[int, int], np.ndarray]:
    """Load a chain CSV into ``{(chain, level): array of theta rows}``."""
    rows: dict[tuple[int, int], list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        theta_cols = [c for c in reader.fieldnames if c.startswith("theta_")]
        for row in reader:
            key = (int(row["chain"]), int(row["level"]))
            rows.setdefault(key, []).append([float(row[c]) for c in theta_cols])
    return {k: np.array(v) for k, v in rows.items()}


def write_kde_csv(path, grid: np.ndarray, density: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "density"])
        for x, d in zip(grid, density):
            w.writerow([_fmt(x), _fmt(d)])


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def chain_summary(results) -> dict:
    ok = [r for r in results if r.ok]
    pooled = np.concatenate([r.samples for r in ok]) if ok else np.empty((0, 0))
    return {
        "chains": len(results),
        "failed_chains": {r.chain: r.error for r in results if not r.ok},
        "pooled_mean": pooled.mean(axis=0) if pooled.size else None,
        "pooled_variance": pooled.var(axis=0, ddof=1) if len(pooled) > 1 else None,
        "acceptance_rate": [r.acceptance_rate for r in results],
        "evaluations_per_level": [r.evaluations for r in results],
    }
