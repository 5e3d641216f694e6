"""Random-walk Metropolis and Multilevel Delayed Acceptance (MLDA) samplers.

MLDA acceptance
---------------
Level 0 is sampled with Gaussian random-walk Metropolis. For a level l >= 1
in state x, the level-(l-1) sampler is started at x and run for
``subsampling[l-1]`` steps; its final state y is the proposal. Since that
sub-chain is reversible with respect to pi_{l-1}, its J-step kernel K
satisfies pi_{l-1}(x) K(x, y) = pi_{l-1}(y) K(y, x), so the Metropolis-Hastings
ratio with K as the proposal reduces to

    alpha = min(1, pi_l(y) pi_{l-1}(x) / (pi_l(x) pi_{l-1}(y))),

which leaves pi_l invariant. Applied at every level this gives a chain on
the finest level whose stationary law is pi_L, while most density
evaluations happen on the cheap coarse levels.

Random numbers
--------------
A uniform variate is drawn for an accept/reject decision only when the log
ratio is negative. With identical levels the upper-level ratio is exactly 1,
so MLDA then consumes the same stream as plain random-walk Metropolis and
produces the same trace. Chain ``c`` of a run seeded with ``s`` uses the
counter-based Philox generator keyed by ``(s, c)``; :func:`rwm` with seed
``s`` uses chain index 0.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LogDensity = Callable[[np.ndarray], float]


class ChainAborted(RuntimeError):
    pass


def chain_rng(seed: int, chain: int = 0) -> np.random.Generator:
    """Independent stream for chain *chain* of a run seeded with *seed*."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, chain], dtype=np.uint64)))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return chain_rng(0 if seed is None else int(seed), 0)


@dataclass
class ChainResult:
    """Samples of one chain; level ``-1`` in the per-level lists is the target level."""

    samples: np.ndarray
    log_densities: np.ndarray
    acceptance_rate: list[float]
    evaluations: list[int]
    level_samples: list[np.ndarray] = field(default_factory=list, repr=False)
    level_log_densities: list[np.ndarray] = field(default_factory=list, repr=False)
    chain: int = 0
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _checked(value: float, level: int) -> float:
    value = float(value)
    if math.isnan(value) or value == math.inf:
        raise ChainAborted(f"log-density on level {level} returned {value}")
    return value


def _accept(rng: np.random.Generator, log_ratio: float) -> bool:
    if log_ratio >= 0:
        return True
    return math.log(rng.random()) < log_ratio


class _Recorder:
    def __init__(self, n_levels: int):
        self.points: list[list[np.ndarray]] = [[] for _ in range(n_levels)]
        self.log_dens: list[list[float]] = [[] for _ in range(n_levels)]
        self.proposed = [0] * n_levels
        self.accepted = [0] * n_levels
        self.evaluations = [0] * n_levels

    def record(self, level: int, theta: np.ndarray, lp: float) -> None:
        self.points[level].append(theta)
        self.log_dens[level].append(lp)

    def result(self, chain: int, error: str | None = None) -> ChainResult:
        dim = len(self.points[-1][0]) if self.points[-1] else 0
        pts = [np.array(p).reshape(len(p), dim) for p in self.points]
        lds = [np.array(v, dtype=float) for v in self.log_dens]
        rates = [a / p if p else 1.0 for a, p in zip(self.accepted, self.proposed)]
        return ChainResult(pts[-1], lds[-1], rates, list(self.evaluations), pts, lds, chain, error)


class _Sampler:
    """One MLDA chain over levels ``0..L``; with a single level it is plain RWM."""

    def __init__(self, levels: Sequence[LogDensity], subsampling: Sequence[int], sigma, rng):
        self.levels = list(levels)
        self.subsampling = list(subsampling)
        self.sigma = sigma
        self.rng = rng
        self.rec = _Recorder(len(self.levels))

    def evaluate(self, level: int, theta: np.ndarray) -> float:
        self.rec.evaluations[level] += 1
        return _checked(self.levels[level](theta), level)

    def _rwm_step(self, theta: np.ndarray, lps: list) -> tuple[np.ndarray, list]:
        proposal = theta + self.sigma * self.rng.standard_normal(theta.size)
        lp = self.evaluate(0, proposal)
        self.rec.proposed[0] += 1
        if _accept(self.rng, lp - lps[0]):
            self.rec.accepted[0] += 1
            return proposal, [lp]
        return theta, lps

    def step(self, level: int, theta: np.ndarray, lps: list) -> tuple[np.ndarray, list]:
        """One transition on *level*; ``lps[k]`` holds the level-k log-density of *theta* for k <= level."""
        if level == 0:
            theta_new, lps_new = self._rwm_step(theta, lps)
        else:
            sub_theta, sub_lps = theta, lps[:level]
            for _ in range(self.subsampling[level - 1]):
                sub_theta, sub_lps = self.step(level - 1, sub_theta, sub_lps)
            lp = self.evaluate(level, sub_theta)
            self.rec.proposed[level] += 1
            log_ratio = -math.inf if lp == -math.inf else (
                (lp - lps[level]) - (sub_lps[level - 1] - lps[level - 1])
            )
            if _accept(self.rng, log_ratio):
                self.rec.accepted[level] += 1
                theta_new, lps_new = sub_theta, sub_lps[:level] + [lp]
            else:
                theta_new, lps_new = theta, lps[: level + 1]
        self.rec.record(level, theta_new, lps_new[level])
        return theta_new, lps_new

    def run(self, theta0, n_steps: int, chain: int = 0) -> ChainResult:
        theta = np.asarray(theta0, dtype=float).copy()
        lps = [self.evaluate(level, theta) for level in range(len(self.levels))]
        if any(v == -math.inf for v in lps):
            raise ValueError("initial state has zero density on some level")
        top = len(self.levels) - 1
        for level in range(top + 1):
            self.rec.record(level, theta, lps[level])
        for _ in range(n_steps):
            theta, lps = self.step(top, theta, lps)
        return self.rec.result(chain)


def rwm(log_post: LogDensity, theta0, proposal_sigma, n: int, seed=None) -> ChainResult:
    """Gaussian random-walk Metropolis; the returned chain has *n* states including ``theta0``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sampler = _Sampler([log_post], [], np.asarray(proposal_sigma, dtype=float), _as_rng(seed))
    try:
        return sampler.run(theta0, n - 1)
    except ChainAborted as exc:
        raise ValueError(str(exc)) from None


@dataclass
class MldaHierarchy:
    """Log-densities ordered coarse to fine, with ``subsampling[l]`` level-l steps per level-(l+1) proposal."""

    levels: list[LogDensity]
    subsampling: list[int]
    proposal_sigma: float | Sequence[float] = 1.0

    def __post_init__(self):
        if not self.levels:
            raise ValueError("hierarchy needs at least one level")
        if len(self.subsampling) != len(self.levels) - 1:
            raise ValueError(f"need {len(self.levels) - 1} subsampling rates, got {len(self.subsampling)}")
        if any(int(j) != j or j < 1 for j in self.subsampling):
            raise ValueError("subsampling rates must be integers >= 1")


def mlda(
    hierarchy: MldaHierarchy,
    theta0,
    n_fine: int,
    chains: int = 1,
    seed: int = 0,
    parallelism: int = 1,
) -> list[ChainResult]:
    """Run *chains* independent MLDA chains of *n_fine* fine-level transitions each.

    Chains run on up to *parallelism* threads, so remote log-densities see
    that many concurrent evaluations. A chain hitting a NaN or +inf
    log-density stops; its result carries ``error`` and the samples so far.
    """
    if chains < 1:
        raise ValueError("chains must be >= 1")
    sigma = np.asarray(hierarchy.proposal_sigma, dtype=float)
    theta0 = np.asarray(theta0, dtype=float)
    for level, log_density in enumerate(hierarchy.levels):
        if not math.isfinite(float(log_density(theta0))):
            raise ValueError(f"log-density on level {level} is not finite at theta0")

    def run_chain(c: int) -> ChainResult:
        sampler = _Sampler(hierarchy.levels, hierarchy.subsampling, sigma, chain_rng(seed, c))
        try:
            return sampler.run(theta0, n_fine, chain=c)
        except ChainAborted as exc:
            return sampler.rec.result(c, error=str(exc))

    if parallelism <= 1 or chains == 1:
        return [run_chain(c) for c in range(chains)]
    with ThreadPoolExecutor(max_workers=min(parallelism, chains)) as pool:
        return list(pool.map(run_chain, range(chains)))


def model_log_density(model, config=None) -> LogDensity:
    """Wrap a model whose first output is a log-density as a callable of theta."""
    config = dict(config or {})

    def log_density(theta) -> float:
        return float(model([list(map(float, theta))], config)[0][0])

    return log_density
