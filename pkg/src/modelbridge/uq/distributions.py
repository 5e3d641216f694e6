"""One-dimensional input distributions and their independent products."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

MAX_REJECTION_ROUNDS = 1_000_000


class SamplingError(RuntimeError):
    pass


class Distribution:
    """Interface: ``sample``, ``log_pdf`` and (where available) ``ppf``."""

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def log_pdf(self, x) -> np.ndarray:
        raise NotImplementedError

    def ppf(self, u) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no inverse CDF")

    @property
    def has_ppf(self) -> bool:
        return type(self).ppf is not Distribution.ppf

    def mean(self) -> float:
        raise NotImplementedError

    def _outside(self, x: np.ndarray) -> np.ndarray:
        return (x <= self.lower) | (x >= self.upper)


@dataclass(frozen=True)
class Uniform(Distribution):
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("Uniform needs lower < upper")

    def sample(self, rng, n):
        return self.ppf(rng.random(n))

    def ppf(self, u):
        return self.lower + (self.upper - self.lower) * np.asarray(u, dtype=float)

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(self._outside(x), -np.inf, -math.log(self.upper - self.lower))

    def mean(self):
        return 0.5 * (self.lower + self.upper)


@dataclass(frozen=True)
class Normal(Distribution):
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("Normal needs sigma > 0")

    def sample(self, rng, n):
        return self.mu + self.sigma * rng.standard_normal(n)

    def ppf(self, u):
        return self.mu + self.sigma * special.ndtri(np.asarray(u, dtype=float))

    def log_pdf(self, x):
        z = (np.asarray(x, dtype=float) - self.mu) / self.sigma
        return -0.5 * z * z - math.log(self.sigma) - 0.5 * math.log(2 * math.pi)

    def mean(self):
        return self.mu


@dataclass(frozen=True)
class Triangular(Distribution):
    """Symmetric triangular distribution on [lower, upper], mode at the midpoint."""

    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("Triangular needs lower < upper")

    @property
    def mode(self) -> float:
        return 0.5 * (self.lower + self.upper)

    def sample(self, rng, n):
        return self.ppf(rng.random(n))

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        width = self.upper - self.lower
        left = self.lower + width * np.sqrt(0.5 * u)
        right = self.upper - width * np.sqrt(0.5 * (1.0 - u))
        return np.where(u < 0.5, left, right)

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        half = 0.5 * (self.upper - self.lower)
        dens = (half - np.abs(x - self.mode)) / half**2
        with np.errstate(divide="ignore"):
            return np.where(self._outside(x), -np.inf, np.log(np.maximum(dens, 0.0)))

    def mean(self):
        return self.mode


@dataclass(frozen=True)
class Beta(Distribution):
    """Beta law on [lower, upper] with density proportional to (x - lower)**alpha * (upper - x)**beta.

    Note the exponents: ``alpha = beta = 0`` is the uniform law, so this is
    the standard Beta(alpha + 1, beta + 1) stretched onto the interval.
    Sampled by rejection under a flat envelope at the density's peak.
    """

    lower: float
    upper: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("Beta needs lower < upper")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("Beta exponents must be >= 0 (the density is unbounded otherwise)")

    @property
    def _log_norm(self) -> float:
        a, b = self.alpha, self.beta
        return (
            special.gammaln(a + b + 2)
            - special.gammaln(a + 1)
            - special.gammaln(b + 1)
            - (a + b + 1) * math.log(self.upper - self.lower)
        )

    def _log_kernel(self, x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return special.xlogy(self.alpha, x - self.lower) + special.xlogy(self.beta, self.upper - x)

    @property
    def mode(self) -> float:
        total = self.alpha + self.beta
        if total == 0:
            return self.lower
        return self.lower + (self.upper - self.lower) * self.alpha / total

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(self._outside(x), -np.inf, self._log_kernel(x) + self._log_norm)

    def sample(self, rng, n):
        out = np.empty(n)
        pending = np.arange(n)
        log_peak = float(self._log_kernel(np.float64(self.mode)))
        rounds = 0
        while pending.size:
            rounds += 1
            if rounds > MAX_REJECTION_ROUNDS:
                raise SamplingError(
                    f"rejection sampler exceeded {MAX_REJECTION_ROUNDS} attempts per draw; envelope is degenerate"
                )
            x = self.lower + (self.upper - self.lower) * rng.random(pending.size)
            u = rng.random(pending.size)
            accept = np.log(u) <= self._log_kernel(x) - log_peak
            out[pending[accept]] = x[accept]
            pending = pending[~accept]
        return out

    def mean(self):
        return self.lower + (self.upper - self.lower) * (self.alpha + 1) / (self.alpha + self.beta + 2)


class Product:
    """Independent components, one distribution per coordinate."""

    def __init__(self, components):
        self.components = list(components)
        if not self.components:
            raise ValueError("need at least one component")

    @property
    def dim(self) -> int:
        return len(self.components)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.column_stack([c.sample(rng, n) for c in self.components])

    def log_pdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return sum(c.log_pdf(x[:, i]) for i, c in enumerate(self.components))

    def ppf(self, u) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        return np.column_stack([c.ppf(u[:, i]) for i, c in enumerate(self.components)])

    def check_ppf(self) -> None:
        missing = [type(c).__name__ for c in self.components if not c.has_ppf]
        if missing:
            raise ValueError(f"no inverse CDF for component(s): {', '.join(missing)}")

    def mean(self) -> np.ndarray:
        return np.array([c.mean() for c in self.components])


def as_product(dist) -> Product:
    if isinstance(dist, Product):
        return dist
    if isinstance(dist, Distribution):
        return Product([dist])
    return Product(dist)


def sample(dist, n: int, seed=None) -> np.ndarray:
    """Draw *n* i.i.d. points (shape ``(n, dim)``); deterministic for a given seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return as_product(dist).sample(rng, n)


_KINDS = {"uniform": (Uniform, 2), "normal": (Normal, 2), "triangular": (Triangular, 2), "beta": (Beta, 4)}


def parse_distribution(text: str) -> Distribution:
    """Parse ``kind:p1,p2[,...]``, e.g. ``triangular:0.25,0.41`` or ``beta:-6.776,-5.544,10,10``."""
    kind, _, params = text.partition(":")
    kind = kind.strip().lower()
    if kind not in _KINDS:
        raise ValueError(f"unknown distribution {kind!r}; expected one of {sorted(_KINDS)}")
    cls, arity = _KINDS[kind]
    values = [float(p) for p in params.split(",") if p.strip()]
    if len(values) != arity:
        raise ValueError(f"{kind} takes {arity} parameters, got {len(values)}")
    return cls(*values)
