"""Benchmark models: small analytic stand-ins with the structure real applications have."""

from __future__ import annotations

import math
import threading
import time

import numpy as np

from .protocol import Operation
from .server import Model

ALL_OPERATIONS = frozenset(Operation)


def _finite(values, what="input"):
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite {what}")
    return arr


class DoublingModel(Model):
    """F([x]) = [2x]."""

    def __init__(self, name: str = "forward"):
        super().__init__(name)

    def get_input_sizes(self, config):
        return [1]

    def get_output_sizes(self, config):
        return [1]

    def __call__(self, parameters, config):
        return [[parameters[0][0] * 2]]


class DelayModel(Model):
    """Identity map that sleeps first; stands in for a long-running solver.

    The config key ``delay_ms`` overrides the construction-time delay.
    """

    def __init__(self, name: str = "forward", delay_ms: float = 250.0, dim: int = 1):
        super().__init__(name)
        self.delay_ms = delay_ms
        self.dim = dim

    def get_input_sizes(self, config):
        return [self.dim]

    def get_output_sizes(self, config):
        return [self.dim]

    def __call__(self, parameters, config):
        delay = float(config.get("delay_ms", self.delay_ms))
        if delay > 0:
            # sleep can wake marginally early on some platforms
            deadline = time.perf_counter() + delay / 1000.0
            while (remaining := deadline - time.perf_counter()) > 0:
                time.sleep(remaining)
        return [list(parameters[0])]


class OverlapCountingModel(DelayModel):
    """DelayModel that records how many evaluations ran at the same time."""

    def __init__(self, name: str = "forward", delay_ms: float = 0.0, dim: int = 1):
        super().__init__(name, delay_ms, dim)
        self._lock = threading.Lock()
        self.active = 0
        self.max_active = 0
        self.calls = 0

    def __call__(self, parameters, config):
        with self._lock:
            self.active += 1
            self.calls += 1
            self.max_active = max(self.max_active, self.active)
        try:
            return super().__call__(parameters, config)
        finally:
            with self._lock:
                self.active -= 1


class LinearModel(Model):
    """F(theta) = A theta, with exact derivative actions (the Hessian is zero)."""

    supports = ALL_OPERATIONS

    def __init__(self, matrix, name: str = "forward"):
        super().__init__(name)
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))

    def get_input_sizes(self, config):
        return [self.matrix.shape[1]]

    def get_output_sizes(self, config):
        return [self.matrix.shape[0]]

    def __call__(self, parameters, config):
        return [(self.matrix @ _finite(parameters[0])).tolist()]

    def gradient(self, out_wrt, in_wrt, parameters, sens, config):
        _finite(parameters[0])
        return (self.matrix.T @ _finite(sens, "sensitivity")).tolist()

    def apply_jacobian(self, out_wrt, in_wrt, parameters, vec, config):
        _finite(parameters[0])
        return (self.matrix @ _finite(vec, "vector")).tolist()

    def apply_hessian(self, out_wrt, in_wrt1, in_wrt2, parameters, sens, vec, config):
        _finite(parameters[0])
        return [0.0] * self.matrix.shape[1]


def bias_perturbation(theta) -> float:
    return math.sin(theta[0]) + math.cos(theta[1])


class MultiFidelityGaussianPosterior(Model):
    """Log-density hierarchy over a 2-D Gaussian.

    Level l returns ``log N(theta; mean, cov) + b0 * 2**-l * (sin(theta_1) + cos(theta_2))``,
    so the bias halves with each level. The level is picked with the config
    key ``level`` (default: finest).
    """

    def __init__(self, mean=(0.0, 0.0), cov=((1.0, 0.0), (0.0, 1.0)), b0: float = 0.5, levels: int = 3,
                 name: str = "posterior"):
        super().__init__(name)
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        if self.mean.shape != (2,) or self.cov.shape != (2, 2):
            raise ValueError("mean must have 2 entries and cov must be 2x2")
        self.b0 = float(b0)
        self.levels = int(levels)
        self._chol = np.linalg.cholesky(self.cov)
        self._log_norm = -math.log(2 * math.pi) - float(np.sum(np.log(np.diag(self._chol))))

    def get_input_sizes(self, config):
        return [2]

    def get_output_sizes(self, config):
        return [1]

    def bias(self, level: int) -> float:
        return self.b0 * 2.0 ** (-level)

    def _level(self, config) -> int:
        level = config.get("level", self.levels - 1)
        if isinstance(level, bool) or not isinstance(level, int) or not 0 <= level < self.levels:
            raise ValueError(f"level must be an integer in [0, {self.levels - 1}], got {level!r}")
        return level

    def log_gaussian(self, theta) -> float:
        z = np.linalg.solve(self._chol, np.asarray(theta, dtype=float) - self.mean)
        return self._log_norm - 0.5 * float(z @ z)

    def log_density(self, theta, level: int) -> float:
        return self.log_gaussian(theta) + self.bias(level) * bias_perturbation(theta)

    def __call__(self, parameters, config):
        theta = _finite(parameters[0])
        return [[self.log_density(theta, self._level(config))]]


class SmoothForwardModel(Model):
    """Smooth positive response R(F, D) = exp(0.3 F) * (1 + 0.1 (D - D_mid)**2)."""

    def __init__(self, d_mid: float = -6.16, name: str = "forward"):
        super().__init__(name)
        self.d_mid = d_mid

    def get_input_sizes(self, config):
        return [2]

    def get_output_sizes(self, config):
        return [1]

    def response(self, froude, draft):
        return np.exp(0.3 * froude) * (1.0 + 0.1 * (draft - self.d_mid) ** 2)

    def __call__(self, parameters, config):
        froude, draft = _finite(parameters[0])
        return [[float(self.response(froude, draft))]]


class ConstantModel(Model):
    """F(theta) = c regardless of theta."""

    def __init__(self, value: float, dim: int = 1, name: str = "forward"):
        super().__init__(name)
        self.value = float(value)
        self.dim = dim

    def get_input_sizes(self, config):
        return [self.dim]

    def get_output_sizes(self, config):
        return [1]

    def __call__(self, parameters, config):
        return [[self.value]]


ZOO = {
    "doubling": DoublingModel,
    "delay": DelayModel,
    "linear": LinearModel,
    "posterior": MultiFidelityGaussianPosterior,
    "smooth": SmoothForwardModel,
}
