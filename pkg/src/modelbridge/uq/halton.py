"""Halton low-discrepancy points."""

from __future__ import annotations

import numpy as np


def primes(count: int) -> list[int]:
    found: list[int] = []
    candidate = 2
    while len(found) < count:
        if all(candidate % p for p in found if p * p <= candidate):
            found.append(candidate)
        candidate += 1
    return found


def radical_inverse(indices: np.ndarray, base: int) -> np.ndarray:
    """Mirror the base-``base`` digits of each index about the radix point."""
    idx = np.asarray(indices, dtype=np.int64).copy()
    result = np.zeros(idx.shape)
    scale = 1.0 / base
    while np.any(idx > 0):
        result += (idx % base) * scale
        idx //= base
        scale /= base
    return result


def halton(n: int, dim: int, skip: int = 1) -> np.ndarray:
    """First *n* Halton points in ``[0, 1)**dim`` after dropping *skip* (the origin by default).

    Coordinate i uses the i-th prime as its base.
    """
    indices = np.arange(skip, skip + n)
    return np.column_stack([radical_inverse(indices, b) for b in primes(dim)])
