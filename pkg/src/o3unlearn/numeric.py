"""Shared numerics: seeded generators, Gaussian statistics, Mahalanobis
distance and a central finite-difference gradient oracle.

Everything here works in float64.

Random streams use numpy's PCG64 bit generator (platform independent). All
generators of a run are derived from one run-level seed via
:class:`numpy.random.SeedSequence` with a ``spawn_key`` built from stage tags,
so a given ``(seed, tags)`` pair always yields the same stream no matter what
was drawn before it.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

DEFAULT_REG_SCALE = 1e-6
REG_FLOOR = 1e-10


def _tag_to_int(tag: int | str) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError("seed tags must be non-negative")
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def make_rng(seed: int, *tags: int | str) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` split by ``tags``.

    ``make_rng(7, "unlearn", 2)`` always produces the same stream, independent
    of any other generator derived from seed 7.
    """
    key = tuple(_tag_to_int(t) for t in tags)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray
    reg_epsilon: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def default_reg_epsilon(covariance: np.ndarray) -> float:
    d = covariance.shape[0]
    return max(DEFAULT_REG_SCALE * float(np.trace(covariance)) / d, REG_FLOOR)


def fit_gaussian(samples, reg_epsilon: float | None = None) -> GaussianStats:
    """Empirical mean and biased (1/N) covariance of ``samples``.

    The precision is the inverse of ``covariance + reg_epsilon * I``. When
    ``reg_epsilon`` is None it is set to ``1e-6 * trace / d`` (floored at
    1e-10), which keeps the inverse defined when N <= d.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0 or x.shape[0] == 0:
        raise ValueError("no ID samples")
    if x.ndim != 2:
        raise ValueError(f"samples must form an (N, d) array, got shape {x.shape}")
    n, d = x.shape
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    cov = 0.5 * (cov + cov.T)
    if reg_epsilon is None:
        reg_epsilon = default_reg_epsilon(cov)
    if not reg_epsilon > 0:
        raise ValueError("reg_epsilon must be positive")
    precision = np.linalg.inv(cov + reg_epsilon * np.eye(d))
    precision = 0.5 * (precision + precision.T)
    return GaussianStats(mean, cov, precision, float(reg_epsilon))


def mahalanobis(x, stats: GaussianStats) -> float:
    """Squared Mahalanobis distance ``(x - mu)^T P (x - mu)`` (no square root)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != stats.mean.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {stats.mean.shape}")
    diff = x - stats.mean
    return max(float(diff @ stats.precision @ diff), 0.0)


def mahalanobis_batch(x: np.ndarray, stats: GaussianStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != stats.dim:
        raise ValueError(f"dimension mismatch: {x.shape} vs ({stats.dim},)")
    diff = x - stats.mean
    return np.maximum(np.einsum("ni,ij,nj->n", diff, stats.precision, diff), 0.0)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)`` used by gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
