"""Gaussian-process meta-learning task generation.

Each sequence draws kernel hyperparameters, 100 index points uniform on
[-2, 2], a joint GP sample for y, and a random context size in [3, 97].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GenerationError
from .tasks import STREAM_SEQUENCE, TaskBatch, rng_stream

KERNEL_KINDS = ("rbf", "matern52", "periodic")

# Hyperparameter distributions, per kernel: (amplitude, lengthscale, period)
# sampled uniformly from the ranges below; None means fixed at 1.
HYPER_RANGES = {
    "rbf": {"s": (0.1, 1.0), "l": (0.1, 0.6)},
    "matern52": {"l": (0.3, 1.0)},
    "periodic": {"l": (0.1, 0.6), "p": (0.5, 1.0)},
}


@dataclass(frozen=True)
class KernelSpec:
    """Stationary kernel: kind plus amplitude s, lengthscale l, period p."""

    kind: str
    s: float = 1.0
    l: float = 1.0
    p: float = 1.0
    # The printed periodic form squares the distance inside sin; set False
    # for the conventional |x - x'| argument.
    squared_distance_period: bool = True

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if self.s <= 0 or self.l <= 0 or self.p <= 0:
            raise ConfigError(
                f"kernel hyperparameters must be positive, got "
                f"s={self.s}, l={self.l}, p={self.p}"
            )


def kernel_eval(spec, x, x2):
    """Covariance between two scalar index points."""
    d = abs(x - x2)
    if spec.kind == "rbf":
        return spec.s**2 * math.exp(-(d**2) / (2.0 * spec.l**2))
    if spec.kind == "matern52":
        a = math.sqrt(5.0) * d / spec.l
        return (1.0 + a + 5.0 * d**2 / (3.0 * spec.l**2)) * math.exp(-a)
    arg = d**2 if spec.squared_distance_period else d
    return math.exp(-2.0 * math.sin(math.pi * arg / spec.p) ** 2 / spec.l**2)


def kernel_matrix(spec, x):
    """Covariance matrix for a vector of index points."""
    x = np.asarray(x, dtype=np.float64)
    d = np.abs(x[:, None] - x[None, :])
    if spec.kind == "rbf":
        return spec.s**2 * np.exp(-(d**2) / (2.0 * spec.l**2))
    if spec.kind == "matern52":
        a = math.sqrt(5.0) * d / spec.l
        return (1.0 + a + 5.0 * d**2 / (3.0 * spec.l**2)) * np.exp(-a)
    arg = d**2 if spec.squared_distance_period else d
    return np.exp(-2.0 * np.sin(np.pi * arg / spec.p) ** 2 / spec.l**2)


def sample_gp_y(spec, x, rng, jitter=1e-6, max_jitter=1e-2):
    """Joint zero-mean GP draw at the given points.

    Starts from `jitter` on the diagonal and escalates tenfold on Cholesky
    failure up to `max_jitter`.
    """
    cov = kernel_matrix(spec, x)
    eye = np.eye(len(x))
    j = jitter
    while True:
        try:
            chol = np.linalg.cholesky(cov + j * eye)
            break
        except np.linalg.LinAlgError:
            j *= 10.0
            if j > max_jitter:
                raise GenerationError(
                    f"covariance for kernel {spec.kind} not factorizable "
                    f"even with jitter {max_jitter}"
                ) from None
    return chol @ rng.standard_normal(len(x))


def sample_kernel_spec(kind, rng, squared_distance_period=True):
    ranges = HYPER_RANGES[kind]
    draws = {name: rng.uniform(lo, hi) for name, (lo, hi) in ranges.items()}
    return KernelSpec(
        kind=kind,
        squared_distance_period=squared_distance_period,
        **draws,
    )


def sample_gp_tasks(
    kind,
    count,
    rng_or_seed,
    n_points=100,
    x_low=-2.0,
    x_high=2.0,
    nc_low=3,
    nc_high=97,
    jitter=1e-6,
    squared_distance_period=True,
):
    """Generate `count` GP sequences as single-sequence task batches.

    Each sequence derives its own generator from (master seed, index) when a
    seed is given, so generation order is independent of any parallel split.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if kind not in KERNEL_KINDS:
        raise ConfigError(f"unknown kernel kind {kind!r}")
    seeded = not isinstance(rng_or_seed, np.random.Generator)
    tasks = []
    for i in range(count):
        rng = (
            rng_stream(rng_or_seed, STREAM_SEQUENCE, i) if seeded else rng_or_seed
        )
        spec = sample_kernel_spec(kind, rng, squared_distance_period)
        x = rng.uniform(x_low, x_high, size=n_points)
        y = sample_gp_y(spec, x, rng, jitter=jitter)
        nc = int(rng.integers(nc_low, nc_high + 1))
        tasks.append(
            TaskBatch(
                x.reshape(1, n_points, 1),
                y.reshape(1, n_points, 1),
                nc,
                n_points - nc,
            )
        )
    return tasks
