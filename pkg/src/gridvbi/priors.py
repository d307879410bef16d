"""Hierarchical sparse prior: support -> precision -> signal, plus noise and grid priors.

The signal prior is conditionally Gaussian with per-coefficient precision
rho_n, the precisions follow a Bernoulli-Gamma mixture switched by the
binary support s_n, and the noise precision gamma is Gamma-distributed.
Grid parameters get an independent Gaussian prior centered on the initial
sampling grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GammaParams",
    "ThreeLayerPrior",
    "GridPrior",
    "digamma",
    "gamma_moments",
    "default_prior",
    "default_grid_precision",
]

_EULER_SHIFT = 6.0
# Asymptotic series coefficients for psi(x) ~ ln x - 1/(2x) - sum B_{2k}/(2k x^{2k}).
_PSI_COEFFS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)


def digamma(x):
    """Logarithmic derivative of the gamma function, elementwise.

    Upward recurrence psi(x) = psi(x+1) - 1/x shifts the argument above 6,
    then the asymptotic expansion in 1/x^2 is applied.  Absolute accuracy is
    better than 1e-12 over positive arguments.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise ValueError("digamma requires positive arguments")
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    acc = np.zeros_like(x)
    while True:
        small = x < _EULER_SHIFT
        if not small.any():
            break
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    power = inv2.copy()
    for c in _PSI_COEFFS:
        series -= c * power
        power *= inv2
    out = acc + np.log(x) - 0.5 / x + series
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class GammaParams:
    """Shape/rate parameters of one or many Gamma distributions.

    ``shape`` and ``rate`` may be positive scalars or arrays of matching
    shape; all moment helpers broadcast.
    """

    shape: np.ndarray | float
    rate: np.ndarray | float

    def __post_init__(self):
        if np.any(np.asarray(self.shape) <= 0.0) or np.any(np.asarray(self.rate) <= 0.0):
            raise ValueError("Gamma parameters must be strictly positive")

    def mean(self):
        return np.asarray(self.shape, dtype=float) / np.asarray(self.rate, dtype=float)

    def log_mean(self):
        """Expectation of ln rho: psi(shape) - ln(rate)."""
        return digamma(np.asarray(self.shape, dtype=float)) - np.log(np.asarray(self.rate, dtype=float))


def gamma_moments(g: GammaParams):
    """Return (mean, log-mean) of a Gamma distribution with the given parameters."""
    return g.mean(), g.log_mean()


@dataclass(frozen=True)
class ThreeLayerPrior:
    """Per-index Bernoulli-Gamma-Gaussian hierarchy plus the noise precision prior.

    ``active``/``inactive`` hold the Gamma parameters of the coefficient
    precision conditioned on the support bit being 1/0.  The inactive branch
    must concentrate on much larger precisions than the active one (mean
    ratio above 1e3) so that zero coefficients are pinned hard to zero.
    """

    active: GammaParams
    inactive: GammaParams
    support_prob: np.ndarray
    noise: GammaParams

    def __post_init__(self):
        lam = np.asarray(self.support_prob, dtype=float)
        if np.any(lam < 0.0) or np.any(lam > 1.0):
            raise ValueError("support probabilities must lie in [0, 1]")
        object.__setattr__(self, "support_prob", lam)
        ratio = self.inactive.mean() / self.active.mean()
        if np.any(ratio <= 1e3):
            raise ValueError("inactive precision mean must exceed active mean by > 1e3")

    @property
    def n(self) -> int:
        return self.support_prob.shape[0]


def default_prior(n: int, support_prob: float = 0.1) -> ThreeLayerPrior:
    """Standard hyperparameters: active Gamma(1, 1), inactive Gamma(1, 1e-5), noise Gamma(1e-6, 1e-6)."""
    if n < 1:
        raise ValueError("need at least one coefficient")
    ones = np.ones(n)
    return ThreeLayerPrior(
        active=GammaParams(shape=ones, rate=ones),
        inactive=GammaParams(shape=ones, rate=np.full(n, 1e-5)),
        support_prob=np.full(n, float(support_prob)),
        noise=GammaParams(shape=1e-6, rate=1e-6),
    )


@dataclass(frozen=True)
class GridPrior:
    """Independent Gaussian prior per grid block: mean vectors and scalar precisions.

    ``mean`` has shape (B, N) and row j is the nominal grid of block j;
    ``precision`` has shape (B,) with entries kappa_j > 0.
    """

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        mean = np.atleast_2d(np.asarray(self.mean, dtype=float))
        prec = np.atleast_1d(np.asarray(self.precision, dtype=float))
        if mean.shape[0] != prec.shape[0]:
            raise ValueError("one precision per grid block required")
        if np.any(prec <= 0.0):
            raise ValueError("grid precisions must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", prec)

    @property
    def blocks(self) -> int:
        return self.mean.shape[0]


def default_grid_precision(grid: np.ndarray) -> np.ndarray:
    """Per-block kappa = 1/(4 * spacing^2) from the median spacing of each block's grid.

    A prior standard deviation of two grid intervals keeps refined points
    from wandering across their neighbours.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    kappa = np.empty(grid.shape[0])
    for j, row in enumerate(grid):
        diffs = np.diff(np.sort(row))
        diffs = diffs[diffs > 0]
        if diffs.size == 0:
            raise ValueError("grid block has no distinct points")
        spacing = float(np.median(diffs))
        kappa[j] = 1.0 / (4.0 * spacing * spacing)
    return kappa
