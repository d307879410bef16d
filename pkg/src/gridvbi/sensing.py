"""Dynamic-grid sensing models and their first-order linearization statistics.

A sensing model maps per-column grid parameters theta_n (one value per
block) to a basis column Phi(theta_n); stacking columns gives F(theta).
Estimators work with the linearization of F around the latest grid mean:
F(theta) ~ F_hat + sum_j A_j diag(theta_j - mu_hat_j), whose second moment
under a Gaussian grid posterior is F_hat^H F_hat + sum_j (A_j^H A_j) o
Cov(theta_j).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SensingModelSpec",
    "LinearizedModel",
    "assemble",
    "linearized_second_moment",
]


class SensingModelSpec(ABC):
    """Stateless map from grid parameters to basis columns and their derivatives.

    Implementations expose dimensions ``m`` (measurements), ``n`` (columns)
    and ``b`` (grid blocks) and must be read-only after construction so that
    concurrent trials can share one instance.
    """

    m: int
    n: int
    b: int

    @abstractmethod
    def basis(self, theta_n: np.ndarray) -> np.ndarray:
        """Basis column for one grid point; ``theta_n`` has length ``b``."""

    @abstractmethod
    def basis_derivative(self, theta_n: np.ndarray, j: int) -> np.ndarray:
        """Partial derivative of :meth:`basis` with respect to block ``j``."""

    def basis_matrix(self, mu: np.ndarray) -> np.ndarray:
        """All columns at once; ``mu`` is (b, n).  Override for speed."""
        return np.stack([self.basis(mu[:, k]) for k in range(self.n)], axis=1)

    def derivative_matrix(self, mu: np.ndarray, j: int) -> np.ndarray:
        """All block-``j`` derivative columns at once; override for speed."""
        return np.stack([self.basis_derivative(mu[:, k], j) for k in range(self.n)], axis=1)


@dataclass(frozen=True)
class LinearizedModel:
    """F and its block derivative matrices evaluated at the grid mean ``mu_hat``.

    ``second_moment`` is F_hat^H F_hat corrected for the grid posterior
    covariance (Hermitian PSD); it feeds the coefficient and noise updates.
    """

    f_hat: np.ndarray  # (m, n) complex
    a: tuple[np.ndarray, ...]  # b matrices, each (m, n) complex
    second_moment: np.ndarray  # (n, n) complex Hermitian
    mu_hat: np.ndarray  # (b, n) real


def assemble(spec: SensingModelSpec, mu_hat: np.ndarray):
    """Evaluate F and the per-block derivative matrices at ``mu_hat``.

    Returns ``(f_hat, a)`` where column k of ``f_hat`` is the basis at
    ``mu_hat[:, k]`` and column k of ``a[j]`` its block-j derivative.
    """
    mu_hat = np.atleast_2d(np.asarray(mu_hat, dtype=float))
    if mu_hat.shape != (spec.b, spec.n):
        raise ValueError(f"grid means must have shape ({spec.b}, {spec.n}), got {mu_hat.shape}")
    f_hat = np.ascontiguousarray(spec.basis_matrix(mu_hat))
    if f_hat.shape != (spec.m, spec.n):
        raise ValueError("basis_matrix returned wrong shape")
    a = tuple(np.ascontiguousarray(spec.derivative_matrix(mu_hat, j)) for j in range(spec.b))
    return f_hat, a


def linearized_second_moment(f_hat: np.ndarray, a, sigma_theta) -> np.ndarray:
    """Second moment of the linearized sensing matrix under the grid posterior.

    ``sigma_theta`` holds one covariance per block, either as a length-n
    diagonal (the form the estimators carry) or as a full n x n symmetric
    PSD matrix.  Passing ``None`` means a point-mass grid posterior.
    """
    h = f_hat.conj().T @ f_hat
    n = h.shape[0]
    if sigma_theta is not None:
        for j, cov in enumerate(sigma_theta):
            cov = np.asarray(cov, dtype=float)
            gram = a[j].conj().T @ a[j]
            if cov.ndim == 1:
                if np.any(cov < 0.0):
                    raise ValueError("diagonal grid covariance must be nonnegative")
                h = h + np.diag(np.real(np.diag(gram)) * cov)
            elif cov.ndim == 2 and cov.shape == (n, n):
                h = h + gram * cov
            else:
                raise ValueError("grid covariance must be a length-n diagonal or n x n matrix")
    return 0.5 * (h + h.conj().T)
