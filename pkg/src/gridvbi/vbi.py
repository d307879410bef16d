"""Coordinate-ascent variational estimator with successive relinearization.

Five factor updates run in closed form under the linearized observation
model: the coefficient posterior q(x), the precision posterior q(rho), the
support posterior q(s), the noise-precision posterior q(gamma), and the
grid posterior q(theta), one Gaussian block per parameter type.  Stage 1
pins the grid to its nominal value to burn in the sparse-signal factors;
stage 2 re-expands the model around the latest grid mean every iteration,
so the linearization error shrinks as the grid estimate improves.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import gammaln

from gridvbi.priors import GammaParams, GridPrior, ThreeLayerPrior
from gridvbi.sensing import LinearizedModel, SensingModelSpec, assemble, linearized_second_moment

__all__ = [
    "EstimatorError",
    "VariationalState",
    "SlaConfig",
    "IterationRecord",
    "update_x",
    "update_rho",
    "update_s",
    "update_gamma",
    "update_theta",
    "relinearize",
    "run_sla_vbi",
    "sigma_diagonal",
    "support_log_evidence",
    "combine_support_evidence",
]


class EstimatorError(RuntimeError):
    """Numerical failure inside an estimator run (non-finite state, failed factorization)."""


@dataclass
class VariationalState:
    """All factorized posteriors and the iteration bookkeeping of one run.

    ``sigma_x`` is the full (n, n) coefficient covariance for the
    exact-inverse path or its length-n diagonal for the inverse-free path;
    ``theta_cov`` always stores per-block diagonals (b, n).
    """

    mu_x: np.ndarray
    sigma_x: np.ndarray
    rho_post: GammaParams
    support_post: np.ndarray
    gamma_post: GammaParams
    theta_mean: np.ndarray
    theta_cov: np.ndarray
    iterations_used: int = 0
    converged: bool = False
    trace: list = field(default_factory=list)


@dataclass(frozen=True)
class SlaConfig:
    """Iteration budget and grid prior of one estimator run.

    ``stage1_iters`` burn-in iterations run with the grid pinned;
    ``stage2_iters`` caps the refinement iterations, which stop early once
    the relative change of the coefficient mean drops below
    ``convergence_tol``.
    """

    grid_prior: GridPrior
    stage1_iters: int = 10
    stage2_iters: int = 40
    convergence_tol: float = 1e-4

    def __post_init__(self):
        if self.stage1_iters < 1 or self.stage2_iters < 1:
            raise ValueError("iteration counts must be at least 1")
        if self.convergence_tol <= 0.0:
            raise ValueError("convergence tolerance must be positive")


@dataclass
class IterationRecord:
    """Per-iteration diagnostics: convergence driver, noise-rate posterior, optional metric."""

    stage: str
    index: int
    rel_change: float
    noise_rate: float
    metric: float
    elapsed_s: float


def sigma_diagonal(sigma_x: np.ndarray) -> np.ndarray:
    """Real diagonal of a coefficient covariance stored either full or diagonal."""
    sigma_x = np.asarray(sigma_x)
    return np.real(np.diag(sigma_x)) if sigma_x.ndim == 2 else np.real(sigma_x)


def _trace_product(h: np.ndarray, sigma_x: np.ndarray) -> float:
    # Tr(H Sigma); diagonal Sigma keeps only the diagonal of H.
    if np.asarray(sigma_x).ndim == 2:
        return float(np.real(np.sum(h * sigma_x.T)))
    return float(np.real(np.diag(h)) @ np.real(sigma_x))


def update_x(lin: LinearizedModel, rho_mean: np.ndarray, gamma_mean: float, y: np.ndarray):
    """Gaussian coefficient posterior given the current precisions and linearization.

    Covariance is the inverse of gamma * H + diag(rho); the mean solves the
    same system against gamma * F_hat^H y.
    """
    if np.any(rho_mean <= 0.0) or gamma_mean <= 0.0:
        raise ValueError("precisions must be strictly positive")
    w = gamma_mean * lin.second_moment + np.diag(rho_mean.astype(complex))
    try:
        factor = scipy.linalg.cho_factor(w, lower=False, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise EstimatorError("coefficient precision matrix is not positive definite") from exc
    mu = scipy.linalg.cho_solve(factor, gamma_mean * (lin.f_hat.conj().T @ y), check_finite=False)
    sigma = scipy.linalg.cho_solve(factor, np.eye(w.shape[0], dtype=complex), check_finite=False)
    sigma = 0.5 * (sigma + sigma.conj().T)
    return mu, sigma


def update_rho(support_post: np.ndarray, prior: ThreeLayerPrior, x2_mean: np.ndarray) -> GammaParams:
    """Gamma precision posterior: support-weighted blend of both prior branches plus the signal energy."""
    lam = np.asarray(support_post, dtype=float)
    if np.any(lam < 0.0) or np.any(lam > 1.0):
        raise ValueError("support posteriors must lie in [0, 1]")
    if np.any(np.asarray(x2_mean) < 0.0):
        raise ValueError("second moments must be nonnegative")
    shape = lam * prior.active.shape + (1.0 - lam) * prior.inactive.shape + 1.0
    rate = lam * prior.active.rate + (1.0 - lam) * prior.inactive.rate + x2_mean
    return GammaParams(shape=shape, rate=rate)


def support_log_evidence(rho_post: GammaParams, branch: GammaParams):
    """Log-likelihood of the precision posterior moments under one Gamma branch.

    ln C = a ln b - ln Gamma(a) + (a - 1) <ln rho> - b <rho>, evaluated in
    the log domain so the tiny inactive rate cannot overflow.
    """
    rho_mean, rho_log_mean = rho_post.mean(), rho_post.log_mean()
    a = np.asarray(branch.shape, dtype=float)
    b = np.asarray(branch.rate, dtype=float)
    return a * np.log(b) - gammaln(a) + (a - 1.0) * rho_log_mean - b * rho_mean


def combine_support_evidence(prior_prob: np.ndarray, log_active: np.ndarray, log_inactive: np.ndarray) -> np.ndarray:
    """Posterior support probability from prior odds and branch log-evidence.

    Degenerate priors (0 or 1) pass through unchanged so no 0 * inf terms
    arise; everything else goes through a logistic in the log-odds domain.
    """
    lam = np.asarray(prior_prob, dtype=float)
    out = np.empty_like(lam)
    interior = (lam > 0.0) & (lam < 1.0)
    out[~interior] = lam[~interior]
    if interior.any():
        delta = np.log(lam[interior]) - np.log1p(-lam[interior]) + log_active[interior] - log_inactive[interior]
        out[interior] = 0.5 * (1.0 + np.tanh(0.5 * delta))
    return out


def update_s(prior_prob: np.ndarray, rho_post: GammaParams, prior: ThreeLayerPrior) -> np.ndarray:
    """Bernoulli support posterior under the current precision posterior."""
    log_active = support_log_evidence(rho_post, prior.active)
    log_inactive = support_log_evidence(rho_post, prior.inactive)
    return combine_support_evidence(prior_prob, log_active, log_inactive)


def update_gamma(prior: GammaParams, lin: LinearizedModel, mu_x, sigma_x, y) -> GammaParams:
    """Gamma noise-precision posterior from the expected residual power.

    Rate increment is <|y - F x|^2> under the coefficient and grid
    posteriors, expanded through the linearized second moment.
    """
    m = lin.f_hat.shape[0]
    fy = lin.f_hat.conj().T @ y
    resid = (
        float(np.real(y.conj() @ y))
        - 2.0 * float(np.real(mu_x.conj() @ fy))
        + float(np.real(mu_x.conj() @ (lin.second_moment @ mu_x)))
        + _trace_product(lin.second_moment, sigma_x)
    )
    rate = float(np.asarray(prior.rate)) + resid
    if rate <= 0.0:
        raise EstimatorError("noise-precision rate went non-positive; inconsistent inputs")
    return GammaParams(shape=float(np.asarray(prior.shape)) + m, rate=rate)


def theta_curvature_gradient(lin: LinearizedModel, mu_x, sigma_x, y, j: int):
    """Quadratic statistics of the expected residual power in grid block j.

    Returns (H, g): H is the Hessian of <|y - F_lin x|^2> with respect to
    block j around the linearization point, g its negative gradient there.
    """
    a_j = lin.a[j]
    gram = a_j.conj().T @ a_j
    full_sigma = np.asarray(sigma_x).ndim == 2
    if full_sigma:
        m2 = np.outer(mu_x, mu_x.conj()) + sigma_x
        h = 2.0 * np.real(m2.T * gram)
        smear = lin.f_hat @ sigma_x
    else:
        h = 2.0 * (np.real(np.outer(mu_x, mu_x.conj()).T * gram) + np.diag(np.real(np.diag(gram)) * np.real(sigma_x)))
        smear = lin.f_hat * np.real(sigma_x)[None, :]
    resid = y - lin.f_hat @ mu_x
    g = 2.0 * np.real(mu_x.conj() * (a_j.conj().T @ resid)) - 2.0 * np.real(np.sum(a_j.conj() * smear, axis=0))
    return 0.5 * (h + h.T), g


def update_theta(lin: LinearizedModel, mu_x, sigma_x, gamma_mean: float, grid_prior: GridPrior, mu_hat, y):
    """Gaussian grid posterior per block: data curvature fused with the grid prior.

    Covariances are reduced to their diagonals on output, which is all the
    downstream second-moment correction consumes.
    """
    b = grid_prior.blocks
    mu_out = np.empty_like(mu_hat)
    cov_out = np.empty_like(mu_hat)
    for j in range(b):
        h, g = theta_curvature_gradient(lin, mu_x, sigma_x, y, j)
        kappa = grid_prior.precision[j]
        w = gamma_mean * h + kappa * np.eye(h.shape[0])
        rhs = gamma_mean * (g + h @ mu_hat[j]) + kappa * grid_prior.mean[j]
        try:
            factor = scipy.linalg.cho_factor(w, lower=False, check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise EstimatorError("grid precision matrix is not positive definite") from exc
        mu_out[j] = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
        inv = scipy.linalg.cho_solve(factor, np.eye(w.shape[0]), check_finite=False)
        cov_out[j] = np.diag(inv)
    return mu_out, cov_out


def relinearize(spec: SensingModelSpec, theta_mean: np.ndarray, theta_cov=None) -> LinearizedModel:
    """Re-expand the sensing model around ``theta_mean`` with the given grid covariance."""
    if not np.all(np.isfinite(theta_mean)):
        raise EstimatorError("grid mean is not finite")
    f_hat, a = assemble(spec, theta_mean)
    h = linearized_second_moment(f_hat, a, theta_cov)
    return LinearizedModel(f_hat=f_hat, a=a, second_moment=h, mu_hat=np.array(theta_mean, dtype=float))


def initial_moments(prior: ThreeLayerPrior):
    """Starting moments for the factor sweep: prior-marginal precisions, prior support, prior noise.

    The precision starts at the support-weighted mixture mean, so before
    any evidence arrives every coefficient sits at its prior scale and the
    first coefficient update reduces to a matched filter.
    """
    lam = prior.support_prob
    mix = lam * prior.active.mean() + (1.0 - lam) * prior.inactive.mean()
    rho = GammaParams(shape=np.ones_like(mix), rate=1.0 / mix)
    return rho, prior.support_prob.copy(), GammaParams(
        shape=float(np.asarray(prior.noise.shape)), rate=float(np.asarray(prior.noise.rate))
    )


def _check_finite(state: VariationalState, iteration: int):
    if not (
        np.all(np.isfinite(state.mu_x))
        and np.all(np.isfinite(np.asarray(state.sigma_x)))
        and np.all(np.isfinite(state.theta_mean))
    ):
        raise EstimatorError(f"non-finite state at iteration {iteration}")


def run_sla_vbi(
    y: np.ndarray,
    spec: SensingModelSpec,
    prior: ThreeLayerPrior,
    config: SlaConfig,
    fixed_grid: bool = False,
    metric_fn=None,
) -> VariationalState:
    """Full estimator run with exact covariance updates.

    Stage 1 iterates the sparse-signal factors with the grid pinned at the
    prior mean; stage 2 alternates all five factor updates, re-linearizing
    at the latest grid mean first.  With ``fixed_grid`` the grid is never
    refined and the whole budget runs stage-1 style (the on-grid baseline).
    ``metric_fn`` is called on the state after each iteration to record an
    external metric in the trace.
    """
    y = np.asarray(y, dtype=complex)
    grid_prior = config.grid_prior
    if grid_prior.mean.shape != (spec.b, spec.n):
        raise ValueError("grid prior does not match sensing model dimensions")
    if prior.n != spec.n:
        raise ValueError("sparse prior does not match sensing model dimensions")

    rho_post, support_post, gamma_post = initial_moments(prior)
    theta_mean = grid_prior.mean.copy()
    theta_cov = np.zeros_like(theta_mean)
    lin = relinearize(spec, theta_mean, None)

    state = VariationalState(
        mu_x=np.zeros(spec.n, dtype=complex),
        sigma_x=np.zeros((spec.n, spec.n), dtype=complex),
        rho_post=rho_post,
        support_post=support_post,
        gamma_post=gamma_post,
        theta_mean=theta_mean,
        theta_cov=theta_cov,
    )

    stage1 = config.stage1_iters + config.stage2_iters if fixed_grid else config.stage1_iters
    total = config.stage1_iters + config.stage2_iters
    for i in range(total):
        tic = time.perf_counter()
        stage = "init" if i < stage1 else "refine"
        if stage == "refine":
            lin = relinearize(spec, state.theta_mean, state.theta_cov)
        mu_prev = state.mu_x
        state.mu_x, state.sigma_x = update_x(lin, state.rho_post.mean(), float(state.gamma_post.mean()), y)
        x2 = np.abs(state.mu_x) ** 2 + sigma_diagonal(state.sigma_x)
        state.rho_post = update_rho(state.support_post, prior, x2)
        state.support_post = update_s(prior.support_prob, state.rho_post, prior)
        state.gamma_post = update_gamma(prior.noise, lin, state.mu_x, state.sigma_x, y)
        if stage == "refine":
            state.theta_mean, state.theta_cov = update_theta(
                lin, state.mu_x, state.sigma_x, float(state.gamma_post.mean()), grid_prior, lin.mu_hat, y
            )
        _check_finite(state, i)
        denom = float(np.linalg.norm(mu_prev))
        rel = float(np.linalg.norm(state.mu_x - mu_prev)) / denom if denom > 0.0 else 0.0
        state.iterations_used = i + 1
        state.trace.append(
            IterationRecord(
                stage=stage,
                index=i,
                rel_change=rel,
                noise_rate=float(np.asarray(state.gamma_post.rate)),
                metric=float(metric_fn(state)) if metric_fn is not None else float("nan"),
                elapsed_s=time.perf_counter() - tic,
            )
        )
        converging_stage = stage == "refine" or fixed_grid
        if converging_stage and i > 0 and rel < config.convergence_tol:
            state.converged = True
            break
    return state
