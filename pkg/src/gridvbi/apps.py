"""Simulated wireless applications: sensing models, ground truth, metrics.

Two concrete dynamic-grid sensing models.  Channel estimation: a uniform
linear array observes a multipath downlink channel through random-phase
pilots, the grid parameter is the departure angle of each dictionary
column.  Target localization: an OFDM radar with a reduced RF front end
observes echo phases across pilot subcarriers, the grid parameters are the
distance and angle of each position cell.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from gridvbi.priors import GridPrior, default_grid_precision
from gridvbi.sensing import SensingModelSpec
from gridvbi.vbi import VariationalState

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0

__all__ = [
    "SPEED_OF_LIGHT",
    "ula_steering",
    "ula_steering_derivative",
    "steering_matrix",
    "ChannelScenario",
    "ChannelModel",
    "LocalizationScenario",
    "LocalizationModel",
    "GroundTruth",
    "build_channel_model",
    "build_localization_model",
    "make_grid_prior",
    "nmse",
    "channel_estimate",
    "polar_to_cartesian",
    "sensing_area_diameter",
    "localization_error",
]


def ula_steering(theta: float, n: int) -> np.ndarray:
    """Unit-norm array response of an n-element half-wavelength linear array."""
    if n < 1:
        raise ValueError("need at least one antenna")
    return np.exp(1j * np.pi * np.arange(n) * np.sin(theta)) / np.sqrt(n)


def ula_steering_derivative(theta: float, n: int) -> np.ndarray:
    """Derivative of :func:`ula_steering` with respect to the angle."""
    if n < 1:
        raise ValueError("need at least one antenna")
    return 1j * np.pi * np.arange(n) * np.cos(theta) * ula_steering(theta, n)


def steering_matrix(thetas: np.ndarray, n: int) -> np.ndarray:
    """Array responses for many angles at once, one per column."""
    return np.exp(1j * np.pi * np.outer(np.arange(n), np.sin(thetas))) / np.sqrt(n)


def _steering_derivative_matrix(thetas: np.ndarray, n: int) -> np.ndarray:
    return (1j * np.pi * np.arange(n)[:, None] * np.cos(thetas)[None, :]) * steering_matrix(thetas, n)


@dataclass(frozen=True)
class GroundTruth:
    """Generated truth of one trial: sparse gains, their cells, exact parameters there.

    ``channel_or_positions`` is the dense channel vector for the channel
    application and the (k, 2) Cartesian target coordinates for
    localization.
    """

    sparse_x: np.ndarray
    support: np.ndarray
    theta_true: np.ndarray
    channel_or_positions: np.ndarray


# ---------------------------------------------------------------------------
# Channel estimation


@dataclass(frozen=True)
class ChannelScenario:
    """Downlink channel estimation sizes and operating point."""

    antennas: int = 128
    pilots: int = 64
    grid_size: int = 128
    paths: int = 4
    snr_db: float = 10.0
    off_grid: bool = True

    def __post_init__(self):
        if self.pilots >= self.antennas:
            raise ValueError("pilot count must be below the antenna count")
        if not 1 <= self.paths <= self.grid_size // 4:
            raise ValueError("path count must be small against the grid size")


class ChannelModel(SensingModelSpec):
    """Columns are pilot-projected array responses; one grid block (the angle)."""

    def __init__(self, pilot_matrix: np.ndarray, initial_grid: np.ndarray):
        self.pilot_matrix = np.asarray(pilot_matrix, dtype=complex)
        self.initial_grid = np.atleast_2d(np.asarray(initial_grid, dtype=float))
        self.m = self.pilot_matrix.shape[0]
        self.antennas = self.pilot_matrix.shape[1]
        self.n = self.initial_grid.shape[1]
        self.b = 1

    def basis(self, theta_n):
        return self.pilot_matrix @ ula_steering(float(theta_n[0]), self.antennas)

    def basis_derivative(self, theta_n, j):
        if j != 0:
            raise IndexError("channel model has a single grid block")
        return self.pilot_matrix @ ula_steering_derivative(float(theta_n[0]), self.antennas)

    def basis_matrix(self, mu):
        return self.pilot_matrix @ steering_matrix(mu[0], self.antennas)

    def derivative_matrix(self, mu, j):
        if j != 0:
            raise IndexError("channel model has a single grid block")
        return self.pilot_matrix @ _steering_derivative_matrix(mu[0], self.antennas)


def _noise(rng: np.random.Generator, size: int, signal_power: float, snr_db: float) -> np.ndarray:
    draw = rng.standard_normal(size) + 1j * rng.standard_normal(size)
    if np.isinf(snr_db):
        return np.zeros(size, dtype=complex)
    sigma2 = signal_power / (size * 10.0 ** (snr_db / 10.0))
    return np.sqrt(sigma2 / 2.0) * draw


def build_channel_model(scn: ChannelScenario, rng_seed) -> tuple[ChannelModel, GroundTruth, np.ndarray]:
    """Draw one channel trial: pilots, off-grid path angles, gains and noisy observation.

    The nominal grid is uniform in the sine domain; true angles sit on
    randomly chosen cells perturbed by up to half a grid interval.
    Separate substreams drive truth, pilots and noise so that sweeps over
    pilot count or SNR reuse identical path realizations.
    """
    truth_rng, pilot_rng, noise_rng = _substreams(rng_seed)
    n_grid = scn.grid_size
    sin_grid = -1.0 + (2.0 * np.arange(n_grid) + 1.0) / n_grid
    theta_bar = np.arcsin(sin_grid)

    support = np.sort(truth_rng.choice(n_grid, size=scn.paths, replace=False))
    offsets = truth_rng.uniform(-1.0, 1.0, scn.paths) / n_grid
    if not scn.off_grid:
        offsets = np.zeros(scn.paths)
    theta_true = np.arcsin(sin_grid[support] + offsets)
    gains = (truth_rng.standard_normal(scn.paths) + 1j * truth_rng.standard_normal(scn.paths)) / np.sqrt(2.0)

    pilot_matrix = np.exp(2j * np.pi * pilot_rng.uniform(size=(scn.pilots, scn.antennas)))
    spec = ChannelModel(pilot_matrix, theta_bar[None, :])

    h = steering_matrix(theta_true, scn.antennas) @ gains
    y0 = pilot_matrix @ h
    y = y0 + _noise(noise_rng, scn.pilots, float(np.linalg.norm(y0) ** 2), scn.snr_db)

    sparse_x = np.zeros(n_grid, dtype=complex)
    sparse_x[support] = gains
    truth = GroundTruth(sparse_x=sparse_x, support=support, theta_true=theta_true[None, :], channel_or_positions=h)
    return spec, truth, y


def channel_estimate(spec: ChannelModel, state: VariationalState) -> np.ndarray:
    """Dense channel reconstruction from the refined grid and coefficient means."""
    return steering_matrix(state.theta_mean[0], spec.antennas) @ state.mu_x


def nmse(h_true: np.ndarray, h_est: np.ndarray) -> float:
    """Squared error normalized by the truth's energy."""
    if h_true.shape != h_est.shape:
        raise ValueError("length mismatch")
    denom = float(np.linalg.norm(h_true) ** 2)
    if denom == 0.0:
        raise ValueError("ground truth has zero norm")
    return float(np.linalg.norm(h_est - h_true) ** 2) / denom


# ---------------------------------------------------------------------------
# Target detection and localization


@dataclass(frozen=True)
class LocalizationScenario:
    """OFDM radar sizes, pilot placement and the polar sensing area."""

    antennas: int = 64
    rf_chains: int = 16
    subcarriers: int = 1024
    subcarrier_interval_hz: float = 30e3
    pilot_stride: int = 32
    targets: int = 4
    angle_bins: int = 32
    range_bins: int = 16
    snr_db: float = 0.0
    range_min_m: float = 20.0
    range_max_m: float = 60.0
    angle_span_deg: float = 90.0
    cluster_radius_m: float = 5.0

    def __post_init__(self):
        if self.rf_chains >= self.antennas:
            raise ValueError("RF chain count must be below the antenna count")
        if self.subcarriers % self.pilot_stride != 0:
            raise ValueError("pilot stride must divide the subcarrier count")
        if self.targets < 1 or self.targets > self.grid_size // 4:
            raise ValueError("target count must be small against the grid size")
        if self.range_min_m <= self.cluster_radius_m:
            raise ValueError("sensing area must start beyond the cluster radius")

    @property
    def grid_size(self) -> int:
        return self.angle_bins * self.range_bins

    @property
    def pilot_count(self) -> int:
        return self.subcarriers // self.pilot_stride

    @property
    def angle_span_rad(self) -> float:
        return np.deg2rad(self.angle_span_deg)


class LocalizationModel(SensingModelSpec):
    """Echo response per position cell: delay phase across pilot subcarriers times
    the transmit-side beam projection, combined through the reduced RF front end.

    Grid blocks: 0 holds distances (m), 1 holds angles (rad).  Measurements
    stack the RF-chain outputs subcarrier by subcarrier.
    """

    def __init__(self, combiner, probes, subcarrier_offsets, subcarrier_interval_hz, initial_grid):
        self.combiner = np.asarray(combiner, dtype=complex)  # (rf, antennas)
        self.probes = np.asarray(probes, dtype=complex)  # (pilots, antennas)
        self.subcarrier_offsets = np.asarray(subcarrier_offsets, dtype=float)  # n - 1 values
        self.subcarrier_interval_hz = float(subcarrier_interval_hz)
        self.initial_grid = np.asarray(initial_grid, dtype=float)  # (2, q)
        self.rf_chains = self.combiner.shape[0]
        self.antennas = self.combiner.shape[1]
        self.pilots = self.probes.shape[0]
        self.m = self.pilots * self.rf_chains
        self.n = self.initial_grid.shape[1]
        self.b = 2

    def _delay_phases(self, dist):
        rate = -2j * np.pi * self.subcarrier_interval_hz * 2.0 / SPEED_OF_LIGHT
        return np.exp(rate * np.multiply.outer(self.subcarrier_offsets, dist)), rate

    def basis(self, theta_n):
        return self.basis_matrix(np.asarray(theta_n, dtype=float).reshape(2, 1))[:, 0]

    def basis_derivative(self, theta_n, j):
        return self.derivative_matrix(np.asarray(theta_n, dtype=float).reshape(2, 1), j)[:, 0]

    def basis_matrix(self, mu):
        dist, ang = mu[0], mu[1]
        steer = steering_matrix(ang, self.antennas)
        phases, _ = self._delay_phases(dist)
        gain = phases * (self.probes @ steer)  # (pilots, q)
        beams = self.combiner @ steer  # (rf, q)
        return (gain[:, None, :] * beams[None, :, :]).reshape(self.m, -1)

    def derivative_matrix(self, mu, j):
        dist, ang = mu[0], mu[1]
        steer = steering_matrix(ang, self.antennas)
        phases, rate = self._delay_phases(dist)
        proj = self.probes @ steer
        beams = self.combiner @ steer
        if j == 0:
            gain = (rate * phases) * self.subcarrier_offsets[:, None] * proj
            return (gain[:, None, :] * beams[None, :, :]).reshape(self.m, -1)
        if j == 1:
            dsteer = _steering_derivative_matrix(ang, self.antennas)
            gain = phases * proj
            dgain = phases * (self.probes @ dsteer)
            dbeams = self.combiner @ dsteer
            out = dgain[:, None, :] * beams[None, :, :] + gain[:, None, :] * dbeams[None, :, :]
            return out.reshape(self.m, -1)
        raise IndexError("localization model has two grid blocks")


def _substreams(rng_seed):
    root = np.random.SeedSequence(rng_seed)
    return tuple(np.random.default_rng(child) for child in root.spawn(3))


def _draw_cluster(scn: LocalizationScenario, rng: np.random.Generator):
    """Targets uniform in a disc that fits inside the polar sensing area,
    resampled until every target claims a distinct grid cell."""
    radius = scn.cluster_radius_m
    half_span = scn.angle_span_rad / 2.0
    angles = np.linspace(-half_span, half_span, scn.angle_bins)
    ranges = np.linspace(scn.range_min_m, scn.range_max_m, scn.range_bins)
    for _ in range(200):
        r_c = rng.uniform(scn.range_min_m + radius, scn.range_max_m - radius)
        margin = np.arcsin(min(1.0, radius / (r_c - radius)))
        if margin >= half_span:
            continue
        th_c = rng.uniform(-half_span + margin, half_span - margin)
        center = np.array([r_c * np.cos(th_c), r_c * np.sin(th_c)])
        rad = radius * np.sqrt(rng.uniform(size=scn.targets))
        phi = rng.uniform(0.0, 2.0 * np.pi, scn.targets)
        pts = center[None, :] + np.stack([rad * np.cos(phi), rad * np.sin(phi)], axis=1)
        r_k = np.hypot(pts[:, 0], pts[:, 1])
        th_k = np.arctan2(pts[:, 1], pts[:, 0])
        a_bin = np.argmin(np.abs(angles[None, :] - th_k[:, None]), axis=1)
        r_bin = np.argmin(np.abs(ranges[None, :] - r_k[:, None]), axis=1)
        cells = a_bin * scn.range_bins + r_bin
        if len(set(cells.tolist())) == scn.targets:
            return pts, r_k, th_k, cells
    raise RuntimeError("could not place targets in distinct grid cells")


def build_localization_model(scn: LocalizationScenario, rng_seed):
    """Draw one localization trial: front end, clustered targets and noisy echoes."""
    truth_rng, frontend_rng, noise_rng = _substreams(rng_seed)
    half_span = scn.angle_span_rad / 2.0
    angles = np.linspace(-half_span, half_span, scn.angle_bins)
    ranges = np.linspace(scn.range_min_m, scn.range_max_m, scn.range_bins)
    grid = np.stack([np.tile(ranges, scn.angle_bins), np.repeat(angles, scn.range_bins)])

    pts, r_k, th_k, cells = _draw_cluster(scn, truth_rng)
    gains = (truth_rng.standard_normal(scn.targets) + 1j * truth_rng.standard_normal(scn.targets)) / np.sqrt(2.0)

    gaussian = frontend_rng.standard_normal((scn.antennas, scn.antennas)) + 1j * frontend_rng.standard_normal(
        (scn.antennas, scn.antennas)
    )
    unitary, _ = np.linalg.qr(gaussian)
    combiner = unitary[: scn.rf_chains, :]
    probes = np.exp(2j * np.pi * frontend_rng.uniform(size=(scn.pilot_count, scn.antennas)))
    offsets = np.arange(0, scn.subcarriers, scn.pilot_stride, dtype=float)

    spec = LocalizationModel(combiner, probes, offsets, scn.subcarrier_interval_hz, grid)
    y0 = spec.basis_matrix(np.stack([r_k, th_k])) @ gains
    y = y0 + _noise(noise_rng, spec.m, float(np.linalg.norm(y0) ** 2), scn.snr_db)

    order = np.argsort(cells)
    sparse_x = np.zeros(spec.n, dtype=complex)
    sparse_x[cells] = gains
    truth = GroundTruth(
        sparse_x=sparse_x,
        support=cells[order],
        theta_true=np.stack([r_k[order], th_k[order]]),
        channel_or_positions=pts[order],
    )
    return spec, truth, y


def make_grid_prior(spec) -> GridPrior:
    """Gaussian grid prior centered on the model's nominal grid with spacing-derived precision."""
    return GridPrior(mean=spec.initial_grid, precision=default_grid_precision(spec.initial_grid))


def polar_to_cartesian(r, theta):
    """(r, angle) to (x, y) with the sensor at the origin."""
    return np.stack([np.asarray(r) * np.cos(theta), np.asarray(r) * np.sin(theta)], axis=-1)


def sensing_area_diameter(scn: LocalizationScenario) -> float:
    """Largest distance between two points of the polar sensing area (the miss penalty)."""
    half = scn.angle_span_rad / 2.0
    corners = polar_to_cartesian(
        np.array([scn.range_min_m, scn.range_min_m, scn.range_max_m, scn.range_max_m]),
        np.array([-half, half, -half, half]),
    )
    best = 2.0 * scn.range_max_m * np.sin(min(half, np.pi / 2.0))
    for i in range(4):
        for k in range(i + 1, 4):
            best = max(best, float(np.linalg.norm(corners[i] - corners[k])))
    return float(best)


def localization_error(
    truth: GroundTruth, state: VariationalState, detect_threshold: float = 0.5, penalty: float | None = None
) -> float:
    """Mean distance from each true target to the nearest detected refined position.

    Detection keeps cells whose support posterior clears the threshold;
    their refined polar coordinates come from the grid posterior means.  An
    empty detection returns the penalty (the sensing-area diameter unless
    given) and logs the miss.
    """
    if not 0.0 < detect_threshold < 1.0:
        raise ValueError("detection threshold must lie in (0, 1)")
    detected = np.flatnonzero(state.support_post > detect_threshold)
    positions = np.atleast_2d(truth.channel_or_positions)
    if detected.size == 0:
        if penalty is None:
            raise ValueError("no detections and no penalty provided")
        log.warning("no cells cleared the detection threshold; charging the miss penalty")
        return float(penalty)
    coords = polar_to_cartesian(state.theta_mean[0][detected], state.theta_mean[1][detected])
    dists = np.linalg.norm(positions[:, None, :] - coords[None, :, :], axis=2)
    return float(np.mean(np.min(dists, axis=1)))
