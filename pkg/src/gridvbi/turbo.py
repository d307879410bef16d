"""Turbo exchange between the sparse estimator and a lattice support prior.

The factor graph splits into two subgraphs: the linear-model side runs the
inverse-free variational estimator with an independent support prior, the
structure side runs sum-product message passing on a 4-connected
Markov-random-field lattice that favors contiguous bursts of active
coefficients.  The two modules alternate, each receiving the other's
extrinsic Bernoulli messages as its prior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from gridvbi.mm import IfslaConfig, IfslaEngine
from gridvbi.priors import ThreeLayerPrior
from gridvbi.sensing import SensingModelSpec
from gridvbi.vbi import VariationalState

log = logging.getLogger(__name__)

__all__ = [
    "ExtrinsicMessages",
    "MrfPrior",
    "MrfMessageState",
    "TurboConfig",
    "extrinsic_from_a",
    "mrf_sweep",
    "mrf_output",
    "run_turbo_ifsla_vbi",
]

_CLAMP = 1e-12
_DIRS = ("left", "right", "top", "bottom")


@dataclass(frozen=True)
class ExtrinsicMessages:
    """Normalized Bernoulli messages: entry n is the message probability of s_n = 1."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ValueError("message probabilities must lie in [0, 1]")
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class MrfPrior:
    """4-connected lattice field over the support: alpha sets sparsity, beta burst coupling."""

    alpha: float
    beta: float
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("lattice dimensions must be positive")

    @property
    def n(self) -> int:
        return self.rows * self.cols


@dataclass
class MrfMessageState:
    """Directional messages into every lattice node, one array per direction.

    ``kappa[d][n]`` is the Bernoulli probability carried by the message
    entering node n from its d-side neighbor; entries for missing boundary
    neighbors stay at the uninformative value 1/2.
    """

    kappa: dict

    @classmethod
    def uninformative(cls, prior: MrfPrior) -> "MrfMessageState":
        return cls(kappa={d: np.full(prior.n, 0.5) for d in _DIRS})


def extrinsic_from_a(support_post: np.ndarray, prior_in: np.ndarray) -> ExtrinsicMessages:
    """Extrinsic message of the estimator: posterior with the incoming prior divided out.

    Prior entries exactly 0 or 1 are clamped away from the boundary (and
    logged) since the ratio is undefined there.
    """
    lam = np.asarray(support_post, dtype=float)
    phi = np.asarray(prior_in, dtype=float)
    if np.any(lam < 0.0) or np.any(lam > 1.0) or np.any(phi < 0.0) or np.any(phi > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    if np.any(phi <= 0.0) or np.any(phi >= 1.0):
        log.warning("degenerate prior messages clamped to (%g, 1 - %g)", _CLAMP, _CLAMP)
        phi = np.clip(phi, _CLAMP, 1.0 - _CLAMP)
    one = lam * (1.0 - phi)
    zero = (1.0 - lam) * phi
    total = one + zero
    out = np.where(total > 0.0, one / np.where(total > 0.0, total, 1.0), 0.5)
    return ExtrinsicMessages(probs=out)


def _neighbor_index(prior: MrfPrior, direction: str):
    """(nodes with a neighbor on that side, flat index of that neighbor)."""
    idx = np.arange(prior.n)
    r, c = np.divmod(idx, prior.cols)
    if direction == "left":
        mask, nb = c > 0, idx - 1
    elif direction == "right":
        mask, nb = c < prior.cols - 1, idx + 1
    elif direction == "top":
        mask, nb = r > 0, idx - prior.cols
    else:
        mask, nb = r < prior.rows - 1, idx + prior.cols
    return np.flatnonzero(mask), nb[mask]


# Directions of the neighbor's own incoming messages that feed the message it
# sends toward us, i.e. all of its edges except the one pointing back.
_FEED = {
    "left": ("left", "top", "bottom"),
    "right": ("right", "top", "bottom"),
    "top": ("left", "right", "top"),
    "bottom": ("left", "right", "bottom"),
}


def _log_parts(incoming: np.ndarray, state: MrfMessageState, feed: tuple, alpha: float):
    with np.errstate(divide="ignore"):
        on = np.log(incoming) - alpha
        off = np.log1p(-incoming) + alpha
        for d in feed:
            on = on + np.log(state.kappa[d])
            off = off + np.log1p(-state.kappa[d])
    return on, off


def mrf_sweep(prior: MrfPrior, incoming: np.ndarray, state: MrfMessageState) -> MrfMessageState:
    """One synchronous sum-product sweep over all four message directions.

    The new message into node n aggregates its neighbor's external message
    and that neighbor's other three directional messages through the pair
    coupling.  Reads only the previous state, so per-node update order is
    irrelevant.  Products run in the log domain.
    """
    incoming = np.asarray(incoming, dtype=float)
    if np.any(incoming < 0.0) or np.any(incoming > 1.0):
        raise ValueError("incoming messages must lie in [0, 1]")
    new = {d: np.full(prior.n, 0.5) for d in _DIRS}
    for d in _DIRS:
        nodes, nb = _neighbor_index(prior, d)
        if nodes.size == 0:
            continue
        on, off = _log_parts(incoming, state, _FEED[d], prior.alpha)
        on, off = on[nb], off[nb]
        num = np.logaddexp(on + prior.beta, off - prior.beta)
        den = np.logaddexp(on, off) + np.logaddexp(prior.beta, -prior.beta)
        new[d][nodes] = np.exp(num - den)
    return MrfMessageState(kappa=new)


def mrf_output(prior: MrfPrior, state: MrfMessageState) -> ExtrinsicMessages:
    """Extrinsic message out of the lattice: local sparsity factor times all four inputs."""
    with np.errstate(divide="ignore"):
        on = -prior.alpha + sum(np.log(state.kappa[d]) for d in _DIRS)
        off = prior.alpha + sum(np.log1p(-state.kappa[d]) for d in _DIRS)
    probs = np.empty(prior.n)
    conflict = np.isneginf(on) & np.isneginf(off)
    if conflict.any():
        log.warning("%d lattice nodes received contradictory hard messages; emitting 1/2", int(conflict.sum()))
    ok = ~conflict
    probs[ok] = np.exp(on[ok] - np.logaddexp(on[ok], off[ok]))
    probs[conflict] = 0.5
    return ExtrinsicMessages(probs=probs)


@dataclass(frozen=True)
class TurboConfig(IfslaConfig):
    """Turbo loop sizing: rounds of estimator iterations alternating with lattice sweeps.

    The refinement budget is ``module_a_iters * turbo_rounds``; the
    inherited ``stage2_iters`` is ignored in the turbo loop.
    """

    module_a_iters: int = 10
    turbo_rounds: int = 5
    mrf_sweeps: int = 5

    def __post_init__(self):
        super().__post_init__()
        if self.module_a_iters < 1 or self.turbo_rounds < 1 or self.mrf_sweeps < 1:
            raise ValueError("turbo loop counts must be at least 1")


def run_turbo_ifsla_vbi(
    y: np.ndarray,
    spec: SensingModelSpec,
    prior: ThreeLayerPrior,
    mrf: MrfPrior,
    config: TurboConfig,
    metric_fn=None,
    initial_phi_a: np.ndarray | None = None,
) -> VariationalState:
    """Inverse-free estimator with the lattice prior closed around it.

    Stage 1 matches the plain inverse-free run.  Stage 2 loops turbo
    rounds: the estimator runs up to ``module_a_iters`` refinement
    iterations with the lattice's latest extrinsic messages as its support
    prior, sends back its own extrinsic messages, and the lattice answers
    with ``mrf_sweeps`` sum-product sweeps (message state persists across
    rounds).  The first round's prior is the lattice output under
    uninformative inputs unless ``initial_phi_a`` overrides it.
    """
    if mrf.n != spec.n:
        raise ValueError("lattice size must match the coefficient count")
    message_state = MrfMessageState.uninformative(mrf)
    if initial_phi_a is None:
        phi_a = mrf_output(mrf, message_state).probs
    else:
        phi_a = np.asarray(initial_phi_a, dtype=float)

    engine = IfslaEngine(y, spec, prior, config)
    i = 0
    for _ in range(config.stage1_iters):
        engine.iterate(i, "init", prior.support_prob, metric_fn=metric_fn)
        i += 1
    for _ in range(config.turbo_rounds):
        for inner in range(config.module_a_iters):
            rel = engine.iterate(i, "refine", phi_a, metric_fn=metric_fn)
            i += 1
            if inner > 0 and rel < config.convergence_tol:
                engine.state.converged = True
                break
        outgoing = extrinsic_from_a(engine.state.support_post, phi_a)
        for _ in range(config.mrf_sweeps):
            message_state = mrf_sweep(mrf, outgoing.probs, message_state)
        phi_a = mrf_output(mrf, message_state).probs
    return engine.state
