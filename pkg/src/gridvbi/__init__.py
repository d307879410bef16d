"""Joint sparse signal recovery with dynamic-grid refinement.

Variational Bayesian estimators for linear models y = F(theta) x + w in
which the sensing matrix depends on unknown grid parameters theta.  The
package ships an exact-inverse estimator, an inverse-free variant built on
majorization-minimization, and a turbo extension with a lattice
Markov-random-field support prior, plus two simulated wireless
applications (multi-antenna channel estimation and OFDM target
localization) and a Monte-Carlo experiment harness.
"""

from gridvbi.priors import GammaParams, GridPrior, ThreeLayerPrior, default_prior, gamma_moments
from gridvbi.sensing import LinearizedModel, SensingModelSpec, assemble, linearized_second_moment
from gridvbi.vbi import SlaConfig, VariationalState, run_sla_vbi
from gridvbi.mm import IfslaConfig, MmSchedule, QuadraticProblem, mm_solve, run_ifsla_vbi
from gridvbi.turbo import MrfPrior, TurboConfig, run_turbo_ifsla_vbi

__all__ = [
    "GammaParams",
    "GridPrior",
    "ThreeLayerPrior",
    "default_prior",
    "gamma_moments",
    "LinearizedModel",
    "SensingModelSpec",
    "assemble",
    "linearized_second_moment",
    "SlaConfig",
    "VariationalState",
    "run_sla_vbi",
    "IfslaConfig",
    "MmSchedule",
    "QuadraticProblem",
    "mm_solve",
    "run_ifsla_vbi",
    "MrfPrior",
    "TurboConfig",
    "run_turbo_ifsla_vbi",
]
