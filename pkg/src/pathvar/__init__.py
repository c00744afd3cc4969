"""Perturbations of path measures: Girsanov reweighting, entropy and the variational formula."""

from .core import (
    CameronMartinDrift,
    DiscretePath,
    GridMismatchError,
    RandomSource,
    TimeGrid,
    brownian_increments,
    cm_norm_sq,
    ito_integral,
    log_wick,
)
from .drifts import (
    Adapted,
    Clipped,
    ClosedLoop,
    DriftSpec,
    OpenLoop,
    Retarded,
    affine_feedback,
    clip_drift,
    constant_drift,
    retard_drift,
    zero_drift,
)
from .measures import (
    BasePair,
    Bridge,
    ControlledPath,
    Diffusion,
    Loop,
    MeasureSpec,
    MeasureSpecError,
    Particles,
    Wiener,
    beta_functional,
    compose_check,
    loop_kernel,
    perturb,
    sample_base,
)
from .functionals import Functional, make_functional
from .montecarlo import EstimateWithError

__all__ = [
    "CameronMartinDrift",
    "DiscretePath",
    "GridMismatchError",
    "RandomSource",
    "TimeGrid",
    "brownian_increments",
    "cm_norm_sq",
    "ito_integral",
    "log_wick",
    "Adapted",
    "Clipped",
    "ClosedLoop",
    "DriftSpec",
    "OpenLoop",
    "Retarded",
    "affine_feedback",
    "clip_drift",
    "constant_drift",
    "retard_drift",
    "zero_drift",
    "BasePair",
    "Bridge",
    "ControlledPath",
    "Diffusion",
    "Loop",
    "MeasureSpec",
    "MeasureSpecError",
    "Particles",
    "Wiener",
    "beta_functional",
    "compose_check",
    "loop_kernel",
    "perturb",
    "sample_base",
    "Functional",
    "make_functional",
    "EstimateWithError",
]

__version__ = "0.1.0"
