"""Certified finite-size QKD key rates from sandwiched Renyi divergences."""

from .config import RunConfig
from .finitesize import FiniteSizeParams, KeyRateReport, SecurityParams
from .matfun import PinchingMap, frechet_integral
from .objective import PerturbedObjective, RenyiParams, renyi_divergence
from .optimizer import FeasibleSet, frank_wolfe, step2_lower_bound
from .pipeline import SolverSettings, key_rate_at, optimize_alpha
from .protocol import CPMap, ProtocolInstance, bb84_pm_instance

__all__ = [
    "CPMap",
    "FeasibleSet",
    "FiniteSizeParams",
    "KeyRateReport",
    "PerturbedObjective",
    "PinchingMap",
    "ProtocolInstance",
    "RenyiParams",
    "RunConfig",
    "SecurityParams",
    "SolverSettings",
    "bb84_pm_instance",
    "frank_wolfe",
    "frechet_integral",
    "key_rate_at",
    "optimize_alpha",
    "renyi_divergence",
    "step2_lower_bound",
]

__version__ = "0.1.0"
