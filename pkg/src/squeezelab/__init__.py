"""Digital twin of velocity squeezing of a levitated nanoparticle by trap-frequency jumps."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .analysis import FitError, FitResult, PipelineAbort, squeezing_db
from .measurement import NoiseSpec, ensemble
from .noise_budget import NoiseInputs, budget
from .phasespace import GaussianState, PhysicalParams, ground_state, thermal_state
from .protocol import ProtocolSchedule, analytic_variance, canonical_schedule, run_protocol

__all__ = [
    "__version__",
    "FitError",
    "FitResult",
    "PipelineAbort",
    "squeezing_db",
    "NoiseSpec",
    "ensemble",
    "NoiseInputs",
    "budget",
    "GaussianState",
    "PhysicalParams",
    "ground_state",
    "thermal_state",
    "ProtocolSchedule",
    "analytic_variance",
    "canonical_schedule",
    "run_protocol",
]
