"""Two-dialect microscopic traffic simulator with equivalence metrics."""
from .behavior import ModelParams
from .demand import AGGRESSIVENESS_TYPES, DriverProfile, Flow, build_demand, make_profile
from .engine import EngineConfig, RunSummary, run
from .metrics import EquivalenceReport, equivalence_report
from .network import RoadNetwork, generate_arterial, generate_grid, load_network

__version__ = "0.1.0"

__all__ = [
    "ModelParams",
    "AGGRESSIVENESS_TYPES",
    "DriverProfile",
    "Flow",
    "build_demand",
    "make_profile",
    "EngineConfig",
    "RunSummary",
    "run",
    "EquivalenceReport",
    "equivalence_report",
    "RoadNetwork",
    "generate_arterial",
    "generate_grid",
    "load_network",
]
