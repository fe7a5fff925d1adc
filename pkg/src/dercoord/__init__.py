"""Incentive-based coordination of discrete and continuous DERs on a distribution feeder."""

__version__ = "0.1.0"

from .agent import IncentiveSignal, Population, RandomizationPlan, build_randomization_plan, realize
from .analysis import AnalysisConstants, BoundReport, compute_delta, robust_bounds
from .coordinator import DualState, OfflineResult, SolverConfig, WindowProblem, run_offline
from .devices import BatteryParams, Device, HvacParams, PvParams
from .errors import DercoordError
from .grid import ConstraintSpec, LinearGridModel
from .online import OnlineConfig, OnlineEngine, OnlineTrace, ScenarioTimeline
from .plant import FeederPhysical, linearize, solve_ac
from .scenario import Scenario, load_scenario

__all__ = [
    "AnalysisConstants", "BatteryParams", "BoundReport", "ConstraintSpec", "DercoordError", "Device",
    "DualState", "FeederPhysical", "HvacParams", "IncentiveSignal", "LinearGridModel", "OfflineResult",
    "OnlineConfig", "OnlineEngine", "OnlineTrace", "Population", "PvParams", "RandomizationPlan",
    "Scenario", "ScenarioTimeline", "SolverConfig", "WindowProblem", "build_randomization_plan",
    "compute_delta", "linearize", "load_scenario", "realize", "robust_bounds", "run_offline", "solve_ac",
]
