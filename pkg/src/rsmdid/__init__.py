"""Risk set matched difference-in-differences for staggered exposures."""

from .cart import TreeParams, fit_tree
from .discovery import SplitPlan, confirm_subgroups, extract_groups, fit_cart, r2_bounds, split_design
from .errors import RsmdidError
from .inference import Horizon, confidence_interval, estimate_effect, gamma_star, permutation_test, point_estimate
from .matching import MatchedDesign, MatchSpec, profile_match_one, run_risk_set_matching
from .panel_data import PanelDataset, SynthConfig, load_panel, synth_generate
from .simulation import SimScenario, run_power_study, scenario_grid
from .submax import ComparisonMatrix, critical_value, minmax_test

__version__ = "0.1.0"

__all__ = [
    "ComparisonMatrix",
    "Horizon",
    "MatchSpec",
    "MatchedDesign",
    "PanelDataset",
    "RsmdidError",
    "SimScenario",
    "SplitPlan",
    "SynthConfig",
    "TreeParams",
    "confidence_interval",
    "confirm_subgroups",
    "critical_value",
    "estimate_effect",
    "extract_groups",
    "fit_cart",
    "fit_tree",
    "gamma_star",
    "load_panel",
    "minmax_test",
    "permutation_test",
    "point_estimate",
    "profile_match_one",
    "r2_bounds",
    "run_power_study",
    "run_risk_set_matching",
    "scenario_grid",
    "split_design",
    "synth_generate",
]
