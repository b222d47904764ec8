"""Calibrated optimal decision making with a primary and an auxiliary sample."""

from .calibration import (CalibrationReport, CalibStats, baseline_report, calib_stats, calib_stats_he,
                          calib_stats_ho, calibrated_value, improved_efficiency)
from .data import (AuxiliarySample, BasisSpec, Config, JointSample, Leaf, LinearRule, Node, PrimarySample,
                   TreeRule, apply_rule, rule_actions, validate_pair)
from .nuisance import NuisanceSet, cio_diagnostic, crossfit_predictions, fit_all, fit_binary, fit_mean
from .policy_search import SearchResult, coda_search, exact_tree_search, parametric_search
from .rewards import (RewardTable, build_rewards, delta_hat, value_VE, value_W0, value_W1, value_WE,
                      value_WU)
from .simulation import (ScenarioSpec, StudySummary, best_tree_value, generate, mc_true_value, run_study,
                         scenario, study_config)

__version__ = "0.1.0"
