"""
flowtrace
线性随机控制系统攻击可检测性的KL散度信息流分析
"""

from .attacks import AttackPolicy, FdiPolicy, NoAttack, ReplayPolicy
from .config import DEFAULT_SETTINGS, Settings
from .detection import DetectorSpec, RocRecord, decay_rate, estimate_roc
from .engine import ExperimentSummary, TrialRecord, run_experiment, simulate_trial
from .errors import FlowtraceError, NumericError, ValidationError
from .estimation import FeedbackLaw, SteadyStateFilter, design_lqg, lqg_cost, steady_state_filter
from .infoflow import GaussianDist, InfoFlowReport, kl_gaussian
from .model import AttackChannels, ScenarioConfig, SystemModel, load_model, parse_model, save_model
from .stealth import PencilReport, WitnessAttack, pencil_rank_test, synthesize_zero_flow_attack

__version__ = "0.1.0"

__all__ = [
    "AttackChannels",
    "AttackPolicy",
    "DEFAULT_SETTINGS",
    "DetectorSpec",
    "ExperimentSummary",
    "FdiPolicy",
    "FeedbackLaw",
    "FlowtraceError",
    "GaussianDist",
    "InfoFlowReport",
    "NoAttack",
    "NumericError",
    "PencilReport",
    "ReplayPolicy",
    "RocRecord",
    "ScenarioConfig",
    "Settings",
    "SteadyStateFilter",
    "SystemModel",
    "TrialRecord",
    "ValidationError",
    "WitnessAttack",
    "decay_rate",
    "design_lqg",
    "estimate_roc",
    "kl_gaussian",
    "load_model",
    "lqg_cost",
    "parse_model",
    "pencil_rank_test",
    "run_experiment",
    "save_model",
    "simulate_trial",
    "steady_state_filter",
    "synthesize_zero_flow_attack",
]
