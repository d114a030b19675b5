"""Freshness-aware update-rate control: age accounting, ACP-family policies,
a deterministic network simulator, a datagram runner and an experiment harness."""

from .age import AgeTracker, DeliveryEvent, EpochAgeSummary, close_window
from .config import ExperimentConfig
from .estimators import EwmaEstimator, FeedbackState, LinkEstimators
from .netsim import ChannelModel, CoalesceFault, SimResult, issue3_scenario, run_simulation
from .policies import Action, PolicyConfig, PolicyKind, epoch_transition
from .sender import EpochRecord, Sender

__version__ = "0.1.0"

__all__ = [
    "Action", "AgeTracker", "ChannelModel", "CoalesceFault", "DeliveryEvent", "EpochAgeSummary",
    "EpochRecord", "EwmaEstimator", "ExperimentConfig", "FeedbackState", "LinkEstimators",
    "PolicyConfig", "PolicyKind", "Sender", "SimResult", "close_window", "epoch_transition",
    "issue3_scenario", "run_simulation",
]
