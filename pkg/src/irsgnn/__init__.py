"""Learned beamforming and reflection design for IRS-assisted multiuser MISO
downlinks, with model-based baselines."""

from .config import ConfigError, SystemConfig, desk_system, interpretation_system, maxmin_system, paper_system
from .channel import ChannelSet, sample_channel_batch, sample_channels, sample_placement
from .pilots import PilotPlan, decorrelate, make_plan, simulate_uplink
from .rates import Solution, user_rate, user_rates, utility
from .gnn import GnnConfig, IrsGnn
from .training import Checkpoint, TrainingConfig, evaluate, train

__version__ = "0.1.0"
