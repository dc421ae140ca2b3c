"""Hierarchical masked discrete diffusion over multi-level token grids."""

from .conditions import ConditionBundle
from .config import ExperimentConfig
from .guidance import GuidanceConfig, OracleNetwork, sample
from .network import NetworkConfig, ScoreNetwork, load_checkpoint, save_checkpoint
from .schedule import NoiseSchedule
from .synthdata import SynthSpec, generate
from .token_space import LevelPartition, StateSpaceConfig, TokenGrid
from .training import TrainConfig, train_loop

__all__ = [
    "ConditionBundle", "ExperimentConfig", "GuidanceConfig", "LevelPartition", "NetworkConfig", "NoiseSchedule",
    "OracleNetwork", "ScoreNetwork", "StateSpaceConfig", "SynthSpec", "TokenGrid", "TrainConfig", "generate",
    "load_checkpoint", "sample", "save_checkpoint", "train_loop",
]
__version__ = "0.1.0"
