"""RL fine-tuning of flow-matching action-chunk policies."""

from .algo import Critic, CriticConfig, FlowRLTrainer, PpoConfig
from .config import RunConfig, load_config, parse_config
from .envs import EnvBatch, TaskSpec, gen_demos
from .policy import FlowPolicy

__all__ = [
    "Critic", "CriticConfig", "EnvBatch", "FlowPolicy", "FlowRLTrainer", "PpoConfig", "RunConfig", "TaskSpec",
    "gen_demos", "load_config", "parse_config",
]
__version__ = "0.1.0"
