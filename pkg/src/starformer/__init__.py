"""State-action-reward transformer for offline RL and imitation from pixels."""

from starformer.model import ModelConfig, StARformer, build_variant, variant_config
from starformer.trajectory import ActionSpace, RewardMode, Trajectory

__all__ = ["ActionSpace", "ModelConfig", "RewardMode", "StARformer", "Trajectory", "build_variant", "variant_config"]
__version__ = "0.1.0"
