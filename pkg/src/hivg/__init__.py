"""Desk-scale hierarchical low-rank adaptation for visual grounding."""
from .config import LossWeights, ModelConfig, RunConfig, TrainPlan, load_config
from .model import HiVG

__all__ = ["HiVG", "LossWeights", "ModelConfig", "RunConfig", "TrainPlan", "load_config"]
__version__ = "0.1.0"
