"""Distribution-aware semantic pseudo-labeling for imbalanced semi-supervised learning, at desk scale."""

from .config import RunConfig, parse_config
from .learner import run_training

__all__ = ["RunConfig", "parse_config", "run_training"]
__version__ = "0.1.0"
