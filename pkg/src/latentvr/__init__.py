"""Latent visual reasoning at desk scale: ROI-anchored latent SFT and
visual-latent policy optimisation on a tiny numpy transformer."""

from .model import ModelConfig, TinyVLM, Vocabulary
from .synth import TaskConfig

__version__ = "0.1.0"

__all__ = ["ModelConfig", "TaskConfig", "TinyVLM", "Vocabulary", "__version__"]
