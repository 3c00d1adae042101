"""Intervention lab for temporal reasoning in a toy causal video transformer."""

from .model import ModelConfig, TransformerLab, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
__all__ = ["ModelConfig", "TransformerLab", "load_checkpoint", "save_checkpoint", "__version__"]
