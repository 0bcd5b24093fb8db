"""Promptable segmentation with ReLU-linear-attention image encoders, at desk scale."""
from .attention import AttentionConfig
from .backbone import PRESETS, ImageEncoder, ModelConfig
from .sam_head import MaskPrediction, Predictor, PromptSet, SamModel
from .training import LossConfig, TrainConfig

__version__ = "0.1.0"

__all__ = ["AttentionConfig", "ImageEncoder", "LossConfig", "MaskPrediction", "ModelConfig", "PRESETS",
           "Predictor", "PromptSet", "SamModel", "TrainConfig"]
