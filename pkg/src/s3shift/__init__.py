"""Multiplication-free power-of-two (shift) CNNs with sign-sparse-shift training."""

__version__ = "0.1.0"

from .estimator import FrameStacker, GlobalCMVN, LogMelFeaturizer, ShiftResNetClassifier
from .network import ModelConfig, ResNet, build_resnet18, build_resnet_toy
from .trainer import TrainConfig, train

__all__ = [
    "FrameStacker", "GlobalCMVN", "LogMelFeaturizer", "ModelConfig", "ResNet", "ShiftResNetClassifier",
    "TrainConfig", "build_resnet18", "build_resnet_toy", "train",
]
