"""Self-supervised multi-task feature learning on procedural synthetic imagery.

Pretrains a shared convolutional trunk by predicting instance contours,
log-depth, and surface normals from rendered scenes, with an adversarial
feature critic aligning synthetic and real feature distributions. Ships a
scene renderer, the training loop, backbone export, and evaluation tools.
"""

__version__ = "0.1.0"

from .arch import ArchitectureConfig, LayerSpec, build_default_alexnet, build_vgg16_variant
from .losses import LossWeights, depth_loss, edge_loss, normal_loss
from .network import MultiTaskModel, build_model
from .scenegen import GenConfig, generate_dataset, generate_scene, render
from .trainer import TrainConfig, train

__all__ = [
    "ArchitectureConfig",
    "GenConfig",
    "LayerSpec",
    "LossWeights",
    "MultiTaskModel",
    "TrainConfig",
    "build_default_alexnet",
    "build_model",
    "build_vgg16_variant",
    "depth_loss",
    "edge_loss",
    "generate_dataset",
    "generate_scene",
    "normal_loss",
    "render",
    "train",
]
