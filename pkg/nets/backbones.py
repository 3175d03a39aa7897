"""
Convolutional feature extractors shared by the modality filter and the AmyloidPET classifiers
"""
import logging
from typing import Tuple

import torch
from torch import nn
from torchvision.models import EfficientNet_B0_Weights, efficientnet_b0

logger = logging.getLogger(__name__)

# Index into `features` whose output feeds GradCAM
CAM_LAYER = {
    "efficientnet_b0": "features.8",
    "small_cnn": "features.3",
}

# FiLM sits after the stem and between the second and third blocks
FILM_POINTS = {
    "efficientnet_b0": (0, 2),
    "small_cnn": (0, 2),
}


def _conv_block(c_in: int, c_out: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


def small_cnn_features() -> Tuple[nn.Sequential, int]:
    """Four-stage CNN for 64-pixel runs"""
    features = nn.Sequential(
        nn.Sequential(
            nn.Conv2d(3, 16, kernel_size=3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
        ),
        _conv_block(16, 32, stride=2),
        _conv_block(32, 64, stride=2),
        _conv_block(64, 128, stride=1),
    )
    return features, 128


def efficientnet_features(pretrained: bool) -> Tuple[nn.Sequential, int]:
    """EfficientNet-B0 feature stack; falls back to random init when weights cannot be loaded"""
    model = None
    if pretrained:
        try:
            model = efficientnet_b0(weights=EfficientNet_B0_Weights.IMAGENET1K_V1)
        except Exception as e:
            logger.warning(f"ImageNet weights unavailable, using random init: {e}")
    if model is None:
        model = efficientnet_b0(weights=None)
    return model.features, model.classifier[-1].in_features


def build_features(name: str, pretrained: bool = False) -> Tuple[nn.Sequential, int]:
    if name == "efficientnet_b0":
        return efficientnet_features(pretrained)
    if name == "small_cnn":
        return small_cnn_features()
    raise ValueError(f"Unknown backbone: {name}")


def stage_channels(features: nn.Sequential, trial_side: int = 64) -> Tuple[int, ...]:
    """Output channel count of every stage, from one dry forward pass"""
    was_training = features.training
    features.eval()
    channels = []
    with torch.no_grad():
        x = torch.zeros(1, 3, trial_side, trial_side)
        for stage in features:
            x = stage(x)
            channels.append(x.shape[1])
    features.train(was_training)
    return tuple(channels)


class ConvClassifier(nn.Module):
    """Backbone + pooled head; returns logits of shape (N, n_outputs)"""

    def __init__(self, backbone: str, n_outputs: int, pretrained: bool = False, dropout: float = 0.2):
        super().__init__()
        self.backbone_name = backbone
        self.features, width = build_features(backbone, pretrained)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Sequential(nn.Flatten(), nn.Dropout(dropout), nn.Linear(width, n_outputs))

    @property
    def cam_layer(self) -> str:
        return CAM_LAYER[self.backbone_name]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.pool(self.features(x)))
