"""
Feature-wise linear modulation conditioned on the modality-filter embedding
"""
import logging

import torch
from torch import nn

from nets.backbones import CAM_LAYER, FILM_POINTS, build_features, stage_channels

logger = logging.getLogger(__name__)


def film_modulate(activations: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """scale * activations + bias, broadcast per channel; scale/bias are (C,) or (N, C)"""
    channels = activations.shape[1]
    if scale.shape[-1] != channels or bias.shape[-1] != channels:
        raise ValueError(
            f"FiLM width mismatch: activations have {channels} channels, "
            f"scale {scale.shape[-1]}, bias {bias.shape[-1]}"
        )
    extra = (1,) * (activations.ndim - 2)
    if scale.ndim == 1:
        scale = scale.unsqueeze(0)
    if bias.ndim == 1:
        bias = bias.unsqueeze(0)
    return scale.view(*scale.shape, *extra) * activations + bias.view(*bias.shape, *extra)


class FiLMLayer(nn.Module):
    """Maps an embedding to per-channel (scale, bias); starts as the identity"""

    def __init__(self, embed_dim: int, channels: int):
        super().__init__()
        self.channels = channels
        self.proj = nn.Linear(embed_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        with torch.no_grad():
            self.proj.bias.copy_(torch.cat([torch.ones(channels), torch.zeros(channels)]))

    def forward(self, activations: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        scale, bias = self.proj(embedding).split(self.channels, dim=-1)
        return film_modulate(activations, scale, bias)


class ModalityAwareClassifier(nn.Module):
    """One backbone for every modality, modulated by the filter embedding of the input image"""

    def __init__(self, backbone: str, embed_dim: int, pretrained: bool = False, dropout: float = 0.2):
        super().__init__()
        self.backbone_name = backbone
        self.features, width = build_features(backbone, pretrained)
        channels = stage_channels(self.features)
        self.film_points = FILM_POINTS[backbone]
        self.films = nn.ModuleDict({str(i): FiLMLayer(embed_dim, channels[i]) for i in self.film_points})
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Sequential(nn.Flatten(), nn.Dropout(dropout), nn.Linear(width, 1))

    @property
    def cam_layer(self) -> str:
        return CAM_LAYER[self.backbone_name]

    def forward(self, x: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        for i, stage in enumerate(self.features):
            x = stage(x)
            if str(i) in self.films:
                x = self.films[str(i)](x, embedding)
        return self.head(self.pool(x))
