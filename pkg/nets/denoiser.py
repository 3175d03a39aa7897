"""
Class-conditional noise-prediction network
"""
from dataclasses import dataclass
import logging

import torch
from torch import nn
from diffusers import UNet2DModel

from models.experiment import DenoiserConfig

logger = logging.getLogger(__name__)


@dataclass
class ConditionEmbedding:
    """Timestep and class-label embeddings; the UNet consumes their sum"""
    timestep: torch.Tensor
    label: torch.Tensor

    @property
    def combined(self) -> torch.Tensor:
        return self.timestep + self.label


class Denoiser(nn.Module):
    """
    UNet that predicts the noise in x_t given t and a class label.

    Plain residual blocks at every level except the deepest, which adds self-attention
    with `attention_head_channels` channels per head. The class embedding has the width of
    the timestep embedding and is added to it.
    """

    def __init__(self, config: DenoiserConfig, sample_size: int):
        super().__init__()
        self.config = config
        levels = len(config.block_channels)
        down = ["DownBlock2D"] * (levels - 1) + ["AttnDownBlock2D"]
        up = ["AttnUpBlock2D"] + ["UpBlock2D"] * (levels - 1)
        self.unet = UNet2DModel(
            sample_size=sample_size,
            in_channels=config.in_channels,
            out_channels=config.in_channels,
            layers_per_block=config.layers_per_block,
            block_out_channels=tuple(config.block_channels),
            down_block_types=tuple(down),
            up_block_types=tuple(up),
            attention_head_dim=config.attention_head_channels,
            norm_num_groups=config.norm_num_groups,
            num_class_embeds=config.num_classes,
            time_embedding_dim=config.embedding_width,
        )

    def forward(self, x: torch.Tensor, t: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return self.unet(x, t, class_labels=labels).sample

    def condition_embedding(self, t: torch.Tensor, labels: torch.Tensor) -> ConditionEmbedding:
        """The embeddings the UNet adds together before its residual blocks"""
        t = torch.as_tensor(t, device=labels.device)
        if t.ndim == 0:
            t = t.expand(labels.shape[0])
        t_proj = self.unet.time_proj(t).to(dtype=self.unet.dtype)
        timestep = self.unet.time_embedding(t_proj)
        label = self.unet.class_embedding(labels).to(dtype=self.unet.dtype)
        if timestep.shape != label.shape:
            raise ValueError(f"Embedding widths differ: {tuple(timestep.shape)} vs {tuple(label.shape)}")
        return ConditionEmbedding(timestep=timestep, label=label)
