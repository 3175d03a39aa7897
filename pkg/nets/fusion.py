"""
Late-fusion head over frozen unimodal scores and optional metadata
"""
from typing import Sequence

import torch
from torch import nn


class FusionHead(nn.Module):
    """Three fully connected layers ending in one logit for p_neg"""

    def __init__(self, input_width: int, hidden: Sequence[int] = (16, 8)):
        super().__init__()
        h1, h2 = hidden
        self.input_width = input_width
        self.net = nn.Sequential(
            nn.Linear(input_width, h1),
            nn.ReLU(),
            nn.Linear(h1, h2),
            nn.ReLU(),
            nn.Linear(h2, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_width:
            raise ValueError(f"Fusion input width {x.shape[-1]} != {self.input_width}")
        return self.net(x)
