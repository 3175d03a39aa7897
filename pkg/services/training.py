"""
Training Utilities
Seeding, loaders, early stopping and batched inference shared by the filter and the classifiers
"""
import copy
import logging
import random
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset, Sampler

logger = logging.getLogger(__name__)

Device = Union[str, torch.device]


def seed_everything(seed: int, deterministic: bool = True):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        if torch.backends.cudnn.is_available():
            torch.backends.cudnn.benchmark = False


def make_loader(dataset: Dataset, batch_size: int, seed: int, shuffle: bool = True,
                sampler: Optional[Sampler] = None, workers: int = 0) -> DataLoader:
    generator = torch.Generator().manual_seed(seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle if sampler is None else False,
        sampler=sampler,
        generator=generator,
        num_workers=workers,
    )


def clone_state(model: nn.Module) -> Dict[str, torch.Tensor]:
    return copy.deepcopy({k: v.detach().cpu() for k, v in model.state_dict().items()})


class EarlyStopping:
    """Tracks the best validation loss and how long it has gone without improving"""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = -1
        self.best_state: Optional[Dict[str, torch.Tensor]] = None
        self.stale = 0

    def step(self, epoch: int, val_loss: float, model: nn.Module) -> bool:
        """Record one epoch; returns True when the loss improved"""
        if val_loss < self.best - self.min_delta:
            self.best, self.best_epoch, self.stale = val_loss, epoch, 0
            self.best_state = clone_state(model)
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience

    def restore(self, model: nn.Module):
        if self.best_state is not None:
            model.load_state_dict(self.best_state)


@torch.no_grad()
def predict_outputs(model: Callable[[torch.Tensor], torch.Tensor], dataset: Dataset, device: Device,
                    batch_size: int = 64, transform: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
                    workers: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Raw outputs for every item in dataset order, with their targets"""
    if isinstance(model, nn.Module):
        model.eval()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=workers)
    outputs, targets = [], []
    for images, target, _ in loader:
        images = images.to(device)
        if transform is not None:
            images = transform(images)
        outputs.append(model(images).detach().cpu())
        targets.append(target)
    if not outputs:
        return np.empty((0,)), np.empty((0,))
    return torch.cat(outputs).numpy(), torch.cat(targets).numpy()
