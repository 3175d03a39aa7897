"""
Diffusion Service
Noise schedule, closed-form forward process, noise-prediction training and class-conditional sampling
"""
from dataclasses import dataclass
import logging
import os
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from core.config import SYNTHETIC_FAMILY_ID
from core.exceptions import ConfigurationError, MissingArtifactError, NumericalError, ValidationError
from models.experiment import DDPMConfig
from models.records import Label, ManifestEntry, Modality, Provenance
from nets.denoiser import Denoiser
from utils.image_io import write_png
from utils.structured_logging import training_logger

logger = logging.getLogger(__name__)

NoisePredictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]

SAMPLE_STATUS_PENDING = "pending"


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step variances beta[t] and the derived alpha, alpha_bar (float64)"""
    betas: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def alpha_bars_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bars[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        """beta_tilde[t] = beta[t] (1 - alpha_bar[t-1]) / (1 - alpha_bar[t])"""
        return self.betas * (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars)

    @property
    def final_snr(self) -> float:
        ab = float(self.alpha_bars[-1])
        return ab / (1.0 - ab)

    def gather(self, values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """values[t] shaped to broadcast against `like` (N x ...)"""
        table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
        out = table[t.to(like.device)]
        return out.view(-1, *([1] * (like.ndim - 1)))

    def to_dict(self) -> Dict[str, float]:
        return {"T": self.T, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def build_schedule(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """
    Scaled-linear schedule: beta[t] = (sqrt(beta_start) + t/(T-1) (sqrt(beta_end) - sqrt(beta_start)))^2.

    Endpoints are exact. beta_start == beta_end gives a constant schedule.
    """
    if T < 2:
        raise ValidationError("Schedule needs at least 2 timesteps", details={"T": T})
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(
            "Schedule requires 0 < beta_start <= beta_end < 1",
            details={"beta_start": beta_start, "beta_end": beta_end},
        )
    frac = np.arange(T, dtype=np.float64) / (T - 1)
    betas = (np.sqrt(beta_start) + frac * (np.sqrt(beta_end) - np.sqrt(beta_start))) ** 2
    betas[0], betas[-1] = beta_start, beta_end
    return DiffusionSchedule(betas=betas)


def schedule_from_config(config: DDPMConfig) -> DiffusionSchedule:
    schedule = build_schedule(config.num_train_timesteps, config.beta_start, config.beta_end)
    if schedule.final_snr > config.max_final_snr:
        raise ConfigurationError(
            f"Final-step signal-to-noise {schedule.final_snr:.3g} exceeds ddpm.max_final_snr {config.max_final_snr}",
            field="ddpm.beta_end",
        )
    return schedule


def _timesteps(t: Union[int, torch.Tensor], n: int, schedule: DiffusionSchedule) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(n)
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= schedule.T):
        raise ValidationError(f"Timestep outside [0, {schedule.T})", details={"min": int(t.min()), "max": int(t.max())})
    return t


def q_sample(x0: torch.Tensor, t: Union[int, torch.Tensor], epsilon: torch.Tensor,
             schedule: DiffusionSchedule) -> torch.Tensor:
    """sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) epsilon"""
    if epsilon.shape != x0.shape:
        raise ValidationError("epsilon must have the shape of x0")
    t = _timesteps(t, x0.shape[0], schedule)
    ab = schedule.gather(schedule.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * epsilon


def forward_step(x_prev: torch.Tensor, t: Union[int, torch.Tensor], epsilon: torch.Tensor,
                 schedule: DiffusionSchedule) -> torch.Tensor:
    """One forward noising step: sqrt(alpha[t]) x_{t-1} + sqrt(beta[t]) epsilon"""
    t = _timesteps(t, x_prev.shape[0], schedule)
    alpha = schedule.gather(schedule.alphas, t, x_prev)
    beta = schedule.gather(schedule.betas, t, x_prev)
    return alpha.sqrt() * x_prev + beta.sqrt() * epsilon


def train_step(model: NoisePredictor, x0: torch.Tensor, labels: torch.Tensor, schedule: DiffusionSchedule,
               generator: torch.Generator, optimizer: Optional[torch.optim.Optimizer] = None) -> float:
    """
    One noise-prediction step: uniform t, standard-normal epsilon, MSE between predicted and true noise.
    Applies one optimizer step when an optimizer is given.

    Raises:
        NumericalError: the loss is not finite
    """
    n = x0.shape[0]
    t = torch.randint(0, schedule.T, (n,), generator=generator).to(x0.device)
    epsilon = torch.randn(x0.shape, generator=generator, dtype=x0.dtype).to(x0.device)
    x_t = q_sample(x0, t, epsilon, schedule)
    prediction = model(x_t, t, labels)
    loss = F.mse_loss(prediction, epsilon)
    if not torch.isfinite(loss):
        raise NumericalError(
            "Denoiser loss is not finite",
            diagnostic={"loss": float(loss.detach()), "t_min": int(t.min()), "t_max": int(t.max())},
        )
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def sample(model: NoisePredictor, schedule: DiffusionSchedule, class_label: int, n: int,
           generator: torch.Generator, shape: Tuple[int, int, int], batch_size: int = 32,
           device: Union[str, torch.device] = "cpu", progress: bool = False) -> torch.Tensor:
    """
    Ancestral sampling from pure noise under one class label.

    Noise is drawn from `generator` on the CPU, so outputs depend only on its state.
    Returns an n x C x H x W tensor clipped to [0, 1].
    """
    if n == 0:
        return torch.empty((0, *shape))
    sqrt_recip_alpha = np.sqrt(1.0 / schedule.alphas)
    eps_coef = schedule.betas / np.sqrt(1.0 - schedule.alpha_bars)
    sigma = np.sqrt(schedule.posterior_variance)
    outputs = []
    for start in range(0, n, batch_size):
        m = min(batch_size, n - start)
        x = torch.randn((m, *shape), generator=generator).to(device)
        labels = torch.full((m,), int(class_label), dtype=torch.long, device=device)
        steps = tqdm(reversed(range(schedule.T)), total=schedule.T, desc="sampling", leave=False, disable=not progress)
        for t in steps:
            t_vec = torch.full((m,), t, dtype=torch.long, device=device)
            eps = model(x, t_vec, labels)
            mean = sqrt_recip_alpha[t] * (x - eps_coef[t] * eps)
            if t > 0:
                x = mean + sigma[t] * torch.randn((m, *shape), generator=generator).to(device)
            else:
                x = mean
        outputs.append(x.clamp(0.0, 1.0).cpu())
    return torch.cat(outputs)


def _gray(batch: torch.Tensor) -> torch.Tensor:
    return batch.mean(dim=1, keepdim=True) if batch.shape[1] != 1 else batch


def train_ddpm(dataset: Dataset, config: DDPMConfig, sample_size: int, device: Union[str, torch.device] = "cpu",
               modality: Optional[str] = None, workers: int = 0) -> Tuple[Denoiser, DiffusionSchedule, List[float]]:
    """
    Train a class-conditional denoiser on one modality.

    `dataset` yields (image 3xHxW in [0, 1], class index, record index). Adam with cosine
    annealing over the epochs. Returns the model, its schedule and the per-epoch mean loss.
    """
    if len(dataset) == 0:
        raise ValidationError("DDPM training set is empty", details={"modality": modality})
    schedule = schedule_from_config(config)
    torch.manual_seed(config.seed)
    model = Denoiser(config.denoiser, sample_size).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
    loader_gen = torch.Generator().manual_seed(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed + 1)
    loader = DataLoader(dataset, batch_size=config.batch_size, shuffle=True, generator=loader_gen,
                        num_workers=workers, drop_last=False)

    history = []
    model.train()
    for epoch in tqdm(range(config.epochs), desc=f"ddpm {modality or ''}".strip(), leave=False, disable=None):
        if hasattr(dataset, "set_epoch"):
            dataset.set_epoch(epoch)
        started = time.time()
        losses = []
        for images, targets, _ in loader:
            x0 = _gray(images).to(device)
            labels = targets.long().to(device)
            losses.append(train_step(model, x0, labels, schedule, noise_gen, optimizer))
        scheduler.step()
        epoch_loss = float(np.mean(losses))
        history.append(epoch_loss)
        training_logger.log_epoch("train-ddpm", epoch, epoch_loss, modality=modality)
        logger.debug(f"DDPM epoch {epoch} took {time.time() - started:.2f}s")
    model.eval()
    return model, schedule, history


def save_checkpoint(path: str, model: Denoiser, config: DDPMConfig, schedule: DiffusionSchedule,
                    sample_size: int, modality: Optional[str] = None, history: Optional[Sequence[float]] = None) -> str:
    """Self-describing checkpoint: config, schedule parameters and weights"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save({
        "kind": "ddpm",
        "modality": modality,
        "config": config.model_dump(mode="json"),
        "schedule": schedule.to_dict(),
        "sample_size": sample_size,
        "history": list(history or []),
        "state_dict": model.state_dict(),
    }, path)
    return path


def load_checkpoint(path: str, device: Union[str, torch.device] = "cpu") -> Tuple[Denoiser, DiffusionSchedule, DDPMConfig]:
    if not os.path.exists(path):
        raise MissingArtifactError(f"DDPM checkpoint not found: {path}", artifact=path)
    blob = torch.load(path, map_location=device, weights_only=False)
    config = DDPMConfig.model_validate(blob["config"])
    s = blob["schedule"]
    schedule = build_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))
    model = Denoiser(config.denoiser, int(blob["sample_size"]))
    model.load_state_dict(blob["state_dict"])
    return model.to(device).eval(), schedule, config


def sample_filename(modality: Modality, label: Label, index: int, status: str) -> str:
    return f"{Modality(modality).value}_{Label(label).value}_{index:05d}_{status}.png"


def write_samples(images: torch.Tensor, modality: Modality, label: Label, out_dir: str, root: str,
                  start_index: int = 0, status: str = SAMPLE_STATUS_PENDING) -> List[ManifestEntry]:
    """
    Write generated images as PNG and describe them as SYNTHETIC manifest entries.
    Paths in the entries are relative to `root`.
    """
    modality, label = Modality(modality), Label(label)
    entries = []
    for offset, image in enumerate(images):
        index = start_index + offset
        full = os.path.join(out_dir, sample_filename(modality, label, index, status))
        write_png(full, image.squeeze(0).cpu().numpy())
        image_id = f"{modality.value}_{label.value}_{index:05d}"
        entries.append(ManifestEntry(
            path=os.path.relpath(full, root),
            family_id=SYNTHETIC_FAMILY_ID,
            patient_id=image_id,
            eye_id=image_id,
            modality=modality,
            label=label,
            provenance=Provenance.SYNTHETIC,
        ))
    return entries
