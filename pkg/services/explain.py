"""
Explainability Service
GradCAM heatmaps for the convolutional classifiers, overlays and comparison sheets
"""
from dataclasses import dataclass, field
import logging
import os
from typing import Callable, Dict, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from core.exceptions import ValidationError
from utils.image_io import as_gray

logger = logging.getLogger(__name__)


@dataclass
class CAMHeatmap:
    weights: np.ndarray
    heatmap: np.ndarray
    output: float
    target: str
    degenerate: bool = False
    layer: str = ""
    raw: Optional[np.ndarray] = field(default=None, repr=False)


def gradcam(model: nn.Module, image: torch.Tensor, target: int = 0, layer: Optional[str] = None,
            forward: Optional[Callable[[torch.Tensor], torch.Tensor]] = None) -> CAMHeatmap:
    """
    Gradient-weighted class activation map of `layer` for output index `target`.

    Channel weights are the spatial mean of d(output)/d(activation); the map is the rectified
    weighted sum of channels, bilinearly upsampled to the input and min-max normalized.
    An all-zero map is returned with degenerate=True.
    """
    layer = layer or getattr(model, "cam_layer", None)
    if layer is None:
        raise ValidationError("No GradCAM layer given and the model does not declare one")
    x = image.unsqueeze(0) if image.ndim == 3 else image
    if x.shape[0] != 1:
        raise ValidationError("gradcam explains one image at a time")
    module = model.get_submodule(layer)
    captured: Dict[str, torch.Tensor] = {}

    def keep_gradient(grad: torch.Tensor):
        captured["gradient"] = grad

    def on_forward(_module, _inputs, output):
        captured["activation"] = output
        output.register_hook(keep_gradient)

    handle = module.register_forward_hook(on_forward)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            x = x.detach().requires_grad_(True)
            out = forward(x) if forward is not None else model(x)
            out = out.reshape(1, -1)
            if not 0 <= target < out.shape[1]:
                raise ValidationError(f"Target index {target} outside model output of width {out.shape[1]}")
            score = out[0, target]
            model.zero_grad(set_to_none=True)
            score.backward()
    finally:
        handle.remove()
        model.train(was_training)

    activation = captured["activation"].detach()[0]
    gradient = captured["gradient"].detach()[0]
    weights = gradient.mean(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * activation).sum(dim=0))
    cam = F.interpolate(cam[None, None], size=tuple(x.shape[-2:]), mode="bilinear", align_corners=False)[0, 0]
    cam = cam.clamp(min=0.0)
    lo, hi = float(cam.min()), float(cam.max())
    degenerate = hi - lo <= 0.0
    heatmap = torch.zeros_like(cam) if degenerate else (cam - lo) / (hi - lo)
    return CAMHeatmap(
        weights=weights.cpu().numpy(),
        heatmap=heatmap.cpu().numpy(),
        output=float(score.detach()),
        target=str(target),
        degenerate=degenerate,
        layer=layer,
        raw=cam.cpu().numpy(),
    )


def signal_mass_ratio(heatmap: np.ndarray, mask: np.ndarray) -> float:
    """Share of heatmap mass inside `mask` divided by the mask's share of the area"""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    total = heatmap.sum()
    if total <= 0:
        return 0.0
    return float((heatmap[mask].sum() / total) / mask.mean())


def render_overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.4, colormap: str = "jet") -> np.ndarray:
    """RGB uint8 overlay; high attribution renders red-orange"""
    base = as_gray(np.asarray(image, dtype=np.float64))
    if base.shape != heatmap.shape:
        raise ValidationError("Heatmap and image sizes differ",
                              details={"image": list(base.shape), "heatmap": list(heatmap.shape)})
    colours = matplotlib.colormaps[colormap](np.clip(heatmap, 0.0, 1.0))[..., :3]
    blended = (1.0 - alpha) * np.repeat(base[..., None], 3, axis=-1) + alpha * colours
    return np.clip(np.rint(blended * 255.0), 0, 255).astype(np.uint8)


def save_heatmap(prefix: str, cam: CAMHeatmap, image: np.ndarray, alpha: float = 0.4,
                 colormap: str = "jet") -> Tuple[str, str]:
    """Writes <prefix>.npy (normalized heatmap) and <prefix>.png (overlay)"""
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    npy_path, png_path = f"{prefix}.npy", f"{prefix}.png"
    np.save(npy_path, cam.heatmap.astype(np.float32))
    Image.fromarray(render_overlay(image, cam.heatmap, alpha, colormap)).save(png_path, format="PNG")
    return npy_path, png_path


SHEET_COLUMNS = (("real", "POS"), ("real", "NEG"), ("synthetic", "POS"), ("synthetic", "NEG"))


def cam_sheet(cells: Dict[Tuple[str, str, str], Tuple[np.ndarray, CAMHeatmap]], modalities: Sequence[str],
              path: str, alpha: float = 0.4, colormap: str = "jet") -> str:
    """Grid of overlays: one row per modality, columns real/synthetic x POS/NEG"""
    fig, axes = plt.subplots(len(modalities), len(SHEET_COLUMNS),
                             figsize=(3 * len(SHEET_COLUMNS), 3 * len(modalities)), squeeze=False)
    for r, modality in enumerate(modalities):
        for c, (source, label) in enumerate(SHEET_COLUMNS):
            ax = axes[r][c]
            ax.axis("off")
            cell = cells.get((modality, source, label))
            if r == 0:
                ax.set_title(f"{source} {label}", fontsize=10)
            if cell is None:
                continue
            image, cam = cell
            ax.imshow(render_overlay(image, cam.heatmap, alpha, colormap))
            if c == 0:
                ax.text(-0.05, 0.5, modality, transform=ax.transAxes, rotation=90, va="center", ha="right")
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
