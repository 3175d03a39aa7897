"""
Modality Filter Service
Multiclass modality recognizer used as a realism gate for generated images
"""
import json
import logging
import os
from collections import defaultdict
from typing import Dict, Iterable, Iterator, List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import Dataset
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support
from tqdm import tqdm

from core.exceptions import MissingArtifactError, ValidationError
from models.experiment import FilterConfig, GateConfig
from models.records import FilterDecision, Label, Modality
from nets.backbones import CAM_LAYER, build_features
from services.dataman import normalize_for_backbone
from services.training import EarlyStopping, make_loader, predict_outputs
from utils.structured_logging import training_logger

logger = logging.getLogger(__name__)

REASON_ACCEPTED = "accepted"
REASON_WRONG_MODALITY = "wrong_modality"
REASON_BELOW_THRESHOLD = "below_threshold"
REASON_BUDGET = "budget"


class FilterNet(nn.Module):
    """Backbone features, then FC(embed_dim) -> ReLU -> FC(n_modalities); the first FC output is the embedding"""

    def __init__(self, backbone: str, n_classes: int, embed_dim: int = 128, pretrained: bool = False,
                 dropout: float = 0.2):
        super().__init__()
        self.backbone_name = backbone
        self.features, width = build_features(backbone, pretrained)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Linear(width, embed_dim)
        self.dropout = nn.Dropout(dropout)
        self.fc2 = nn.Linear(embed_dim, n_classes)

    @property
    def cam_layer(self) -> str:
        return CAM_LAYER[self.backbone_name]

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc1(torch.flatten(self.pool(self.features(x)), 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.dropout(F.relu(self.embed(x))))


class FilterPredictor:
    """Inference wrapper: normalization, batching and the modality order of the output"""

    def __init__(self, model: FilterNet, modalities: Sequence[Modality], pretrained: bool,
                 device: Union[str, torch.device] = "cpu", batch_size: int = 64):
        self.model = model.to(device).eval()
        self.modalities = [Modality(m) for m in modalities]
        self.pretrained = pretrained
        self.device = device
        self.batch_size = batch_size

    def _prepare(self, images: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
        batch = torch.as_tensor(np.asarray(images, dtype=np.float32)) if not torch.is_tensor(images) else images
        if batch.ndim == 4 and batch.shape[-1] == 3 and batch.shape[1] != 3:
            batch = batch.permute(0, 3, 1, 2)
        return normalize_for_backbone(batch.float().to(self.device), self.pretrained)

    @torch.no_grad()
    def predict_proba(self, images: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
        """Softmax over modalities for an N x H x W x 3 (or N x 3 x H x W) batch"""
        out = [F.softmax(self.model(self._prepare(images[i:i + self.batch_size])), dim=1).cpu()
               for i in range(0, len(images), self.batch_size)]
        return torch.cat(out).numpy() if out else np.empty((0, len(self.modalities)))

    @torch.no_grad()
    def embed(self, images: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
        return self.model.embed(self._prepare(images))


def _dataset_targets(dataset: Dataset) -> np.ndarray:
    return np.array([int(dataset.target_fn(e)) for e in dataset.entries])


def train_filter(train_ds: Dataset, val_ds: Dataset, modalities: Sequence[Modality], config: FilterConfig,
                 device: Union[str, torch.device] = "cpu", workers: int = 0) -> Tuple[FilterNet, List[Dict[str, float]]]:
    """
    Train the modality classifier. Datasets yield the modality index as target.

    Adam with weight decay and no scheduler; the weights of the epoch with the lowest
    validation loss are kept.

    Raises:
        ValidationError: fewer than two modalities, or a modality without training images
    """
    modalities = [Modality(m) for m in modalities]
    if len(modalities) < 2:
        raise ValidationError("The modality filter needs at least two modalities",
                              details={"modalities": [m.value for m in modalities]})
    counts = np.bincount(_dataset_targets(train_ds), minlength=len(modalities))
    empty = [modalities[i].value for i, c in enumerate(counts) if c == 0]
    if empty:
        raise ValidationError(f"No training images for modalities {empty}", details={"empty": empty})

    torch.manual_seed(config.seed)
    model = FilterNet(config.backbone, len(modalities), config.embed_dim, config.pretrained).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    loader = make_loader(train_ds, config.batch_size, config.seed, workers=workers)
    stopper = EarlyStopping(patience=config.epochs)
    history = []
    for epoch in tqdm(range(config.epochs), desc="filter", leave=False, disable=None):
        if hasattr(train_ds, "set_epoch"):
            train_ds.set_epoch(epoch)
        model.train()
        losses = []
        for images, targets, _ in loader:
            images = normalize_for_backbone(images.to(device), config.pretrained)
            loss = F.cross_entropy(model(images), targets.long().to(device))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        logits, targets = predict_outputs(
            model, val_ds, device, config.batch_size,
            transform=lambda x: normalize_for_backbone(x, config.pretrained), workers=workers,
        )
        val_loss = float(F.cross_entropy(torch.from_numpy(logits), torch.from_numpy(targets).long())) if len(targets) else float(np.mean(losses))
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_loss": val_loss})
        training_logger.log_epoch("train-filter", epoch, float(np.mean(losses)), val_loss)
        stopper.step(epoch, val_loss, model)
    stopper.restore(model)
    training_logger.log_checkpoint("train-filter", stopper.best_epoch, "", "lowest validation loss")
    return model.eval(), history


def mcc_multiclass(confusion: np.ndarray) -> float:
    """
    Multiclass Matthews correlation from a K x K count matrix (rows truth, columns prediction);
    0 when either marginal is degenerate.
    """
    c = np.asarray(confusion, dtype=np.float64)
    if c.size == 0 or c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValidationError("MCC needs a nonempty square confusion matrix", details={"shape": list(c.shape)})
    if np.any(c < 0):
        raise ValidationError("Confusion counts must be nonnegative")
    s = c.sum()
    if s == 0:
        raise ValidationError("Confusion matrix holds no observations")
    true_k = c.sum(axis=1)
    pred_k = c.sum(axis=0)
    correct = np.trace(c)
    cov_tp = correct * s - true_k @ pred_k
    cov_pp = s * s - pred_k @ pred_k
    cov_tt = s * s - true_k @ true_k
    denom = np.sqrt(cov_tt * cov_pp)
    if denom == 0:
        return 0.0
    return float(np.clip(cov_tp / denom, -1.0, 1.0))


def classification_table(y_true: Sequence[int], y_pred: Sequence[int],
                         modalities: Sequence[Modality]) -> Dict[str, object]:
    """Per-modality precision/recall/F1, weighted averages, MCC and the confusion matrix"""
    labels = list(range(len(modalities)))
    cm = confusion_matrix(y_true, y_pred, labels=labels)
    precision, recall, f1, support = precision_recall_fscore_support(
        y_true, y_pred, labels=labels, zero_division=0,
    )
    wp, wr, wf, _ = precision_recall_fscore_support(
        y_true, y_pred, labels=labels, average="weighted", zero_division=0,
    )
    rows = [
        {"modality": Modality(m).value, "precision": float(p), "recall": float(r), "f1": float(f), "support": int(n)}
        for m, p, r, f, n in zip(modalities, precision, recall, f1, support)
    ]
    return {
        "rows": rows,
        "weighted": {"precision": float(wp), "recall": float(wr), "f1": float(wf)},
        "mcc": mcc_multiclass(cm),
        "confusion": cm.tolist(),
        "modalities": [Modality(m).value for m in modalities],
    }


def evaluate_filter(model: FilterNet, dataset: Dataset, modalities: Sequence[Modality], pretrained: bool,
                    device: Union[str, torch.device] = "cpu", batch_size: int = 64) -> Dict[str, object]:
    logits, targets = predict_outputs(
        model, dataset, device, batch_size, transform=lambda x: normalize_for_backbone(x, pretrained),
    )
    if len(targets) == 0:
        raise ValidationError("Filter evaluation set is empty")
    return classification_table(targets.astype(int), logits.argmax(axis=1), modalities)


def decide(image_id: str, generation_modality: Modality, label: Label, probabilities: Sequence[float],
           modalities: Sequence[Modality], gate: GateConfig) -> FilterDecision:
    """Correct-modality and confidence check for one image, before any budget is applied"""
    generation_modality = Modality(generation_modality)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    predicted = Modality(modalities[int(np.argmax(probabilities))])
    confidence = {Modality(m).value: float(p) for m, p in zip(modalities, probabilities)}
    threshold = gate.threshold_for(generation_modality)
    if predicted != generation_modality:
        accepted, reason = False, REASON_WRONG_MODALITY
    elif threshold is not None and confidence[predicted.value] < threshold:
        accepted, reason = False, REASON_BELOW_THRESHOLD
    else:
        accepted, reason = True, REASON_ACCEPTED
    return FilterDecision(
        image_id=image_id,
        generation_modality=generation_modality,
        label=label,
        predicted_modality=predicted,
        confidence=confidence,
        accepted=accepted,
        threshold_used=threshold,
        reason=reason,
    )


def apply_gate(candidates: Iterable[Tuple[str, Modality, Label, Sequence[float]]],
               modalities: Sequence[Modality], gate: GateConfig) -> List[FilterDecision]:
    """
    Sequential fold over (image_id, generation modality, label, probabilities): an image that
    passes is accepted while its (modality, label) budget lasts, later ones are rejected with
    reason 'budget'.
    """
    accepted_count: Dict[Tuple[Modality, Label], int] = defaultdict(int)
    decisions = []
    for image_id, generation_modality, label, probabilities in candidates:
        decision = decide(image_id, generation_modality, label, probabilities, modalities, gate)
        key = (decision.generation_modality, Label(label))
        if decision.accepted:
            if accepted_count[key] >= gate.budget:
                decision = decision.model_copy(update={"accepted": False, "reason": REASON_BUDGET})
            else:
                accepted_count[key] += 1
        decisions.append(decision)
    return decisions


def _chunks(stream: Iterable, size: int) -> Iterator[List]:
    chunk = []
    for item in stream:
        chunk.append(item)
        if len(chunk) == size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def gate_synthetic(stream: Iterable[Tuple[str, np.ndarray, Modality, Label]], predictor: FilterPredictor,
                   gate: GateConfig, batch_size: int = 64) -> Tuple[List[str], List[FilterDecision]]:
    """
    Gate a stream of (image_id, preprocessed image, generation modality, label).

    Inference runs in batches; decisions follow input order. Returns the accepted ids and
    every decision.
    """
    def candidates():
        for chunk in _chunks(stream, batch_size):
            probs = predictor.predict_proba(np.stack([item[1] for item in chunk]))
            for (image_id, _, modality, label), p in zip(chunk, probs):
                yield image_id, modality, label, p

    decisions = apply_gate(candidates(), predictor.modalities, gate)
    summary: Dict[Tuple[str, str], List[int]] = defaultdict(lambda: [0, 0])
    for d in decisions:
        summary[(d.generation_modality.value, d.label.value)][0 if d.accepted else 1] += 1
    for (modality, label), (n_acc, n_rej) in sorted(summary.items()):
        training_logger.log_gate_summary(modality, label, n_acc, n_rej)
    return [d.image_id for d in decisions if d.accepted], decisions


def write_rejection_log(decisions: Sequence[FilterDecision], path: str) -> str:
    """One JSON object per decision"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps({
                "image_id": d.image_id,
                "generation_modality": d.generation_modality.value,
                "label": d.label.value,
                "predicted": d.predicted_modality.value,
                "confidence": d.predicted_confidence,
                "threshold": d.threshold_used,
                "decision": "accept" if d.accepted else "reject",
                "reason": d.reason,
            }) + "\n")
    return path


def read_rejection_log(path: str) -> List[Dict[str, object]]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_filter(path: str, model: FilterNet, config: FilterConfig, modalities: Sequence[Modality]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save({
        "kind": "filter",
        "config": config.model_dump(mode="json"),
        "modalities": [Modality(m).value for m in modalities],
        "cam_layer": model.cam_layer,
        "state_dict": model.state_dict(),
    }, path)
    return path


def load_filter(path: str, device: Union[str, torch.device] = "cpu") -> FilterPredictor:
    if not os.path.exists(path):
        raise MissingArtifactError(f"Filter checkpoint not found: {path}", artifact=path)
    blob = torch.load(path, map_location=device, weights_only=False)
    config = FilterConfig.model_validate(blob["config"])
    modalities = [Modality(m) for m in blob["modalities"]]
    model = FilterNet(config.backbone, len(modalities), config.embed_dim, pretrained=False)
    model.load_state_dict(blob["state_dict"])
    return FilterPredictor(model, modalities, config.pretrained, device, config.batch_size)
