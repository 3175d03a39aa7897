"""
Classification Service
Unimodal AmyloidPET classifiers under three training regimes, the FiLM variant and late fusion
"""
import csv
import logging
import os
from collections import defaultdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.utils.data import Dataset, WeightedRandomSampler
from tqdm import tqdm

from core.exceptions import DataIntegrityError, MissingArtifactError, ValidationError
from models.experiment import FiLMConfig, FusionConfig, UnimodalConfig
from models.records import Label, MetricsReport, MetadataRecord, Modality, PIPELINE_MODALITIES, PredictionRecord, TrainRegime
from nets.backbones import ConvClassifier
from nets.film import ModalityAwareClassifier
from nets.fusion import FusionHead
from services.dataman import encode_metadata
from services.evalkit import evaluate_scores
from services.training import EarlyStopping, make_loader, predict_outputs
from utils.structured_logging import training_logger

logger = logging.getLogger(__name__)

Device = Union[str, torch.device]

PREDICTION_FIELDS = ("eye_id", "modality", "p_neg", "label", "age_scaled", "sex_code")
FOCAL_EPS = 1e-7


def focal_loss(p: torch.Tensor, y: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """
    Mean of -alpha (1 - p_t)^gamma log(p_t) with p_t = p where y = 1, else 1 - p.
    Probabilities are clamped to [eps, 1 - eps].
    """
    if gamma < 0 or not 0 < alpha <= 1:
        raise ValidationError("focal loss needs gamma >= 0 and alpha in (0, 1]",
                              details={"gamma": gamma, "alpha": alpha})
    if not torch.all(torch.isfinite(p)) or torch.any(p < 0) or torch.any(p > 1):
        raise ValidationError("focal loss probabilities must lie in [0, 1]")
    p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)
    y = y.to(p.dtype)
    p_t = torch.where(y >= 0.5, p, 1.0 - p)
    return (-alpha * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def sampler_weights(labels: Sequence[int]) -> np.ndarray:
    """Per-record weight 1 / count(class of record)"""
    labels = np.asarray(labels).astype(np.int64)
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise ValidationError("Weighted sampling needs both classes in the training set",
                              details={"classes": classes.tolist()})
    per_class = dict(zip(classes.tolist(), (1.0 / counts).tolist()))
    return np.array([per_class[lb] for lb in labels.tolist()], dtype=np.float64)


def balanced_sampler(labels: Sequence[int], seed: int) -> WeightedRandomSampler:
    weights = sampler_weights(labels)
    return WeightedRandomSampler(
        torch.as_tensor(weights, dtype=torch.double), num_samples=len(weights), replacement=True,
        generator=torch.Generator().manual_seed(seed),
    )


def negative_target(entry) -> float:
    return Label(entry.label).negative_target


def _class_labels(dataset: Dataset) -> List[int]:
    return [int(round(dataset.target_fn(e))) for e in dataset.entries]


def freeze(model: nn.Module) -> nn.Module:
    for param in model.parameters():
        param.requires_grad_(False)
    return model.eval()


def _fit(model: nn.Module, train_ds: Dataset, val_ds: Dataset, config: UnimodalConfig, epochs: int,
         device: Device, phase: str, modality: Optional[str], workers: int = 0) -> List[Dict[str, float]]:
    """Adam + StepLR with focal loss and balanced sampling; restores the best-validation weights"""
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=config.step_size, gamma=config.step_gamma)
    sampler = balanced_sampler(_class_labels(train_ds), config.seed)
    loader = make_loader(train_ds, config.batch_size, config.seed, sampler=sampler, workers=workers)
    stopper = EarlyStopping(config.patience)
    history = []
    for epoch in tqdm(range(epochs), desc=f"{phase} {modality or ''}".strip(), leave=False, disable=None):
        if hasattr(train_ds, "set_epoch"):
            train_ds.set_epoch(epoch)
        model.train()
        losses = []
        for images, targets, _ in loader:
            p_neg = torch.sigmoid(model(images.to(device))).squeeze(1)
            loss = focal_loss(p_neg, targets.to(device), config.focal_gamma, config.focal_alpha)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        scheduler.step()
        val_loss = _dataset_loss(model, val_ds, config, device)
        train_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "loss": train_loss, "val_loss": val_loss, "phase": phase})
        training_logger.log_epoch("train-unimodal", epoch, train_loss, val_loss, modality=modality, regime=phase)
        stopper.step(epoch, val_loss, model)
        if stopper.should_stop:
            logger.info(f"Early stop at epoch {epoch}", extra={"stage": "train-unimodal", "modality": modality})
            break
    stopper.restore(model)
    training_logger.log_checkpoint("train-unimodal", stopper.best_epoch, "", "best validation loss",
                                   modality=modality, regime=phase)
    return history


def _dataset_loss(model: nn.Module, dataset: Dataset, config: UnimodalConfig, device: Device) -> float:
    logits, targets = predict_outputs(model, dataset, device, config.batch_size)
    p_neg = torch.sigmoid(torch.from_numpy(logits)).squeeze(1)
    return float(focal_loss(p_neg, torch.from_numpy(targets), config.focal_gamma, config.focal_alpha))


def predict_proba(model: nn.Module, dataset: Dataset, device: Device = "cpu", batch_size: int = 64) -> np.ndarray:
    """p_neg for every item in dataset order"""
    logits, _ = predict_outputs(model, dataset, device, batch_size)
    if logits.size == 0:
        return np.empty(0)
    return torch.sigmoid(torch.from_numpy(logits)).squeeze(1).numpy().astype(np.float64)


def evaluate_model(model: nn.Module, dataset: Dataset, device: Device = "cpu", split: Optional[str] = None,
                   regime: Optional[str] = None, modality: Optional[str] = None) -> MetricsReport:
    p_neg = predict_proba(model, dataset, device)
    return evaluate_scores(p_neg, [e.label for e in dataset.entries], split, regime, modality)


def train_unimodal(train_ds: Dataset, val_ds: Dataset, regime: TrainRegime, config: UnimodalConfig,
                   synth_ds: Optional[Dataset] = None, device: Device = "cpu", modality: Optional[str] = None,
                   workers: int = 0) -> Tuple[ConvClassifier, MetricsReport, List[Dict[str, float]]]:
    """
    Train a p_neg classifier for one modality.

    REAL_ONLY trains on real TRAIN images, SYNTH_ONLY on gated synthetic images, and
    PRETRAIN_FINETUNE runs the synthetic phase and then the real phase on the same parameters.
    Every phase early-stops on the real VAL split and keeps its best epoch.

    Raises:
        MissingArtifactError: a synthetic regime without a synthetic pool
    """
    regime = TrainRegime(regime)
    if regime != TrainRegime.REAL_ONLY and (synth_ds is None or len(synth_ds) == 0):
        raise MissingArtifactError(
            f"Regime '{regime.value}' needs gated synthetic images for {modality}", artifact="gate",
        )
    torch.manual_seed(config.seed)
    model = ConvClassifier(config.backbone, 1, pretrained=False).to(device)
    history = []
    if regime in (TrainRegime.SYNTH_ONLY, TrainRegime.PRETRAIN_FINETUNE):
        epochs = config.epochs if regime == TrainRegime.SYNTH_ONLY else (config.pretrain_epochs or config.epochs)
        history += _fit(model, synth_ds, val_ds, config, epochs, device, "synth", modality, workers)
    if regime in (TrainRegime.REAL_ONLY, TrainRegime.PRETRAIN_FINETUNE):
        history += _fit(model, train_ds, val_ds, config, config.epochs, device, "real", modality, workers)
    report = evaluate_model(model, val_ds, device, "VAL", regime.value, modality)
    training_logger.log_metric("train-unimodal", "val_auroc", report.auroc, modality=modality, regime=regime.value)
    return model.eval(), report, history


def save_classifier(path: str, model: nn.Module, kind: str, config: dict, extra: Optional[dict] = None) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    blob = {"kind": kind, "config": config, "state_dict": model.state_dict()}
    if hasattr(model, "cam_layer"):
        blob["cam_layer"] = model.cam_layer
    blob.update(extra or {})
    torch.save(blob, path)
    return path


def _load_blob(path: str, device: Device) -> dict:
    if not os.path.exists(path):
        raise MissingArtifactError(f"Checkpoint not found: {path}", artifact=path)
    return torch.load(path, map_location=device, weights_only=False)


def load_unimodal(path: str, device: Device = "cpu") -> ConvClassifier:
    blob = _load_blob(path, device)
    config = UnimodalConfig.model_validate(blob["config"])
    model = ConvClassifier(config.backbone, 1, pretrained=False)
    model.load_state_dict(blob["state_dict"])
    return model.to(device).eval()


def load_fusion(path: str, device: Device = "cpu") -> FusionHead:
    blob = _load_blob(path, device)
    config = FusionConfig.model_validate(blob["config"])
    model = FusionHead(blob.get("input_width", config.input_width), config.hidden)
    model.load_state_dict(blob["state_dict"])
    return model.to(device).eval()


# ---------------------------------------------------------------------------
# Prediction table
# ---------------------------------------------------------------------------

def predict_records(models: Dict[Modality, nn.Module], datasets: Dict[Modality, Dataset],
                    metadata: Optional[Dict[str, MetadataRecord]] = None, device: Device = "cpu",
                    modalities: Sequence[Modality] = PIPELINE_MODALITIES) -> List[PredictionRecord]:
    """
    One PredictionRecord per eye from frozen unimodal models.

    Raises:
        DataIntegrityError: an eye lacks an image for one of the modalities
    """
    scores: Dict[str, Dict[Modality, float]] = defaultdict(dict)
    labels: Dict[str, Label] = {}
    patients: Dict[str, str] = {}
    for modality in modalities:
        if modality not in models or modality not in datasets:
            raise DataIntegrityError(f"No classifier or images for {Modality(modality).value}", record=str(modality))
        dataset = datasets[modality]
        p_neg = predict_proba(freeze(models[modality]), dataset, device)
        for entry, p in zip(dataset.entries, p_neg):
            scores[entry.eye_id][Modality(modality)] = float(p)
            labels[entry.eye_id] = entry.label
            patients[entry.eye_id] = entry.patient_id
    records = []
    for eye_id in sorted(scores):
        missing = [m.value for m in modalities if m not in scores[eye_id]]
        if missing:
            raise DataIntegrityError(f"Eye {eye_id} has no score for {missing}", record=eye_id)
        meta = None
        if metadata and patients[eye_id] in metadata:
            meta = tuple(float(v) for v in encode_metadata(metadata[patients[eye_id]]))
        records.append(PredictionRecord(eye_id=eye_id, scores=scores[eye_id], metadata=meta, label=labels[eye_id]))
    return records


def save_predictions(records: Sequence[PredictionRecord], path: str) -> str:
    """Long format: one row per (eye, modality)"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTION_FIELDS)
        for r in records:
            age, sex = r.metadata if r.metadata is not None else ("", "")
            for modality in sorted(r.scores, key=lambda m: m.value):
                writer.writerow([r.eye_id, modality.value, repr(r.scores[modality]), r.label.value, age, sex])
    return path


def load_predictions(path: str) -> List[PredictionRecord]:
    if not os.path.exists(path):
        raise MissingArtifactError(f"Prediction table not found: {path}", artifact=path)
    rows: Dict[str, dict] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rec = rows.setdefault(row["eye_id"], {"scores": {}, "label": row["label"], "metadata": None})
            rec["scores"][Modality(row["modality"])] = float(row["p_neg"])
            if row["age_scaled"] != "":
                rec["metadata"] = (float(row["age_scaled"]), float(row["sex_code"]))
    return [PredictionRecord(eye_id=eye_id, scores=r["scores"], metadata=r["metadata"], label=Label(r["label"]))
            for eye_id, r in rows.items()]


# ---------------------------------------------------------------------------
# Late fusion
# ---------------------------------------------------------------------------

def fusion_features(records: Sequence[PredictionRecord], use_metadata: bool,
                    modalities: Sequence[Modality] = PIPELINE_MODALITIES) -> np.ndarray:
    """Rows of p_neg per modality (fixed order), then encoded metadata when enabled"""
    rows = []
    for r in records:
        missing = [m.value for m in modalities if m not in r.scores]
        if missing:
            raise DataIntegrityError(f"Eye {r.eye_id} has no score for {missing}", record=r.eye_id)
        row = [r.scores[m] for m in modalities]
        if use_metadata:
            if r.metadata is None:
                raise DataIntegrityError(f"Eye {r.eye_id} has no metadata", record=r.eye_id)
            row += list(r.metadata)
        rows.append(row)
    return np.asarray(rows, dtype=np.float32).reshape(len(rows), len(modalities) + (2 if use_metadata else 0))


def train_multimodal(train_records: Sequence[PredictionRecord], val_records: Sequence[PredictionRecord],
                     fusion: FusionConfig, device: Device = "cpu", regime: Optional[str] = None,
                     modalities: Sequence[Modality] = PIPELINE_MODALITIES) -> Tuple[FusionHead, MetricsReport, List[Dict[str, float]]]:
    """Fusion head over frozen unimodal scores; the last epoch is kept"""
    x_train = torch.from_numpy(fusion_features(train_records, fusion.use_metadata, modalities))
    y_train = torch.tensor([r.label.negative_target for r in train_records], dtype=torch.float32)
    x_val = torch.from_numpy(fusion_features(val_records, fusion.use_metadata, modalities))

    torch.manual_seed(fusion.seed)
    model = FusionHead(x_train.shape[1], fusion.hidden).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=fusion.lr)
    sampler = balanced_sampler([int(v) for v in y_train.tolist()], fusion.seed)
    history = []
    for epoch in range(fusion.epochs):
        model.train()
        order = torch.tensor(list(iter(sampler)), dtype=torch.long)
        losses = []
        for start in range(0, len(order), fusion.batch_size):
            idx = order[start:start + fusion.batch_size]
            p_neg = torch.sigmoid(model(x_train[idx].to(device))).squeeze(1)
            loss = focal_loss(p_neg, y_train[idx].to(device), fusion.focal_gamma, fusion.focal_alpha)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
        if epoch % 25 == 0 or epoch == fusion.epochs - 1:
            training_logger.log_epoch("train-multimodal", epoch, float(np.mean(losses)), regime=regime)
    model.eval()
    report = evaluate_fusion(model, val_records, fusion.use_metadata, device, "VAL", regime, modalities)
    return model, report, history


@torch.no_grad()
def fusion_proba(model: FusionHead, records: Sequence[PredictionRecord], use_metadata: bool,
                 device: Device = "cpu", modalities: Sequence[Modality] = PIPELINE_MODALITIES) -> np.ndarray:
    x = torch.from_numpy(fusion_features(records, use_metadata, modalities)).to(device)
    return torch.sigmoid(model.eval()(x)).squeeze(1).cpu().numpy().astype(np.float64)


def evaluate_fusion(model: FusionHead, records: Sequence[PredictionRecord], use_metadata: bool,
                    device: Device = "cpu", split: Optional[str] = None, regime: Optional[str] = None,
                    modalities: Sequence[Modality] = PIPELINE_MODALITIES) -> MetricsReport:
    p_neg = fusion_proba(model, records, use_metadata, device, modalities)
    name = "multimodal+metadata" if use_metadata else "multimodal"
    return evaluate_scores(p_neg, [r.label for r in records], split, regime, name)


# ---------------------------------------------------------------------------
# Modality-aware (FiLM) variant
# ---------------------------------------------------------------------------

def train_modality_aware(train_ds: Dataset, val_ds: Dataset, embed_fn: Callable[[torch.Tensor], torch.Tensor],
                         config: UnimodalConfig, film: FiLMConfig, embed_dim: int,
                         device: Device = "cpu") -> Tuple[ModalityAwareClassifier, MetricsReport]:
    """
    One classifier for all modalities, each stage modulated by the filter embedding of the
    input image. `embed_fn` maps a 3 x H x W batch in [0, 1] to embeddings and is not trained.
    """
    torch.manual_seed(config.seed)
    model = ModalityAwareClassifier(config.backbone, embed_dim).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=film.lr)
    sampler = balanced_sampler(_class_labels(train_ds), config.seed)
    loader = make_loader(train_ds, config.batch_size, config.seed, sampler=sampler)
    stopper = EarlyStopping(config.patience)

    def run(images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            embedding = embed_fn(images)
        return model(images.to(device), embedding.to(device))

    for epoch in range(film.epochs):
        model.train()
        losses = []
        for images, targets, _ in loader:
            loss = focal_loss(torch.sigmoid(run(images)).squeeze(1), targets.to(device),
                              config.focal_gamma, config.focal_alpha)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        model.eval()
        logits, val_targets = predict_outputs(run, val_ds, device, config.batch_size)
        val_loss = float(focal_loss(torch.sigmoid(torch.from_numpy(logits)).squeeze(1),
                                    torch.from_numpy(val_targets), config.focal_gamma, config.focal_alpha))
        training_logger.log_epoch("train-film", epoch, float(np.mean(losses)), val_loss)
        stopper.step(epoch, val_loss, model)
        if stopper.should_stop:
            break
    stopper.restore(model)
    model.eval()
    logits, _ = predict_outputs(run, val_ds, device, config.batch_size)
    p_neg = torch.sigmoid(torch.from_numpy(logits)).squeeze(1).numpy()
    report = evaluate_scores(p_neg, [e.label for e in val_ds.entries], "VAL", "real", "film")
    return model, report
