"""
Dataset Management Service
Manifests, family-level stratified splitting, preprocessing, augmentation and metadata encoding
"""
import csv
import logging
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from core.config import AGE_SCALE, MANIFEST_FIELDS, METADATA_FIELDS, SPLIT_FIELDS
from core.exceptions import DataIntegrityError, PreprocessingError, StratificationError, ValidationError
from models.experiment import AugmentConfig, PreprocessConfig
from models.records import (
    DatasetManifest,
    Label,
    ManifestEntry,
    MetadataRecord,
    Modality,
    Provenance,
    Sex,
    Split,
    SplitAssignment,
    is_bscan,
    is_fundus,
)
from utils.image_io import as_gray, as_three_channel, read_png

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


# ---------------------------------------------------------------------------
# Manifest persistence
# ---------------------------------------------------------------------------

def save_manifest(manifest: DatasetManifest, path: str) -> str:
    """Write one record per line, tab-separated, fixed field order, header first"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for e in manifest.entries:
            writer.writerow([e.path, e.family_id, e.patient_id, e.eye_id,
                             e.modality.value, e.label.value, e.provenance.value])
    return path


def load_manifest(path: str, metadata_path: Optional[str] = None, splits_path: Optional[str] = None) -> DatasetManifest:
    if not os.path.exists(path):
        raise DataIntegrityError(f"Manifest not found: {path}", record=path)
    entries = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_FIELDS:
            raise DataIntegrityError(f"Manifest header must be {MANIFEST_FIELDS}", record=path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_FIELDS):
                raise DataIntegrityError(f"Manifest line {lineno} has {len(row)} fields", record=f"{path}:{lineno}")
            try:
                entries.append(ManifestEntry(**dict(zip(MANIFEST_FIELDS, row))))
            except ValueError as e:
                raise DataIntegrityError(f"Manifest line {lineno} is invalid: {e}", record=f"{path}:{lineno}")
    manifest = DatasetManifest(entries=entries)
    if metadata_path and os.path.exists(metadata_path):
        manifest.metadata = load_metadata(metadata_path)
    if splits_path and os.path.exists(splits_path):
        manifest.splits = load_splits(splits_path)
    return manifest


def save_metadata(metadata: Dict[str, MetadataRecord], path: str) -> str:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(METADATA_FIELDS)
        for patient_id in sorted(metadata):
            m = metadata[patient_id]
            writer.writerow([patient_id, repr(float(m.age_years)), m.sex.value])
    return path


def load_metadata(path: str) -> Dict[str, MetadataRecord]:
    metadata = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for row in reader:
            metadata[row["patient_id"]] = MetadataRecord(age_years=float(row["age_years"]), sex=Sex(row["sex"]))
    return metadata


def save_splits(splits: SplitAssignment, path: str) -> str:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(SPLIT_FIELDS)
        for family_id in sorted(splits.assignments):
            writer.writerow([family_id, splits.assignments[family_id].value])
    return path


def load_splits(path: str) -> SplitAssignment:
    assignments = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for row in reader:
            assignments[row["family_id"]] = Split(row["split"])
    return SplitAssignment(assignments=assignments)


def validate_manifest(manifest: DatasetManifest, root: Optional[str] = None,
                      allow_duplicates: bool = False, check_files: bool = True) -> None:
    """Enforce identity and per-eye uniqueness invariants; raises DataIntegrityError"""
    eye_to_patient: Dict[str, str] = {}
    patient_to_family: Dict[str, str] = {}
    seen: Dict[Tuple[str, Modality], str] = {}
    for e in manifest.entries:
        if e.provenance == Provenance.SYNTHETIC:
            continue
        if eye_to_patient.setdefault(e.eye_id, e.patient_id) != e.patient_id:
            raise DataIntegrityError(f"Eye {e.eye_id} maps to more than one patient", record=e.eye_id)
        if patient_to_family.setdefault(e.patient_id, e.family_id) != e.family_id:
            raise DataIntegrityError(f"Patient {e.patient_id} maps to more than one family", record=e.patient_id)
        key = (e.eye_id, e.modality)
        if key in seen and not allow_duplicates:
            raise DataIntegrityError(
                f"Eye {e.eye_id} has more than one {e.modality.value} image",
                record=e.path,
            )
        seen[key] = e.path
    if check_files:
        for e in manifest.entries:
            full = resolve_path(e.path, root)
            if not os.path.exists(full):
                raise DataIntegrityError(f"Referenced image does not exist: {full}", record=e.path)


def resolve_path(path: str, root: Optional[str]) -> str:
    if os.path.isabs(path) or root is None:
        return path
    return os.path.join(root, path)


# ---------------------------------------------------------------------------
# Family-level stratified splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _FamilyStats:
    family_id: str
    n_eyes: int
    n_pos: int
    n_labeled: int


def _family_stats(manifest: DatasetManifest) -> List[_FamilyStats]:
    eyes: Dict[str, Dict[str, Label]] = defaultdict(dict)
    for e in manifest.entries:
        if e.provenance == Provenance.SYNTHETIC:
            continue
        previous = eyes[e.family_id].get(e.eye_id)
        if previous is not None and previous != e.label:
            raise DataIntegrityError(f"Eye {e.eye_id} carries conflicting labels", record=e.eye_id)
        eyes[e.family_id][e.eye_id] = e.label
    stats = []
    for family_id in sorted(eyes):
        labels = list(eyes[family_id].values())
        stats.append(_FamilyStats(
            family_id=family_id,
            n_eyes=len(labels),
            n_pos=sum(1 for lb in labels if lb == Label.POS),
            n_labeled=sum(1 for lb in labels if lb != Label.UNKNOWN),
        ))
    return stats


class _Group:
    """Mutable tally of the families assigned to one split"""

    def __init__(self, families: Iterable[_FamilyStats] = ()):
        self.families: List[_FamilyStats] = list(families)

    @property
    def n_eyes(self) -> int:
        return sum(f.n_eyes for f in self.families)

    @property
    def n_pos(self) -> int:
        return sum(f.n_pos for f in self.families)

    @property
    def n_labeled(self) -> int:
        return sum(f.n_labeled for f in self.families)


def _excess(n_pos: int, n_labeled: int, global_frac: float, tolerance: float) -> float:
    """Deviation beyond the tolerance; a split of n labeled eyes can only reach multiples of 1/n"""
    if n_labeled == 0:
        return float("inf")
    effective = max(tolerance, 1.0 / (2.0 * n_labeled))
    return abs(n_pos / n_labeled - global_frac) - effective


def _draw(pool: List[_FamilyStats], target: int, slack: float) -> Tuple[List[_FamilyStats], List[_FamilyStats]]:
    taken, rest, eyes = [], [], 0
    for fam in pool:
        if eyes < target and eyes + fam.n_eyes <= target + slack:
            taken.append(fam)
            eyes += fam.n_eyes
        else:
            rest.append(fam)
    return taken, rest


def _worst_excess(groups: Dict[Split, _Group], global_frac: float, tolerance: float) -> float:
    return max(_excess(g.n_pos, g.n_labeled, global_frac, tolerance) for g in groups.values())


def _rebalance(groups: Dict[Split, _Group], targets: Dict[Split, int], slack: float,
               global_frac: float, tolerance: float, max_rounds: int = 200) -> None:
    """Greedy family swaps between splits that lower the worst stratification excess"""
    for _ in range(max_rounds):
        current = _worst_excess(groups, global_frac, tolerance)
        if current <= 0:
            return
        best_gain, best_swap = 0.0, None
        splits = list(groups)
        for i, s in enumerate(splits):
            for o in splits[i + 1:]:
                gs, go = groups[s], groups[o]
                for a_idx, a in enumerate(gs.families):
                    for b_idx, b in enumerate(go.families):
                        if a.n_pos == b.n_pos and a.n_labeled == b.n_labeled:
                            continue
                        delta = b.n_eyes - a.n_eyes
                        if not _sizes_ok(s, gs.n_eyes + delta, o, go.n_eyes - delta, targets, slack):
                            continue
                        trial = {
                            k: (g.n_pos, g.n_labeled) for k, g in groups.items()
                        }
                        trial[s] = (gs.n_pos - a.n_pos + b.n_pos, gs.n_labeled - a.n_labeled + b.n_labeled)
                        trial[o] = (go.n_pos - b.n_pos + a.n_pos, go.n_labeled - b.n_labeled + a.n_labeled)
                        worst = max(_excess(p, n, global_frac, tolerance) for p, n in trial.values())
                        gain = current - worst
                        if gain > best_gain + 1e-12:
                            best_gain, best_swap = gain, (s, a_idx, o, b_idx)
        if best_swap is None:
            return
        s, a_idx, o, b_idx = best_swap
        a = groups[s].families[a_idx]
        b = groups[o].families[b_idx]
        groups[s].families[a_idx] = b
        groups[o].families[b_idx] = a


def _sizes_ok(s: Split, s_size: int, o: Split, o_size: int, targets: Dict[Split, int], slack: float) -> bool:
    for split, size in ((s, s_size), (o, o_size)):
        if split in targets and abs(size - targets[split]) > slack:
            return False
        if size <= 0:
            return False
    return True


def make_splits(manifest: DatasetManifest, test_frac: float = 0.2, val_frac: float = 0.2, seed: int = 0,
                tolerance: float = 0.05, size_tolerance: float = 0.05, max_attempts: int = 200) -> SplitAssignment:
    """
    Assign whole families to TRAIN/VAL/TEST.

    TEST receives round(test_frac * eyes) eyes and VAL round(val_frac * remaining eyes), each
    within a size slack. Families are assigned in a seeded random order and then swapped between
    splits until every split's positive fraction is within `tolerance` of the global fraction
    (a split of n labeled eyes is also allowed 1/(2n), the resolution it can represent).

    Raises:
        ValidationError: fractions outside (0, 1)
        StratificationError: no attempt met the tolerance; names the family holding the
            largest share of positives
    """
    if not 0.0 < test_frac < 1.0 or not 0.0 < val_frac < 1.0:
        raise ValidationError("test_frac and val_frac must lie in (0, 1)",
                              details={"test_frac": test_frac, "val_frac": val_frac})

    families = _family_stats(manifest)
    if not families:
        raise DataIntegrityError("Manifest holds no real records to split")
    total_eyes = sum(f.n_eyes for f in families)
    total_pos = sum(f.n_pos for f in families)
    total_labeled = sum(f.n_labeled for f in families)
    if total_labeled == 0 or total_pos == 0 or total_pos == total_labeled:
        raise StratificationError("Stratification needs both POS and NEG eyes", blocking_family=None)
    global_frac = total_pos / total_labeled

    n_test = max(1, int(round(test_frac * total_eyes)))
    n_val = max(1, int(round(val_frac * (total_eyes - n_test))))
    largest = max(f.n_eyes for f in families)
    slack = max(size_tolerance * total_eyes, (largest - 1) / 2.0, 0.5)
    targets = {Split.TEST: n_test, Split.VAL: n_val}

    rng = np.random.default_rng(seed)
    best_excess, best_groups = float("inf"), None
    for attempt in range(max_attempts):
        order = rng.permutation(len(families))
        pool = [families[i] for i in order]
        test, pool = _draw(pool, n_test, slack)
        val, pool = _draw(pool, n_val, slack)
        groups = {Split.TRAIN: _Group(pool), Split.VAL: _Group(val), Split.TEST: _Group(test)}
        if any(not g.families for g in groups.values()):
            continue
        _rebalance(groups, targets, slack, global_frac, tolerance)
        excess = _worst_excess(groups, global_frac, tolerance)
        if excess < best_excess:
            best_excess, best_groups = excess, groups
        if excess <= 0:
            logger.info("Split found", extra={"details": {"attempt": attempt, "seed": seed}})
            break

    if best_groups is None or best_excess > 0:
        blocking = max(families, key=lambda f: (f.n_pos / total_pos, f.n_eyes, f.family_id))
        raise StratificationError(
            f"No family-level split keeps every split within ±{tolerance} of the positive fraction "
            f"{global_frac:.3f}; family '{blocking.family_id}' holds {blocking.n_pos} of {total_pos} positive eyes",
            blocking_family=blocking.family_id,
        )

    assignments = {}
    pos_fraction = {}
    eye_counts = {}
    for split, group in best_groups.items():
        for fam in group.families:
            assignments[fam.family_id] = split
        pos_fraction[split] = group.n_pos / group.n_labeled
        eye_counts[split] = group.n_eyes
    return SplitAssignment(
        assignments=assignments,
        pos_fraction=pos_fraction,
        eye_counts=eye_counts,
        global_pos_fraction=global_frac,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def _to_unit_range(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.float64) / float(np.iinfo(arr.dtype).max)
    arr = arr.astype(np.float64)
    peak = arr.max()
    if peak > 1.0:
        arr = arr / peak
    return np.clip(arr, 0.0, 1.0)


def _crop_bscan_rows(image: np.ndarray, config: PreprocessConfig, modality: Modality) -> np.ndarray:
    intensity = as_gray(image)
    peak = float(intensity.max())
    if peak <= 0.0:
        raise PreprocessingError("B-scan has no content rows (image is blank)", modality=modality.value)
    threshold = config.bscan_threshold if config.bscan_threshold is not None else config.bscan_threshold_frac * peak
    row_means = intensity.mean(axis=1)
    keep = np.flatnonzero(row_means >= threshold)
    if keep.size == 0:
        raise PreprocessingError("Every B-scan row is below the crop threshold", modality=modality.value)
    return image[keep[0]:keep[-1] + 1]


def _crop_fundus(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    intensity = as_gray(image)
    peak = float(intensity.max())
    if peak > 0.0:
        mask = intensity > config.fundus_background_frac * peak
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size and cols.size:
            image = image[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    if config.fundus_zoom > 1.0:
        h, w = image.shape[:2]
        ch, cw = max(1, int(round(h / config.fundus_zoom))), max(1, int(round(w / config.fundus_zoom)))
        top, left = (h - ch) // 2, (w - cw) // 2
        image = image[top:top + ch, left:left + cw]
    return image


def _resize(image: np.ndarray, side: int, interpolation: str) -> np.ndarray:
    if image.shape[0] == side and image.shape[1] == side:
        return image
    resample = Image.BILINEAR if interpolation == "bilinear" else Image.NEAREST
    planes = [image] if image.ndim == 2 else [image[..., c] for c in range(image.shape[-1])]
    resized = [
        np.asarray(Image.fromarray(p.astype(np.float32)).resize((side, side), resample=resample))
        for p in planes
    ]
    return resized[0] if image.ndim == 2 else np.stack(resized, axis=-1)


def preprocess(image: np.ndarray, modality: Modality, config: PreprocessConfig) -> np.ndarray:
    """
    Bring a raw image to the shared pipeline format: side x side x 3, float32 in [0, 1].

    Fundus images are cropped to their non-background bounding box and zoomed; B-scans lose
    the top and bottom rows whose mean intensity is below the crop threshold. Grayscale planes
    are duplicated into three channels. Backbone-specific normalization is applied later by
    `normalize_for_backbone`.
    """
    arr = np.asarray(image)
    if arr.size == 0:
        raise PreprocessingError("Raw image is empty")
    try:
        modality = Modality(modality)
    except ValueError:
        raise PreprocessingError(f"Unknown modality: {modality}")
    if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
        raise PreprocessingError("Raw image contains non-finite pixels", modality=modality.value)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim not in (2, 3):
        raise PreprocessingError(f"Unsupported image shape {arr.shape}", modality=modality.value)

    out = _to_unit_range(arr)
    if is_bscan(modality):
        out = _crop_bscan_rows(out, config, modality)
    elif is_fundus(modality):
        out = _crop_fundus(out, config)
    out = _resize(out, config.side, config.interpolation)
    out = as_three_channel(out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def normalize_for_backbone(batch: torch.Tensor, pretrained: bool) -> torch.Tensor:
    """ImageNet statistics for pretrained backbones, unit range otherwise"""
    if not pretrained:
        return batch
    mean = torch.tensor(IMAGENET_MEAN, dtype=batch.dtype, device=batch.device).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=batch.dtype, device=batch.device).view(1, 3, 1, 1)
    return (batch - mean) / std


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment(image: np.ndarray, modality: Modality, rng: np.random.Generator,
            config: Optional[AugmentConfig] = None) -> np.ndarray:
    """
    Random shear/rotate, brightness/contrast jitter, crop (translation) and zoom.
    B-scan modalities keep zoom at 1.0. Output shape equals input shape.
    """
    config = config or AugmentConfig()
    arr = np.asarray(image, dtype=np.float32)
    h, w = arr.shape[:2]

    def draw(limit: float) -> float:
        return float(rng.uniform(-limit, limit)) if limit > 0 else 0.0

    angle = draw(config.rotate_deg)
    shear = (draw(config.shear_deg), draw(config.shear_deg))
    zoom = 1.0 if is_bscan(modality) else 1.0 + draw(config.zoom)
    translate = (int(round(draw(config.crop) * w)), int(round(draw(config.crop) * h)))
    brightness = 1.0 + draw(config.brightness)
    contrast = 1.0 + draw(config.contrast)

    tensor = torch.from_numpy(arr[..., None] if arr.ndim == 2 else arr).permute(2, 0, 1).contiguous()
    if angle != 0.0 or shear != (0.0, 0.0) or zoom != 1.0 or translate != (0, 0):
        tensor = TF.affine(
            tensor, angle=angle, translate=list(translate), scale=zoom, shear=list(shear),
            interpolation=InterpolationMode.BILINEAR, fill=0.0,
        )
    if brightness != 1.0:
        tensor = TF.adjust_brightness(tensor, brightness)
    if contrast != 1.0:
        tensor = TF.adjust_contrast(tensor, contrast) if tensor.shape[0] in (1, 3) else tensor
    out = tensor.clamp(0.0, 1.0).permute(1, 2, 0).numpy()
    return out[..., 0] if arr.ndim == 2 else out


# ---------------------------------------------------------------------------
# Metadata
# ---------------------------------------------------------------------------

def encode_metadata(m: MetadataRecord) -> np.ndarray:
    """(age x 0.01, sex as 0.0 male / 1.0 female)"""
    return np.array([m.age_years * AGE_SCALE, 1.0 if m.sex == Sex.FEMALE else 0.0], dtype=np.float64)


# ---------------------------------------------------------------------------
# Torch dataset
# ---------------------------------------------------------------------------

class ImageDataset(Dataset):
    """
    Preprocessed images from manifest entries.

    Items are (tensor 3xHxW, target, index). `target_fn` maps an entry to the training
    target; augmentation draws from a generator seeded by (seed, epoch, index).
    """

    def __init__(self, entries: Sequence[ManifestEntry], root: Optional[str], preprocess_config: PreprocessConfig,
                 target_fn: Callable[[ManifestEntry], float], augment_config: Optional[AugmentConfig] = None,
                 seed: int = 0, images: Optional[Sequence[np.ndarray]] = None):
        self.entries = list(entries)
        self.root = root
        self.preprocess_config = preprocess_config
        self.target_fn = target_fn
        self.augment_config = augment_config
        self.seed = seed
        self.epoch = 0
        self._cache: Dict[int, np.ndarray] = {}
        if images is not None:
            if len(images) != len(self.entries):
                raise ValidationError("images and entries must have equal length")
            for i, img in enumerate(images):
                self._cache[i] = img

    def __len__(self) -> int:
        return len(self.entries)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def image(self, index: int) -> np.ndarray:
        if index not in self._cache:
            entry = self.entries[index]
            raw = read_png(resolve_path(entry.path, self.root))
            self._cache[index] = preprocess(raw, entry.modality, self.preprocess_config)
        return self._cache[index]

    def __getitem__(self, index: int):
        img = self.image(index)
        if self.augment_config is not None:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            img = augment(img, self.entries[index].modality, rng, self.augment_config)
        tensor = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)
        return tensor, torch.tensor(self.target_fn(self.entries[index]), dtype=torch.float32), index

    def stack(self) -> torch.Tensor:
        """All preprocessed images as one N x 3 x H x W tensor (no augmentation)"""
        return torch.stack([
            torch.from_numpy(np.ascontiguousarray(self.image(i), dtype=np.float32)).permute(2, 0, 1)
            for i in range(len(self))
        ]) if len(self) else torch.empty(0)
