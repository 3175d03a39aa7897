"""
Data stages: dataset preparation and the collections the other stages read
"""
import logging
import os
import time
from typing import Callable, List, Optional

from core.exceptions import MissingArtifactError
from models.records import DatasetManifest, Label, ManifestEntry, Modality, PIPELINE_MODALITIES, Split
from services.dataman import (
    ImageDataset,
    load_manifest,
    make_splits,
    resolve_path,
    save_manifest,
    save_metadata,
    save_splits,
    validate_manifest,
)
from services.phantom import MANIFEST_FILENAME, METADATA_FILENAME, generate_phantoms
from services.reporting import write_json
from stages.registry import RunContext, StageManifest
from utils.structured_logging import training_logger

logger = logging.getLogger(__name__)

SPLITS_FILENAME = "splits.tsv"
SYNTHETIC_DIR = "synthetic"
ACCEPTED_MANIFEST = os.path.join("gate", "accepted.tsv")


def manifest_file(ctx: RunContext) -> str:
    return os.path.join(ctx.data_dir, MANIFEST_FILENAME)


def run_prepare(ctx: RunContext) -> StageManifest:
    """Phantoms or an external manifest, validated and split at family level"""
    started = time.time()
    training_logger.log_stage_start("prepare")
    ctx.save_config()
    source = ctx.config.dataset
    os.makedirs(ctx.data_dir, exist_ok=True)
    if source.kind == "phantom":
        manifest = generate_phantoms(source.phantom, ctx.data_dir, ctx.workers)
    else:
        manifest = load_manifest(source.manifest_path, source.metadata_path)
        root = source.image_root or os.path.dirname(os.path.abspath(source.manifest_path))
        manifest.entries = [
            e.model_copy(update={"path": os.path.abspath(resolve_path(e.path, root))}) for e in manifest.entries
        ]
        save_manifest(manifest, manifest_file(ctx))
        save_metadata(manifest.metadata, os.path.join(ctx.data_dir, METADATA_FILENAME))
    validate_manifest(manifest, root=ctx.data_dir)

    params = ctx.config.splits
    splits = make_splits(
        manifest,
        test_frac=params.test_frac,
        val_frac=params.val_frac,
        seed=params.seed,
        tolerance=params.tolerance,
        size_tolerance=params.size_tolerance,
        max_attempts=params.max_attempts,
    )
    splits_path = save_splits(splits, os.path.join(ctx.data_dir, SPLITS_FILENAME))
    summary_path = write_json(ctx.path("data", "split_summary.json"), {
        "eye_counts": {k.value: v for k, v in splits.eye_counts.items()},
        "pos_fraction": {k.value: round(v, 4) for k, v in splits.pos_fraction.items()},
        "global_pos_fraction": round(splits.global_pos_fraction, 4),
        "families": {s.value: len(splits.families(s)) for s in Split},
    })
    outputs = [manifest_file(ctx), os.path.join(ctx.data_dir, METADATA_FILENAME), splits_path, summary_path]
    return ctx.record("prepare", outputs, started, {
        "images": len(manifest.entries),
        "modalities": [m.value for m in manifest.modalities()],
        "eye_counts": {k.value: v for k, v in splits.eye_counts.items()},
    })


def load_dataset(ctx: RunContext) -> DatasetManifest:
    path = manifest_file(ctx)
    if not os.path.exists(path):
        raise MissingArtifactError(f"Dataset manifest missing: {path}", artifact=path)
    return load_manifest(
        path,
        metadata_path=os.path.join(ctx.data_dir, METADATA_FILENAME),
        splits_path=os.path.join(ctx.data_dir, SPLITS_FILENAME),
    )


def pipeline_modalities(manifest: DatasetManifest) -> List[Modality]:
    present = set(manifest.modalities())
    return [m for m in PIPELINE_MODALITIES if m in present]


def labeled(entries: List[ManifestEntry]) -> List[ManifestEntry]:
    return [e for e in entries if e.label != Label.UNKNOWN]


def real_dataset(ctx: RunContext, manifest: DatasetManifest, split: Split, target_fn: Callable,
                 modality: Optional[Modality] = None, augment: bool = False, require_label: bool = True,
                 seed: int = 0) -> ImageDataset:
    entries = manifest.in_split(split, modality)
    if require_label:
        entries = labeled(entries)
    return ImageDataset(
        entries, ctx.data_dir, ctx.config.preprocess, target_fn,
        augment_config=ctx.config.augment if augment else None, seed=seed,
    )


def accepted_synthetic(ctx: RunContext) -> DatasetManifest:
    path = ctx.path(ACCEPTED_MANIFEST)
    if not os.path.exists(path):
        raise MissingArtifactError(f"Gated synthetic manifest missing: {path}", artifact=path)
    return load_manifest(path)


def synthetic_dataset(ctx: RunContext, modality: Modality, target_fn: Callable, augment: bool = False,
                      seed: int = 0) -> ImageDataset:
    entries = accepted_synthetic(ctx).for_modality(modality)
    return ImageDataset(
        entries, ctx.run_dir, ctx.config.preprocess, target_fn,
        augment_config=ctx.config.augment if augment else None, seed=seed,
    )
