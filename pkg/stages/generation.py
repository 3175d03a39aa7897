"""
Generation stages: one class-conditional DDPM per modality, then sampling
"""
import logging
import os
import time

import torch

from models.records import DatasetManifest, Label, Modality, PIPELINE_MODALITIES, Split
from services.dataman import save_manifest
from services.diffusion import load_checkpoint, sample, save_checkpoint, train_ddpm, write_samples
from services.training import seed_everything
from stages.data import SYNTHETIC_DIR, load_dataset, pipeline_modalities, real_dataset
from stages.registry import RunContext, StageManifest
from utils.structured_logging import training_logger

logger = logging.getLogger(__name__)

SYNTHETIC_MANIFEST = os.path.join(SYNTHETIC_DIR, "manifest.tsv")


def checkpoint_path(ctx: RunContext, modality: Modality) -> str:
    return ctx.path("ddpm", f"{Modality(modality).value}.pt")


def _class_index(entry) -> int:
    return Label(entry.label).class_index


def run_train_ddpm(ctx: RunContext) -> StageManifest:
    started = time.time()
    ctx.require_declared("train-ddpm")
    training_logger.log_stage_start("train-ddpm")
    config = ctx.config.ddpm
    manifest = load_dataset(ctx)
    outputs, details = [], {}
    for modality in pipeline_modalities(manifest):
        seed_everything(config.seed)
        dataset = real_dataset(ctx, manifest, Split.TRAIN, _class_index, modality,
                               augment=config.augment, seed=config.seed)
        model, schedule, history = train_ddpm(dataset, config, ctx.config.preprocess.side, ctx.device, modality.value)
        outputs.append(save_checkpoint(checkpoint_path(ctx, modality), model, config, schedule,
                                       ctx.config.preprocess.side, modality.value, history))
        details[modality.value] = {"images": len(dataset), "final_loss": history[-1]}
    return ctx.record("train-ddpm", outputs, started, details)


def run_sample(ctx: RunContext) -> StageManifest:
    """Writes samples_per_class images per (modality, label) as pending PNGs plus a manifest"""
    started = time.time()
    ctx.require_declared("sample")
    training_logger.log_stage_start("sample")
    config = ctx.config.ddpm
    side = ctx.config.preprocess.side
    entries = []
    for modality in pipeline_modalities(load_dataset(ctx)):
        model, schedule, _ = load_checkpoint(checkpoint_path(ctx, modality), ctx.device)
        m_idx = PIPELINE_MODALITIES.index(modality)
        for label in (Label.NEG, Label.POS):
            generator = torch.Generator().manual_seed(config.seed * 1000 + m_idx * 10 + label.class_index)
            images = sample(model, schedule, label.class_index, config.samples_per_class, generator,
                            (config.denoiser.in_channels, side, side), config.sample_batch_size, ctx.device)
            entries += write_samples(images, modality, label, ctx.path(SYNTHETIC_DIR, modality.value), ctx.run_dir)
            logger.info(f"Sampled {len(images)} {modality.value}/{label.value}",
                        extra={"stage": "sample", "modality": modality.value, "label": label.value})
    manifest_path = save_manifest(DatasetManifest(entries=entries), ctx.path(SYNTHETIC_MANIFEST))
    return ctx.record("sample", [manifest_path], started, {"images": len(entries)})
