"""
Classification stages: unimodal regimes, late fusion and held-out evaluation
"""
import logging
import os
import time
from typing import Dict, List, Tuple

from models.records import DatasetManifest, Modality, Split, TrainRegime
from services.classify import (
    evaluate_fusion,
    fusion_proba,
    load_fusion,
    load_predictions,
    load_unimodal,
    negative_target,
    predict_proba,
    predict_records,
    save_classifier,
    save_predictions,
    train_modality_aware,
    train_multimodal,
    train_unimodal,
)
from services.evalkit import evaluate_scores
from services.modfilter import load_filter
from services.reporting import plot_roc_pr, write_json
from services.training import seed_everything
from stages.data import load_dataset, pipeline_modalities, real_dataset, synthetic_dataset
from stages.filtering import filter_path
from stages.registry import RunContext, StageManifest, completed_variants, stage_key
from utils.structured_logging import training_logger

logger = logging.getLogger(__name__)

EVAL_SPLITS = (Split.TEST, Split.VAL)


def unimodal_path(ctx: RunContext, regime: TrainRegime, modality: Modality) -> str:
    return ctx.path("unimodal", TrainRegime(regime).value, f"{Modality(modality).value}.pt")


def fusion_variant(regime: TrainRegime, metadata: bool) -> str:
    return TrainRegime(regime).value + ("-metadata" if metadata else "")


def fusion_path(ctx: RunContext, regime: TrainRegime, metadata: bool) -> str:
    return ctx.path("multimodal", fusion_variant(regime, metadata), "fusion.pt")


def predictions_path(ctx: RunContext, regime: TrainRegime, split: Split) -> str:
    return ctx.path("multimodal", TrainRegime(regime).value, f"predictions_{split.value.lower()}.csv")


def run_train_unimodal(ctx: RunContext, regime: TrainRegime) -> StageManifest:
    """One classifier per pipeline modality; synthetic regimes read the gated pool"""
    started = time.time()
    regime = TrainRegime(regime)
    key = stage_key("train-unimodal", regime.value)
    ctx.require_declared("train-unimodal")
    if regime != TrainRegime.REAL_ONLY:
        ctx.require(key, "gate")
    training_logger.log_stage_start(key)
    config = ctx.config.unimodal
    manifest = load_dataset(ctx)
    outputs, reports, histories = [], {}, {}
    for modality in pipeline_modalities(manifest):
        seed_everything(config.seed)
        train_ds = real_dataset(ctx, manifest, Split.TRAIN, negative_target, modality,
                                augment=config.augment, seed=config.seed)
        val_ds = real_dataset(ctx, manifest, Split.VAL, negative_target, modality)
        synth_ds = None
        if regime != TrainRegime.REAL_ONLY:
            synth_ds = synthetic_dataset(ctx, modality, negative_target, augment=config.augment, seed=config.seed)
        model, report, history = train_unimodal(train_ds, val_ds, regime, config, synth_ds, ctx.device,
                                                modality.value, ctx.workers)
        outputs.append(save_classifier(unimodal_path(ctx, regime, modality), model, "unimodal",
                                       config.model_dump(mode="json"),
                                       {"modality": modality.value, "regime": regime.value}))
        reports[modality.value] = report.model_dump(mode="json")
        histories[modality.value] = history

    if ctx.config.film.enabled and regime == TrainRegime.REAL_ONLY:
        outputs.append(_train_film(ctx, manifest, reports))

    folder = ctx.path("unimodal", regime.value)
    outputs.append(write_json(os.path.join(folder, "val_reports.json"), reports))
    outputs.append(write_json(os.path.join(folder, "history.json"), histories))
    return ctx.record(key, outputs, started, {m: round(r["auroc"], 4) for m, r in reports.items()})


def _train_film(ctx: RunContext, manifest: DatasetManifest, reports: Dict[str, dict]) -> str:
    """Single modality-aware classifier conditioned on frozen filter embeddings"""
    ctx.require("train-unimodal:real", "train-filter")
    predictor = load_filter(filter_path(ctx), ctx.device)
    config = ctx.config.unimodal
    modalities = set(pipeline_modalities(manifest))
    pipeline = DatasetManifest(entries=[e for e in manifest.entries if e.modality in modalities],
                               splits=manifest.splits)
    seed_everything(config.seed)
    train_ds = real_dataset(ctx, pipeline, Split.TRAIN, negative_target, augment=config.augment, seed=config.seed)
    val_ds = real_dataset(ctx, pipeline, Split.VAL, negative_target)
    model, report = train_modality_aware(train_ds, val_ds, predictor.embed, config, ctx.config.film,
                                         ctx.config.filter.embed_dim, ctx.device)
    reports["film"] = report.model_dump(mode="json")
    return save_classifier(ctx.path("unimodal", "real", "film.pt"), model, "film",
                           config.model_dump(mode="json"), {"film": ctx.config.film.model_dump(mode="json")})


def _real_splits(ctx: RunContext, manifest: DatasetManifest, modalities: List[Modality], split: Split):
    return {m: real_dataset(ctx, manifest, split, negative_target, m) for m in modalities}


def run_train_multimodal(ctx: RunContext, regime: TrainRegime, metadata: bool = False) -> StageManifest:
    """
    Fusion head over frozen unimodal p_neg scores, optionally with encoded age and sex.
    Per-split prediction tables are written once per regime and reused by the metadata variant.
    """
    started = time.time()
    regime = TrainRegime(regime)
    key = stage_key("train-multimodal", fusion_variant(regime, metadata))
    ctx.require_declared("train-multimodal")
    ctx.require(key, stage_key("train-unimodal", regime.value))
    training_logger.log_stage_start(key)
    manifest = load_dataset(ctx)
    modalities = pipeline_modalities(manifest)
    models = {m: load_unimodal(unimodal_path(ctx, regime, m), ctx.device) for m in modalities}

    outputs, records = [], {}
    for split in (Split.TRAIN, Split.VAL, Split.TEST):
        records[split] = predict_records(models, _real_splits(ctx, manifest, modalities, split),
                                         manifest.metadata, ctx.device, modalities)
        outputs.append(save_predictions(records[split], predictions_path(ctx, regime, split)))

    fusion = ctx.config.fusion.model_copy(update={"use_metadata": metadata})
    seed_everything(fusion.seed)
    model, report, history = train_multimodal(records[Split.TRAIN], records[Split.VAL], fusion, ctx.device,
                                              regime.value, modalities)
    outputs.append(save_classifier(fusion_path(ctx, regime, metadata), model, "fusion",
                                   fusion.model_dump(mode="json"),
                                   {"input_width": int(model.input_width),
                                    "modalities": [m.value for m in modalities]}))
    folder = ctx.path("multimodal", fusion_variant(regime, metadata))
    outputs.append(write_json(os.path.join(folder, "val_report.json"), report.model_dump(mode="json")))
    outputs.append(write_json(os.path.join(folder, "history.json"), history))
    return ctx.record(key, outputs, started, {"val_auroc": round(report.auroc, 4), "eyes": {
        s.value: len(r) for s, r in records.items()
    }})


def _unimodal_curves(ctx: RunContext, manifest: DatasetManifest, regime: TrainRegime,
                     modalities: List[Modality]) -> Tuple[list, Dict[str, tuple]]:
    reports, curves = [], {}
    for modality in modalities:
        model = load_unimodal(unimodal_path(ctx, regime, modality), ctx.device)
        for split in EVAL_SPLITS:
            dataset = real_dataset(ctx, manifest, split, negative_target, modality)
            p_neg = predict_proba(model, dataset, ctx.device)
            labels = [e.label for e in dataset.entries]
            reports.append(evaluate_scores(p_neg, labels, split.value, regime.value, modality.value))
            if split == Split.TEST:
                curves[modality.value] = (p_neg, labels)
    return reports, curves


def run_evaluate(ctx: RunContext) -> StageManifest:
    """TEST and VAL metrics for every trained model; metrics.json carries no timing data"""
    started = time.time()
    ctx.require_declared("evaluate")
    unimodal_keys = completed_variants(ctx, "train-unimodal")
    fusion_keys = completed_variants(ctx, "train-multimodal")
    ctx.require("evaluate", *fusion_keys)
    training_logger.log_stage_start("evaluate")
    manifest = load_dataset(ctx)
    modalities = pipeline_modalities(manifest)

    reports, outputs = [], []
    for key in unimodal_keys:
        regime = TrainRegime(key.split(":", 1)[1])
        regime_reports, curves = _unimodal_curves(ctx, manifest, regime, modalities)
        reports += regime_reports
        for metadata in (False, True):
            variant = stage_key("train-multimodal", fusion_variant(regime, metadata))
            if variant not in fusion_keys:
                continue
            fusion = load_fusion(fusion_path(ctx, regime, metadata), ctx.device)
            for split in EVAL_SPLITS:
                records = load_predictions(predictions_path(ctx, regime, split))
                reports.append(evaluate_fusion(fusion, records, metadata, ctx.device, split.value, regime.value,
                                               modalities))
                if split == Split.TEST:
                    name = "multimodal+metadata" if metadata else "multimodal"
                    curves[name] = (fusion_proba(fusion, records, metadata, ctx.device, modalities),
                                    [r.label for r in records])
        outputs.append(plot_roc_pr(curves, ctx.path("evaluate", f"roc_pr_{regime.value}.png")))

    payload = sorted((r.model_dump(mode="json") for r in reports),
                     key=lambda r: (r["regime"], r["modality"], r["split"]))
    outputs.append(write_json(ctx.path("evaluate", "metrics.json"), {"reports": payload}))
    return ctx.record("evaluate", outputs, started, {
        "models": len({(r.regime, r.modality) for r in reports}),
        "test_auroc": {f"{r.regime}/{r.modality}": round(r.auroc, 4) for r in reports if r.split == Split.TEST.value},
    })


