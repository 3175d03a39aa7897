"""
Reporting stages: GradCAM sheets and the cross-regime results grid
"""
import json
import logging
import os
import time
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from core.exceptions import StageOrderError
from models.records import AuditReport, Label, ManifestEntry, MetricsReport, Split, TrainRegime
from services.classify import load_unimodal, negative_target
from services.explain import CAMHeatmap, cam_sheet, gradcam, save_heatmap, signal_mass_ratio
from services.phantom import signal_region_mask
from services.reporting import pivot_grid, plot_audit, results_grid, write_grid, write_json
from stages.classification import unimodal_path
from stages.data import load_dataset, pipeline_modalities, real_dataset, synthetic_dataset
from stages.registry import RunContext, StageManifest, completed_variants, stage_key
from utils.structured_logging import training_logger

logger = logging.getLogger(__name__)

# GradCAM explains the first trained regime in this order
EXPLAIN_PREFERENCE = (TrainRegime.REAL_ONLY, TrainRegime.PRETRAIN_FINETUNE, TrainRegime.SYNTH_ONLY)


def _explained_regime(ctx: RunContext) -> TrainRegime:
    done = set(completed_variants(ctx, "train-unimodal"))
    for regime in EXPLAIN_PREFERENCE:
        if stage_key("train-unimodal", regime.value) in done:
            return regime
    raise StageOrderError("explain", "train-unimodal")


def _pick(entries: List[ManifestEntry], label: Label, n: int) -> List[int]:
    return [i for i, e in enumerate(entries) if e.label == label][:n]


def run_explain(ctx: RunContext) -> StageManifest:
    """
    Heatmaps for target index 0 (the p_neg logit) on held-out real images and, when the gate
    has run, on accepted synthetic images. Phantom runs also report how much heatmap mass
    falls in the region carrying the class signal.
    """
    started = time.time()
    ctx.require_declared("explain")
    regime = _explained_regime(ctx)
    ctx.require("explain", stage_key("train-unimodal", regime.value))
    training_logger.log_stage_start("explain")
    config = ctx.config.explain
    manifest = load_dataset(ctx)
    gated = ctx.has_stage("gate")
    phantom = ctx.config.dataset.kind == "phantom"
    side = ctx.config.preprocess.side

    cells: Dict[Tuple[str, str, str], Tuple[np.ndarray, CAMHeatmap]] = {}
    outputs, mass, degenerate = [], {}, 0
    modalities = pipeline_modalities(manifest)
    for modality in modalities:
        model = load_unimodal(unimodal_path(ctx, regime, modality), ctx.device)
        sources = [("real", real_dataset(ctx, manifest, Split.TEST, negative_target, modality))]
        if gated:
            sources.append(("synthetic", synthetic_dataset(ctx, modality, negative_target)))
        ratios = []
        for source, dataset in sources:
            for label in (Label.POS, Label.NEG):
                for rank, index in enumerate(_pick(dataset.entries, label, config.images_per_cell)):
                    image = dataset.image(index)
                    tensor = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)
                    cam = gradcam(model, tensor.to(ctx.device), target=0)
                    degenerate += int(cam.degenerate)
                    prefix = ctx.path("explain", modality.value, f"{source}_{label.value}_{rank}")
                    outputs += list(save_heatmap(prefix, cam, image, config.overlay_alpha, config.colormap))
                    if rank == 0:
                        cells[(modality.value, source, label.value)] = (image, cam)
                    if phantom and source == "real" and label == Label.POS and not cam.degenerate:
                        ratios.append(signal_mass_ratio(cam.heatmap, signal_region_mask(modality, side)))
        if ratios:
            mass[modality.value] = float(np.mean(ratios))

    outputs.append(cam_sheet(cells, [m.value for m in modalities], ctx.path("explain", "cam_sheet.png"),
                             config.overlay_alpha, config.colormap))
    details = {"regime": regime.value, "heatmaps": len(cells), "degenerate": degenerate}
    if mass:
        details["signal_mass_ratio"] = mass
        outputs.append(write_json(ctx.path("explain", "signal_mass.json"), mass))
    return ctx.record("explain", outputs, started, details)


def _load_reports(path: str) -> List[MetricsReport]:
    with open(path, "r", encoding="utf-8") as fh:
        return [MetricsReport.model_validate(r) for r in json.load(fh)["reports"]]


def _load_audits(ctx: RunContext) -> Optional[List[AuditReport]]:
    folder = ctx.path("audit")
    if not ctx.has_stage("audit") or not os.path.isdir(folder):
        return None
    reports = []
    for name in sorted(os.listdir(folder)):
        if name.endswith(".json") and name != "summary.json":
            with open(os.path.join(folder, name), "r", encoding="utf-8") as fh:
                reports.append(AuditReport.model_validate_json(fh.read()))
    return reports


def run_report(ctx: RunContext) -> StageManifest:
    """Results grid (CSV and Markdown) over every evaluated model, plus the audit figure when audited"""
    started = time.time()
    ctx.require_declared("report")
    training_logger.log_stage_start("report")
    reports = _load_reports(ctx.path("evaluate", "metrics.json"))
    rows = results_grid(reports)
    outputs = [write_grid(rows, ctx.path("report", "results.csv"), ctx.path("report", "results.md")),
               ctx.path("report", "results.md")]
    test_rows = [r for r in rows if r["split"] == Split.TEST.value]
    outputs.append(write_grid(test_rows, ctx.path("report", "results_test.csv"), ctx.path("report", "results_test.md")))
    outputs.append(ctx.path("report", "results_test.md"))
    fields, pivot = pivot_grid(rows, Split.TEST.value)
    outputs.append(write_grid(pivot, ctx.path("report", "results_pivot.csv"), ctx.path("report", "results_pivot.md"),
                              fields))
    outputs.append(ctx.path("report", "results_pivot.md"))
    audits = _load_audits(ctx)
    if audits:
        outputs.append(plot_audit(audits, ctx.path("report", "audit.png")))
        with open(ctx.path("audit", "summary.json"), "r", encoding="utf-8") as fh:
            outputs.append(write_json(ctx.path("report", "audit_summary.json"), json.load(fh)))
    return ctx.record("report", outputs, started, {"rows": len(rows), "audited": bool(audits)})
