"""
Audit stage: max-correlation comparison of gated synthetic images against real TRAIN images
"""
import logging
import time

import numpy as np

from models.records import Split
from services.evalkit import audit_modality, trend_correlation
from services.reporting import plot_audit, plot_top_matches, write_json
from stages.data import accepted_synthetic, load_dataset, pipeline_modalities, real_dataset, synthetic_dataset
from stages.registry import RunContext, StageManifest
from utils.image_io import as_gray
from utils.structured_logging import training_logger

logger = logging.getLogger(__name__)


def _gray_planes(dataset) -> np.ndarray:
    return np.stack([as_gray(dataset.image(i)) for i in range(len(dataset))]) if len(dataset) else np.empty((0, 0, 0))


def run_audit(ctx: RunContext) -> StageManifest:
    started = time.time()
    ctx.require_declared("audit")
    training_logger.log_stage_start("audit")
    manifest = load_dataset(ctx)
    gated = set(accepted_synthetic(ctx).modalities())
    reports, outputs, skipped = [], [], []
    for modality in pipeline_modalities(manifest):
        synthetic = synthetic_dataset(ctx, modality, lambda e: 0.0) if modality in gated else None
        real = real_dataset(ctx, manifest, Split.TRAIN, lambda e: 0.0, modality, require_label=False)
        if synthetic is None or len(synthetic) < 2 or len(real) < 2:
            logger.warning(
                f"Skipping audit for {modality.value}: too few images",
                extra={"stage": "audit", "modality": modality.value,
                       "details": {"synthetic": len(synthetic) if synthetic else 0, "real": len(real)}},
            )
            skipped.append(modality.value)
            continue
        synth_images, real_images = _gray_planes(synthetic), _gray_planes(real)
        synth_ids = [e.eye_id for e in synthetic.entries]
        real_ids = [e.eye_id for e in real.entries]
        report = audit_modality(synth_images, real_images, ctx.config.audit, modality.value,
                                synth_ids, real_ids, ctx.workers)
        reports.append(report)
        outputs.append(write_json(ctx.path("audit", f"{modality.value}.json"), report.model_dump(mode="json")))
        if report.top_matches:
            synth_by_id = dict(zip(synth_ids, synth_images))
            real_by_id = dict(zip(real_ids, real_images))
            outputs.append(plot_top_matches(report.top_matches, synth_by_id, real_by_id,
                                            ctx.path("audit", f"top_matches_{modality.value}.png")))
    if reports:
        outputs.append(plot_audit(reports, ctx.path("audit", "audit.png")))
    summary = {
        "modalities": {
            r.modality: {
                "n_synthetic": r.n_synthetic,
                "n_real": r.n_real,
                "mean_svr": float(np.mean(r.svr)),
                "mean_rvr": float(np.mean(r.rvr)),
                "mean_svs": float(np.mean(r.svs)),
                "wd_svr_rvr": r.wd_svr_rvr,
                "wd_rvr_svs": r.wd_rvr_svs,
                "ks_svr_rvr_p": r.ks_svr_rvr.p_value,
                "ks_rvr_svs_p": r.ks_rvr_svs.p_value,
                "memorization_flag": r.memorization_flag,
            }
            for r in reports
        },
        "trend_correlation": trend_correlation(reports),
        "skipped": skipped,
    }
    outputs.append(write_json(ctx.path("audit", "summary.json"), summary))
    flagged = [r.modality for r in reports if r.memorization_flag]
    if flagged:
        logger.warning(f"Possible memorization in {flagged}", extra={"stage": "audit", "details": {"flagged": flagged}})
    return ctx.record("audit", outputs, started, {"audited": [r.modality for r in reports], "flagged": flagged})
