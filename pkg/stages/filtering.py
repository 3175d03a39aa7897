"""
Filter stages: modality-filter training and gating of the sampled images
"""
import logging
import os
import time

from models.records import DatasetManifest, Split
from services.dataman import load_manifest, preprocess, resolve_path, save_manifest
from services.diffusion import SAMPLE_STATUS_PENDING
from services.modfilter import evaluate_filter, gate_synthetic, load_filter, save_filter, train_filter, write_rejection_log
from services.reporting import plot_confusion, write_json
from services.training import seed_everything
from stages.data import ACCEPTED_MANIFEST, load_dataset, real_dataset
from stages.generation import SYNTHETIC_MANIFEST
from stages.registry import RunContext, StageManifest
from utils.image_io import read_png
from utils.structured_logging import training_logger

logger = logging.getLogger(__name__)

STATUS_ACCEPTED = "accepted"
STATUS_REJECTED = "rejected"


def filter_path(ctx: RunContext) -> str:
    return ctx.path("filter", "filter.pt")


def run_train_filter(ctx: RunContext) -> StageManifest:
    started = time.time()
    ctx.require_declared("train-filter")
    training_logger.log_stage_start("train-filter")
    config = ctx.config.filter
    seed_everything(config.seed)
    manifest = load_dataset(ctx)
    present = set(manifest.modalities())
    modalities = [m for m in config.modalities if m in present]
    index = {m: i for i, m in enumerate(modalities)}
    entries = DatasetManifest(entries=[e for e in manifest.entries if e.modality in index],
                              splits=manifest.splits)

    def target(entry) -> int:
        return index[entry.modality]

    datasets = {
        split: real_dataset(ctx, entries, split, target, augment=(split == Split.TRAIN),
                            require_label=False, seed=config.seed)
        for split in (Split.TRAIN, Split.VAL, Split.TEST)
    }
    model, history = train_filter(datasets[Split.TRAIN], datasets[Split.VAL], modalities, config, ctx.device)
    outputs = [save_filter(filter_path(ctx), model, config, modalities)]
    report = {}
    for split in (Split.VAL, Split.TEST):
        table = evaluate_filter(model, datasets[split], modalities, config.pretrained, ctx.device)
        report[split.value] = table
        training_logger.log_metric("train-filter", f"{split.value.lower()}_mcc", table["mcc"])
        outputs.append(plot_confusion(table["confusion"], table["modalities"],
                                      ctx.path("filter", f"confusion_{split.value.lower()}.png")))
    report["history"] = history
    outputs.append(write_json(ctx.path("filter", "report.json"), report))
    return ctx.record("train-filter", outputs, started, {
        "modalities": [m.value for m in modalities],
        "mcc": {k: report[k]["mcc"] for k in (Split.VAL.value, Split.TEST.value)},
    })


def _with_status(path: str, status: str) -> str:
    suffix = f"_{SAMPLE_STATUS_PENDING}.png"
    return path[:-len(suffix)] + f"_{status}.png" if path.endswith(suffix) else path


def _existing_file(path: str, root: str) -> str:
    """The sampled file under its pending name, or under the name a previous gate run gave it"""
    for status in (SAMPLE_STATUS_PENDING, STATUS_ACCEPTED, STATUS_REJECTED):
        full = resolve_path(_with_status(path, status), root)
        if os.path.exists(full):
            return full
    return resolve_path(path, root)


def run_gate(ctx: RunContext) -> StageManifest:
    """Filter every sampled image in manifest order; accepted files are renamed *_accepted.png"""
    started = time.time()
    ctx.require_declared("gate")
    training_logger.log_stage_start("gate")
    predictor = load_filter(filter_path(ctx), ctx.device)
    synthetic = load_manifest(ctx.path(SYNTHETIC_MANIFEST))
    by_id = {e.eye_id: e for e in synthetic.entries}
    gated_modalities = set(predictor.modalities)
    candidates = [e for e in synthetic.entries if e.modality in gated_modalities]

    def stream():
        for e in candidates:
            image = preprocess(read_png(_existing_file(e.path, ctx.run_dir)), e.modality, ctx.config.preprocess)
            yield e.eye_id, image, e.modality, e.label

    accepted_ids, decisions = gate_synthetic(stream(), predictor, ctx.config.filter.gate)
    accepted = set(accepted_ids)
    kept = []
    for d in decisions:
        entry = by_id[d.image_id]
        status = STATUS_ACCEPTED if d.image_id in accepted else STATUS_REJECTED
        new_path = _with_status(entry.path, status)
        old_full, new_full = _existing_file(entry.path, ctx.run_dir), resolve_path(new_path, ctx.run_dir)
        if os.path.exists(old_full) and old_full != new_full:
            os.replace(old_full, new_full)
        if status == STATUS_ACCEPTED:
            kept.append(entry.model_copy(update={"path": new_path}))
    log_path = write_rejection_log(decisions, ctx.path("gate", "decisions.jsonl"))
    accepted_path = save_manifest(DatasetManifest(entries=kept), ctx.path(ACCEPTED_MANIFEST))
    counts = {}
    for e in kept:
        key = f"{e.modality.value}/{e.label.value}"
        counts[key] = counts.get(key, 0) + 1
    return ctx.record("gate", [log_path, accepted_path], started, {
        "decisions": len(decisions),
        "accepted": len(kept),
        "accepted_per_class": dict(sorted(counts.items())),
    })
