import json
import os
import time

import pytest

from core.config import EXIT_CONFIG_ERROR, EXIT_MISSING_DEPENDENCY, EXIT_OK
from core.exceptions import ConfigMismatchError, StageOrderError
from main import build_parser, main, resolve_config
from stages.registry import RunContext, completed_stages, completed_variants, file_sha256


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("RETINA_OUTPUT_DIR", "RETINA_WORKERS", "RETINA_DEVICE"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def config_file(tiny_config, tmp_path):
    path = str(tmp_path / "tiny.yaml")
    tiny_config.dump(path)
    return path


def _manifest(run_dir, key):
    with open(os.path.join(run_dir, "stages", key.replace(":", "__") + ".json"), encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Parsing and configuration
# ---------------------------------------------------------------------------

def test_parser_knows_regime_stages():
    args = build_parser().parse_args(["--workers", "2", "train-multimodal", "--regime", "pretrain", "--metadata"])
    assert (args.command, args.regime, args.metadata, args.workers) == ("train-multimodal", "pretrain", True, 2)
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train-unimodal", "--regime", "mixed"])


def test_run_directory_config_is_reused(tiny_config, tmp_path):
    run_dir = tmp_path / "existing"
    run_dir.mkdir()
    tiny_config.dump(str(run_dir / "config.yaml"))
    args = build_parser().parse_args(["--run-dir", str(run_dir), "--workers", "3", "report"])
    config = resolve_config(args)
    assert config.output_dir == str(run_dir)
    assert config.workers == 3
    assert config.config_hash() == tiny_config.config_hash()


def test_environment_overrides_output_dir(config_file, tmp_path, monkeypatch):
    monkeypatch.setenv("RETINA_OUTPUT_DIR", str(tmp_path / "from-env"))
    config = resolve_config(build_parser().parse_args(["--config", config_file, "prepare"]))
    assert config.output_dir == str(tmp_path / "from-env")


def test_invalid_config_exits_with_config_code(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("preset: bogus\n", encoding="utf-8")
    assert main(["--config", str(path), "--run-dir", str(tmp_path / "run"), "prepare"]) == EXIT_CONFIG_ERROR


# ---------------------------------------------------------------------------
# Stage registry
# ---------------------------------------------------------------------------

def test_stage_before_its_dependency_exits_with_missing_code(config_file, tiny_config):
    assert main(["--config", config_file, "gate"]) == EXIT_MISSING_DEPENDENCY
    assert main(["--config", config_file, "evaluate"]) == EXIT_MISSING_DEPENDENCY
    with open(os.path.join(tiny_config.output_dir, "logs", "pipeline.log"), encoding="utf-8") as fh:
        assert "requires stage" in fh.read()


def test_require_names_the_missing_stage(tiny_config, tmp_path):
    ctx = RunContext(config=tiny_config, run_dir=str(tmp_path / "run"))
    with pytest.raises(StageOrderError) as exc:
        ctx.require_declared("gate")
    assert exc.value.missing_stage == "sample"
    assert exc.value.exit_code == EXIT_MISSING_DEPENDENCY


def test_declared_dependency_is_met_by_any_recorded_variant(tiny_config, tmp_path):
    ctx = RunContext(config=tiny_config, run_dir=str(tmp_path / "run"))
    for stage in ("train-multimodal", "evaluate", "explain"):
        with pytest.raises(StageOrderError) as exc:
            ctx.require_declared(stage)
        assert exc.value.missing_stage == "train-unimodal"

    ctx.record("prepare", [], time.time())
    ctx.record("train-unimodal:pretrain", [], time.time())
    assert ctx.resolve_upstream("prepare") == ["prepare"]
    assert ctx.resolve_upstream("train-unimodal") == ["train-unimodal:pretrain"]
    for stage in ("train-multimodal", "evaluate", "explain"):
        ctx.require_declared(stage)
    with pytest.raises(StageOrderError) as exc:
        ctx.require_declared("report")
    assert exc.value.missing_stage == "evaluate"


def test_declared_variant_from_another_config_is_refused(tiny_config, tmp_path):
    run_dir = str(tmp_path / "run")
    RunContext(config=tiny_config, run_dir=run_dir).record("train-unimodal:real", [], time.time())
    changed = tiny_config.model_copy(update={"seed": tiny_config.seed + 1})
    with pytest.raises(ConfigMismatchError):
        RunContext(config=changed, run_dir=run_dir).require_declared("evaluate")


def test_stage_manifest_records_hash_and_digests(tiny_config, tmp_path):
    ctx = RunContext(config=tiny_config, run_dir=str(tmp_path / "run"))
    out = ctx.path("unimodal", "real", "val_reports.json")
    os.makedirs(os.path.dirname(out))
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("{}")
    manifest = ctx.record("train-unimodal:real", [out, ctx.path("missing.json")], time.time(), {"n": 1})
    assert manifest.config_hash == tiny_config.config_hash()
    assert manifest.outputs == {os.path.join("unimodal", "real", "val_reports.json"): file_sha256(out)}
    assert manifest.performance["system"]["cpu_count"] >= 1
    assert os.path.exists(ctx.path("stages", "train-unimodal__real.json"))
    assert completed_stages(ctx) == ["train-unimodal:real"]
    assert completed_variants(ctx, "train-unimodal") == ["train-unimodal:real"]
    assert completed_variants(ctx, "train-multimodal") == []


def test_config_mismatch_is_refused_unless_allowed(tiny_config, tmp_path):
    run_dir = str(tmp_path / "run")
    RunContext(config=tiny_config, run_dir=run_dir).record("prepare", [], time.time())
    changed = tiny_config.model_copy(update={"seed": tiny_config.seed + 1})
    with pytest.raises(ConfigMismatchError) as exc:
        RunContext(config=changed, run_dir=run_dir).require("train-filter", "prepare")
    assert exc.value.exit_code == EXIT_CONFIG_ERROR
    RunContext(config=changed, run_dir=run_dir, allow_config_mismatch=True).require("train-filter", "prepare")


def test_run_location_does_not_change_the_hash(tiny_config):
    moved = tiny_config.model_copy(update={"output_dir": "elsewhere", "workers": 8, "device": "cuda"})
    assert moved.config_hash() == tiny_config.config_hash()


def test_prepare_then_mismatched_stage_exits_with_config_code(config_file, tiny_config, tmp_path):
    assert main(["--config", config_file, "prepare"]) == EXIT_OK
    manifest = _manifest(tiny_config.output_dir, "prepare")
    assert manifest["config_hash"] == tiny_config.config_hash()
    manifest_tsv = os.path.join(tiny_config.output_dir, "data", "manifest.tsv")
    assert manifest["outputs"][os.path.join("data", "manifest.tsv")] == file_sha256(manifest_tsv)
    assert os.path.exists(os.path.join(tiny_config.output_dir, "config.yaml"))

    changed = tiny_config.model_copy(update={"filter": tiny_config.filter.model_copy(update={"epochs": 3})})
    changed_file = str(tmp_path / "changed.yaml")
    changed.dump(changed_file)
    assert main(["--config", changed_file, "train-filter"]) == EXIT_CONFIG_ERROR


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_full_pipeline_on_phantoms(config_file, tiny_config):
    run_dir = tiny_config.output_dir
    assert main(["--config", config_file, "all"]) == EXIT_OK

    done = completed_stages(RunContext(config=tiny_config, run_dir=run_dir))
    for key in ("prepare", "train-ddpm", "sample", "train-filter", "gate", "audit", "train-unimodal:real",
                "train-multimodal:real", "train-multimodal:real-metadata", "evaluate", "explain", "report"):
        assert key in done

    metrics_path = os.path.join(run_dir, "evaluate", "metrics.json")
    with open(metrics_path, encoding="utf-8") as fh:
        reports = json.load(fh)["reports"]
    names = {(r["regime"], r["modality"], r["split"]) for r in reports}
    assert ("real", "multimodal+metadata", "TEST") in names
    assert ("real", "FAF", "VAL") in names
    for path in ("report/results.csv", "report/results.md", "report/results_pivot.csv", "explain/cam_sheet.png",
                 "gate/decisions.jsonl", "filter/report.json", "audit/summary.json"):
        assert os.path.exists(os.path.join(run_dir, path)), path

    with open(metrics_path, "rb") as fh:
        first = fh.read()
    assert main(["--config", config_file, "evaluate"]) == EXIT_OK
    with open(metrics_path, "rb") as fh:
        assert fh.read() == first
