"""
Stage Registry
Declared stage dependencies, per-stage manifests and the run context shared by stage handlers
"""
from dataclasses import dataclass, field
from datetime import datetime
import hashlib
import logging
import os
import time
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, Field

from core.config import CONFIG_FILENAME, DATA_DIR, STAGE_MANIFEST_DIR, UTC
from core.exceptions import ConfigMismatchError, StageOrderError
from models.experiment import ExperimentConfig
from utils.structured_logging import error_tracker, get_performance_metrics, training_logger

logger = logging.getLogger(__name__)

# stage -> upstream stages; an upstream recorded per variant is met by its "<stage>:<variant>" keys
STAGE_DEPENDENCIES: Dict[str, Sequence[str]] = {
    "prepare": (),
    "train-ddpm": ("prepare",),
    "sample": ("train-ddpm",),
    "train-filter": ("prepare",),
    "gate": ("sample", "train-filter"),
    "audit": ("gate",),
    "train-unimodal": ("prepare",),
    "train-multimodal": ("train-unimodal",),
    "evaluate": ("train-unimodal",),
    "explain": ("train-unimodal",),
    "report": ("evaluate",),
}


def stage_key(stage: str, variant: Optional[str] = None) -> str:
    return f"{stage}:{variant}" if variant else stage


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class StageManifest(BaseModel):
    stage: str
    config_hash: str
    status: str = "ok"
    started_at: str
    finished_at: str
    duration_seconds: float
    outputs: Dict[str, str] = Field(default_factory=dict)
    details: Dict[str, object] = Field(default_factory=dict)
    performance: Dict[str, object] = Field(default_factory=dict)
    errors: Dict[str, object] = Field(default_factory=dict)


@dataclass
class RunContext:
    """Everything a stage handler needs: config, run directory and execution switches"""
    config: ExperimentConfig
    run_dir: str
    device: str = "cpu"
    workers: int = 1
    allow_config_mismatch: bool = False
    config_hash: str = field(init=False)

    def __post_init__(self):
        self.config_hash = self.config.config_hash()
        os.makedirs(self.run_dir, exist_ok=True)

    def path(self, *parts: str) -> str:
        return os.path.join(self.run_dir, *parts)

    @property
    def data_dir(self) -> str:
        return self.path(DATA_DIR)

    def manifest_path(self, key: str) -> str:
        return self.path(STAGE_MANIFEST_DIR, key.replace(":", "__") + ".json")

    def read_manifest(self, key: str) -> Optional[StageManifest]:
        path = self.manifest_path(key)
        if not os.path.exists(path):
            return None
        with open(path, "r", encoding="utf-8") as fh:
            return StageManifest.model_validate_json(fh.read())

    def has_stage(self, key: str) -> bool:
        return self.read_manifest(key) is not None

    def require(self, stage: str, *keys: str):
        """
        Raises:
            StageOrderError: an upstream stage has no manifest
            ConfigMismatchError: an upstream stage ran under another config, unless overridden
        """
        for key in keys:
            manifest = self.read_manifest(key)
            if manifest is None:
                raise StageOrderError(stage, key)
            if manifest.config_hash != self.config_hash:
                if not self.allow_config_mismatch:
                    raise ConfigMismatchError(key, self.config_hash, manifest.config_hash, stage=stage)
                logger.warning(
                    f"Using '{key}' produced under a different config",
                    extra={"stage": stage, "details": {"upstream": key, "found": manifest.config_hash}},
                )

    def resolve_upstream(self, stage: str) -> List[str]:
        """Manifest keys satisfying a declared dependency: the stage itself or its completed variants"""
        if self.has_stage(stage):
            return [stage]
        return completed_variants(self, stage)

    def require_declared(self, stage: str):
        for upstream in STAGE_DEPENDENCIES[stage]:
            keys = self.resolve_upstream(upstream)
            if not keys:
                raise StageOrderError(stage, upstream)
            self.require(stage, *keys)

    def save_config(self):
        path = self.path(CONFIG_FILENAME)
        if not os.path.exists(path):
            self.config.dump(path)

    def record(self, key: str, outputs: Sequence[str], started: float, details: Optional[dict] = None) -> StageManifest:
        """Write the stage manifest: config hash, produced files with digests, resources, error counts"""
        hashed = {}
        for out in sorted(set(outputs)):
            if os.path.isfile(out):
                hashed[os.path.relpath(out, self.run_dir)] = file_sha256(out)
        finished = time.time()
        manifest = StageManifest(
            stage=key,
            config_hash=self.config_hash,
            started_at=datetime.fromtimestamp(started, UTC).isoformat(),
            finished_at=datetime.fromtimestamp(finished, UTC).isoformat(),
            duration_seconds=round(finished - started, 3),
            outputs=hashed,
            details=details or {},
            performance=get_performance_metrics(),
            errors=error_tracker.get_error_stats(),
        )
        path = self.manifest_path(key)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(manifest.model_dump_json(indent=2))
        training_logger.log_stage_finish(key, finished - started)
        return manifest


def completed_stages(ctx: RunContext) -> List[str]:
    folder = ctx.path(STAGE_MANIFEST_DIR)
    if not os.path.isdir(folder):
        return []
    return sorted(name[:-5].replace("__", ":") for name in os.listdir(folder) if name.endswith(".json"))


def completed_variants(ctx: RunContext, stage: str) -> List[str]:
    """Completed keys of a regime-specific stage, e.g. ['train-unimodal:pretrain', 'train-unimodal:real']"""
    return [key for key in completed_stages(ctx) if key.startswith(stage + ":")]
