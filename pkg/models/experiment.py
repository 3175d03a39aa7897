"""
Experiment Configuration Models
One YAML document describes a whole run; these models validate it
"""
from typing import Dict, List, Literal, Optional, Tuple
import hashlib
import json
import logging

import yaml
from pydantic import BaseModel, Field, ValidationError as PydanticValidationError, field_validator, model_validator

from core.config import resolve_output_dir, resolve_workers
from core.exceptions import ConfigurationError
from models.records import Modality, PIPELINE_MODALITIES

logger = logging.getLogger(__name__)


class PhantomConfig(BaseModel):
    side: int = Field(64, ge=32, le=1024)
    modalities: List[Modality] = Field(default_factory=lambda: list(PIPELINE_MODALITIES))
    class_signal_strength: float = Field(1.0, ge=0.0, le=1.0)
    n_families: int = Field(60, ge=4)
    eyes_per_family: int = Field(2, ge=1, le=8)
    positive_fraction: float = Field(0.4, gt=0.0, lt=1.0)
    metadata_signal: float = Field(0.0, ge=0.0, le=1.0)
    noise_level: float = Field(0.05, ge=0.0, le=0.5)
    seed: int = 0

    @field_validator("modalities")
    @classmethod
    def validate_modalities(cls, v):
        unsupported = [m for m in v if m not in PIPELINE_MODALITIES]
        if unsupported:
            raise ValueError(f"Phantom styles exist only for {[m.value for m in PIPELINE_MODALITIES]}")
        if not v:
            raise ValueError("At least one phantom modality is required")
        return list(dict.fromkeys(v))


class DatasetSource(BaseModel):
    kind: Literal["phantom", "manifest"] = "phantom"
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    manifest_path: Optional[str] = None
    metadata_path: Optional[str] = None
    image_root: Optional[str] = None

    @model_validator(mode="after")
    def validate_source(self):
        if self.kind == "manifest" and not self.manifest_path:
            raise ValueError("dataset.manifest_path is required when dataset.kind is 'manifest'")
        return self


class SplitParams(BaseModel):
    test_frac: float = Field(0.2, gt=0.0, lt=1.0)
    val_frac: float = Field(0.2, gt=0.0, lt=1.0)
    tolerance: float = Field(0.05, ge=0.0, le=1.0)
    size_tolerance: float = Field(0.05, ge=0.0, le=0.5)
    max_attempts: int = Field(200, ge=1)
    seed: int = 0


class PreprocessConfig(BaseModel):
    side: int = Field(256, ge=8, le=2048)
    bscan_threshold_frac: float = Field(0.10, ge=0.0, lt=1.0)
    bscan_threshold: Optional[float] = Field(None, ge=0.0, le=1.0)
    fundus_background_frac: float = Field(0.05, ge=0.0, lt=1.0)
    fundus_zoom: float = Field(1.1, ge=1.0, le=4.0)
    interpolation: Literal["bilinear", "nearest"] = "bilinear"


class AugmentConfig(BaseModel):
    """Augmentation ranges; out-of-range values are clamped rather than rejected"""
    rotate_deg: float = 10.0
    shear_deg: float = 5.0
    brightness: float = 0.1
    contrast: float = 0.1
    zoom: float = 0.1
    crop: float = 0.05

    @field_validator("rotate_deg")
    @classmethod
    def clamp_rotate(cls, v):
        return float(min(max(v, 0.0), 180.0))

    @field_validator("shear_deg")
    @classmethod
    def clamp_shear(cls, v):
        return float(min(max(v, 0.0), 45.0))

    @field_validator("brightness", "contrast")
    @classmethod
    def clamp_colour(cls, v):
        return float(min(max(v, 0.0), 0.9))

    @field_validator("zoom", "crop")
    @classmethod
    def clamp_geometry(cls, v):
        return float(min(max(v, 0.0), 0.5))

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(rotate_deg=0, shear_deg=0, brightness=0, contrast=0, zoom=0, crop=0)


class DenoiserConfig(BaseModel):
    block_channels: Tuple[int, ...] = (64, 128, 128)
    layers_per_block: int = Field(2, ge=1)
    attention_head_channels: int = Field(32, ge=1)
    num_classes: int = Field(2, ge=1)
    time_embed_dim: Optional[int] = Field(None, ge=1)
    in_channels: int = Field(1, ge=1)
    norm_num_groups: int = Field(32, ge=1)

    @model_validator(mode="after")
    def validate_widths(self):
        if not self.block_channels or any(c <= 0 for c in self.block_channels):
            raise ValueError("Denoiser channel widths must be positive")
        if self.block_channels[-1] % self.attention_head_channels:
            raise ValueError(
                f"Attention head channels {self.attention_head_channels} must divide "
                f"the attended width {self.block_channels[-1]}"
            )
        if any(c % self.norm_num_groups for c in self.block_channels):
            raise ValueError("Group-norm group count must divide every channel width")
        return self

    @property
    def embedding_width(self) -> int:
        return self.time_embed_dim or self.block_channels[0] * 4


class DDPMConfig(BaseModel):
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    num_train_timesteps: int = Field(1000, ge=2)
    beta_start: float = Field(0.0015, gt=0.0, lt=1.0)
    beta_end: float = Field(0.0195, gt=0.0, lt=1.0)
    max_final_snr: float = Field(1e-3, gt=0.0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    augment: bool = False
    samples_per_class: int = Field(1200, ge=0)
    sample_batch_size: int = Field(32, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def validate_schedule(self):
        if self.beta_start > self.beta_end:
            raise ValueError("ddpm.beta_start must not exceed ddpm.beta_end")
        return self


class GateConfig(BaseModel):
    thresholds: Dict[Modality, Optional[float]] = Field(
        default_factory=lambda: {
            Modality.OCTA_SMAC: 0.90,
            Modality.OCT_BONH: 0.99,
            Modality.OCT_BMAC: 0.96,
            Modality.FAF: None,
        }
    )
    budget: int = Field(1000, gt=0)

    @field_validator("thresholds")
    @classmethod
    def validate_thresholds(cls, v):
        for modality, threshold in v.items():
            if threshold is not None and not 0.0 <= threshold <= 1.0:
                raise ValueError(f"Gate threshold for {modality.value} must lie in [0, 1]")
        return v

    def threshold_for(self, modality: Modality) -> Optional[float]:
        return self.thresholds.get(Modality(modality))


BackboneName = Literal["efficientnet_b0", "small_cnn"]


class FilterConfig(BaseModel):
    backbone: BackboneName = "efficientnet_b0"
    pretrained: bool = True
    modalities: List[Modality] = Field(default_factory=lambda: list(PIPELINE_MODALITIES))
    embed_dim: int = Field(128, ge=2)
    epochs: int = Field(100, ge=1)
    lr: float = Field(1e-5, gt=0.0)
    weight_decay: float = Field(0.1, ge=0.0)
    batch_size: int = Field(32, ge=1)
    gate: GateConfig = Field(default_factory=GateConfig)
    seed: int = 0


class UnimodalConfig(BaseModel):
    backbone: BackboneName = "efficientnet_b0"
    epochs: int = Field(200, ge=1)
    pretrain_epochs: Optional[int] = Field(None, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    step_size: int = Field(50, ge=1)
    step_gamma: float = Field(0.5, gt=0.0, le=1.0)
    patience: int = Field(20, ge=1)
    batch_size: int = Field(16, ge=1)
    focal_gamma: float = Field(2.0, ge=0.0)
    focal_alpha: float = Field(0.25, gt=0.0, le=1.0)
    augment: bool = True
    seed: int = 0


class FusionConfig(BaseModel):
    use_metadata: bool = False
    hidden: Tuple[int, int] = (16, 8)
    epochs: int = Field(200, ge=1)
    lr: float = Field(1e-2, gt=0.0)
    batch_size: int = Field(32, ge=1)
    focal_gamma: float = Field(2.0, ge=0.0)
    focal_alpha: float = Field(0.25, gt=0.0, le=1.0)
    seed: int = 0

    @property
    def input_width(self) -> int:
        return len(PIPELINE_MODALITIES) + (2 if self.use_metadata else 0)


class FiLMConfig(BaseModel):
    enabled: bool = False
    epochs: int = Field(50, ge=1)
    lr: float = Field(1e-3, gt=0.0)


class AuditConfig(BaseModel):
    sample_size: int = Field(200, ge=2)
    memorization_threshold: float = Field(0.999, gt=0.0, le=1.0)
    alpha: float = Field(0.01, gt=0.0, lt=1.0)
    top_k: int = Field(3, ge=0)
    seed: int = 0


class ExplainConfig(BaseModel):
    images_per_cell: int = Field(1, ge=1)
    overlay_alpha: float = Field(0.4, ge=0.0, le=1.0)
    colormap: str = "jet"


class ExperimentConfig(BaseModel):
    name: str = "retina-synth"
    seed: int = 0
    output_dir: str = "runs/default"
    workers: int = Field(1, ge=1)
    device: str = "auto"
    dataset: DatasetSource = Field(default_factory=DatasetSource)
    splits: SplitParams = Field(default_factory=SplitParams)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    ddpm: DDPMConfig = Field(default_factory=DDPMConfig)
    filter: FilterConfig = Field(default_factory=FilterConfig)
    unimodal: UnimodalConfig = Field(default_factory=UnimodalConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    film: FiLMConfig = Field(default_factory=FiLMConfig)
    audit: AuditConfig = Field(default_factory=AuditConfig)
    explain: ExplainConfig = Field(default_factory=ExplainConfig)

    @model_validator(mode="after")
    def validate_consistency(self):
        if self.dataset.kind == "phantom" and self.dataset.phantom.side != self.preprocess.side:
            logger.warning(
                "Phantom side differs from preprocess side; phantoms will be resized",
                extra={"details": {"phantom": self.dataset.phantom.side, "preprocess": self.preprocess.side}},
            )
        return self

    @classmethod
    def desk_scale(cls, **overrides) -> "ExperimentConfig":
        """64-pixel preset with a small backbone and short schedules for CPU runs"""
        base = {
            "dataset": {"kind": "phantom", "phantom": {"side": 64, "n_families": 60, "eyes_per_family": 2}},
            "preprocess": {"side": 64},
            "ddpm": {
                "denoiser": {"block_channels": (32, 64, 64), "attention_head_channels": 32},
                "epochs": 30,
                "batch_size": 16,
                "samples_per_class": 120,
            },
            "filter": {"backbone": "small_cnn", "pretrained": False, "epochs": 8, "lr": 1e-3,
                       "weight_decay": 1e-4, "gate": {"budget": 100}},
            "unimodal": {"backbone": "small_cnn", "epochs": 40, "step_size": 15, "patience": 10, "batch_size": 16},
            "fusion": {"epochs": 150},
            "audit": {"sample_size": 100},
        }
        return cls.model_validate(_deep_merge(base, overrides))

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigurationError(f"Config file not found: {path}", field="config")
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Config file is not valid YAML: {e}", field="config")
        preset = raw.pop("preset", None)
        try:
            if preset == "desk":
                return cls.desk_scale(**raw)
            if preset not in (None, "full"):
                raise ConfigurationError(f"Unknown preset '{preset}'", field="preset")
            return cls.model_validate(raw)
        except PydanticValidationError as e:
            raise ConfigurationError(
                "Experiment configuration is invalid",
                details={"errors": json.loads(e.json())},
            )

    def dump(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.model_dump(mode="json"), fh, sort_keys=True)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form, excluding run-location fields"""
        payload = self.model_dump(mode="json", exclude={"output_dir", "workers", "device"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_env_overrides(self) -> "ExperimentConfig":
        return self.model_copy(update={
            "output_dir": resolve_output_dir(self.output_dir),
            "workers": resolve_workers(self.workers),
        })


def _deep_merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged
