"""
Dataset records and report types shared by every pipeline stage
"""
from enum import Enum
from typing import Dict, List, Optional, Tuple
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from core.config import SYNTHETIC_FAMILY_ID

logger = logging.getLogger(__name__)


class Modality(str, Enum):
    """Retinal imaging modality tags recognised by the modality filter"""
    COL = "COL"
    FAF = "FAF"
    OCTA_EMAC = "OCTA-EMAC"
    OCTA_EONH = "OCTA-EONH"
    OCTA_WONH = "OCTA-WONH"
    OCTA_WMAC = "OCTA-WMAC"
    OCTA_ORCCMAC = "OCTA-ORCCMAC"
    OCTA_ORCCONH = "OCTA-ORCCONH"
    OCTA_RMAC = "OCTA-RMAC"
    OCTA_RONH = "OCTA-RONH"
    OCTA_DMAC = "OCTA-DMAC"
    OCTA_DONH = "OCTA-DONH"
    OCTA_SMAC = "OCTA-SMAC"
    OCTA_SONH = "OCTA-SONH"
    OCT_WONH = "OCT-WONH"
    OCT_WMAC = "OCT-WMAC"
    OCT_ORCCMAC = "OCT-ORCCMAC"
    OCT_ORCCONH = "OCT-ORCCONH"
    OCT_RMAC = "OCT-RMAC"
    OCT_RONH = "OCT-RONH"
    OCT_DMAC = "OCT-DMAC"
    OCT_DONH = "OCT-DONH"
    OCT_SMAC = "OCT-SMAC"
    OCT_SONH = "OCT-SONH"
    OCT_BMAC = "OCT-BMAC"
    OCT_BONH = "OCT-BONH"


# Modalities used by the classifiers, in fusion-input order
PIPELINE_MODALITIES: Tuple[Modality, ...] = (
    Modality.OCTA_SMAC,
    Modality.OCT_BONH,
    Modality.OCT_BMAC,
    Modality.FAF,
)


def is_bscan(modality: Modality) -> bool:
    return Modality(modality) in (Modality.OCT_BMAC, Modality.OCT_BONH)


def is_fundus(modality: Modality) -> bool:
    return Modality(modality) in (Modality.FAF, Modality.COL)


class Label(str, Enum):
    """AmyloidPET status"""
    POS = "POS"
    NEG = "NEG"
    UNKNOWN = "UNKNOWN"

    @property
    def class_index(self) -> int:
        """Conditioning index for the generator: NEG=0, POS=1"""
        if self is Label.UNKNOWN:
            raise ValueError("UNKNOWN label has no class index")
        return 1 if self is Label.POS else 0

    @property
    def negative_target(self) -> float:
        """Classifier target: the networks output the probability of AmyloidPET-negative"""
        if self is Label.UNKNOWN:
            raise ValueError("UNKNOWN label has no training target")
        return 1.0 if self is Label.NEG else 0.0

    @classmethod
    def from_index(cls, index: int) -> "Label":
        return cls.POS if int(index) == 1 else cls.NEG


class Provenance(str, Enum):
    REAL = "REAL"
    SYNTHETIC = "SYNTHETIC"


class Split(str, Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


class Sex(str, Enum):
    MALE = "MALE"
    FEMALE = "FEMALE"


class TrainRegime(str, Enum):
    REAL_ONLY = "real"
    SYNTH_ONLY = "synth"
    PRETRAIN_FINETUNE = "pretrain"


class ImageRecord(BaseModel):
    """One preprocessed image with its identity"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray
    modality: Modality
    label: Label
    eye_id: str
    patient_id: str
    family_id: str
    provenance: Provenance = Provenance.REAL

    @field_validator("image")
    @classmethod
    def validate_pixels(cls, v):
        if v.ndim not in (2, 3) or (v.ndim == 3 and v.shape[-1] != 3):
            raise ValueError(f"Image must be 2-D or HxWx3, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("Image contains non-finite pixels")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("Image pixels must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def validate_synthetic(self):
        if self.provenance == Provenance.SYNTHETIC:
            if self.family_id != SYNTHETIC_FAMILY_ID:
                raise ValueError("Synthetic records must use the reserved synthetic family id")
            if self.label == Label.UNKNOWN:
                raise ValueError("Synthetic records must carry a POS or NEG label")
        return self


class ManifestEntry(BaseModel):
    """One manifest line: file reference plus identity"""
    path: str
    family_id: str
    patient_id: str
    eye_id: str
    modality: Modality
    label: Label
    provenance: Provenance = Provenance.REAL

    @model_validator(mode="after")
    def validate_synthetic(self):
        if self.provenance == Provenance.SYNTHETIC:
            if self.family_id != SYNTHETIC_FAMILY_ID:
                raise ValueError("Synthetic records must use the reserved synthetic family id")
            if self.label == Label.UNKNOWN:
                raise ValueError("Synthetic records must carry a POS or NEG label")
        return self


class MetadataRecord(BaseModel):
    age_years: float = Field(..., ge=0, le=130)
    sex: Sex


class SplitAssignment(BaseModel):
    """Family-level split with the positive-class fraction each split ended up with"""
    assignments: Dict[str, Split]
    pos_fraction: Dict[Split, float] = Field(default_factory=dict)
    eye_counts: Dict[Split, int] = Field(default_factory=dict)
    global_pos_fraction: float = 0.0
    seed: int = 0

    def split_of(self, family_id: str) -> Optional[Split]:
        return self.assignments.get(family_id)

    def families(self, split: Split) -> List[str]:
        return sorted(f for f, s in self.assignments.items() if s == split)


class DatasetManifest(BaseModel):
    entries: List[ManifestEntry] = Field(default_factory=list)
    metadata: Dict[str, MetadataRecord] = Field(default_factory=dict)
    splits: Optional[SplitAssignment] = None

    def for_modality(self, modality: Modality) -> List[ManifestEntry]:
        modality = Modality(modality)
        return [e for e in self.entries if e.modality == modality]

    def in_split(self, split: Split, modality: Optional[Modality] = None) -> List[ManifestEntry]:
        if self.splits is None:
            raise ValueError("Manifest has no split assignment")
        entries = self.entries if modality is None else self.for_modality(modality)
        return [e for e in entries if self.splits.split_of(e.family_id) == split]

    def modalities(self) -> List[Modality]:
        return sorted({e.modality for e in self.entries}, key=lambda m: m.value)


class PredictionRecord(BaseModel):
    """Per-eye unimodal scores feeding the fusion head"""
    eye_id: str
    scores: Dict[Modality, float]
    metadata: Optional[Tuple[float, float]] = None
    label: Label

    @field_validator("scores")
    @classmethod
    def validate_scores(cls, v):
        for modality, p_neg in v.items():
            if not 0.0 <= p_neg <= 1.0:
                raise ValueError(f"p_neg for {modality} outside [0, 1]: {p_neg}")
        return v

    def p_pos(self, modality: Modality) -> float:
        return 1.0 - self.scores[Modality(modality)]


class FilterDecision(BaseModel):
    image_id: str
    generation_modality: Modality
    label: Label
    predicted_modality: Modality
    confidence: Dict[str, float]
    accepted: bool
    threshold_used: Optional[float] = None
    reason: str

    @property
    def predicted_confidence(self) -> float:
        return self.confidence[self.predicted_modality.value]


class MetricsReport(BaseModel):
    auroc: float
    aupr: float
    f1: float
    sensitivity: float
    specificity: float
    precision: float
    youden_threshold: float
    split: Optional[str] = None
    regime: Optional[str] = None
    modality: Optional[str] = None
    n: int = 0
    n_pos: int = 0


class KSResult(BaseModel):
    statistic: float
    p_value: float = Field(..., ge=0.0, le=1.0)


class TopMatch(BaseModel):
    synthetic_id: str
    real_id: str
    correlation: float


class AuditReport(BaseModel):
    modality: str
    svr: List[float]
    rvr: List[float]
    svs: List[float]
    wd_svr_rvr: float = Field(..., ge=0.0)
    wd_rvr_svs: float = Field(..., ge=0.0)
    ks_svr_rvr: KSResult
    ks_rvr_svs: KSResult
    n_synthetic: int
    n_real: int
    memorization_flag: bool = False
    top_matches: List[TopMatch] = Field(default_factory=list)

    @field_validator("svr", "rvr", "svs")
    @classmethod
    def validate_correlations(cls, v):
        for r in v:
            if not -1.0 - 1e-9 <= r <= 1.0 + 1e-9:
                raise ValueError(f"Correlation outside [-1, 1]: {r}")
        return v
