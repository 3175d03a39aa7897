from typing import Sequence

import hypothesis
import numpy as np
import pytest

from models.experiment import ExperimentConfig
from models.records import DatasetManifest, Label, ManifestEntry, Modality

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.load_profile("default")


def build_manifest(families: Sequence[Sequence[Label]], modalities: Sequence[Modality] = (Modality.OCTA_SMAC,),
                   prefix: str = "F") -> DatasetManifest:
    """One patient per family, one eye per label, one entry per (eye, modality)"""
    entries = []
    for f_idx, labels in enumerate(families):
        family = f"{prefix}{f_idx:03d}"
        patient = f"{family}-P0"
        for e_idx, label in enumerate(labels):
            eye = f"{patient}-E{e_idx}"
            for modality in modalities:
                entries.append(ManifestEntry(
                    path=f"images/{Modality(modality).value}/{eye}.png",
                    family_id=family,
                    patient_id=patient,
                    eye_id=eye,
                    modality=modality,
                    label=label,
                ))
    return DatasetManifest(entries=entries)


@pytest.fixture
def manifest_builder():
    return build_manifest


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    """Smallest desk-scale run that still exercises every stage"""
    return ExperimentConfig.desk_scale(
        output_dir=str(tmp_path / "run"),
        dataset={"kind": "phantom", "phantom": {"side": 32, "n_families": 24, "eyes_per_family": 2,
                                                "metadata_signal": 0.8}},
        splits={"tolerance": 0.1},
        preprocess={"side": 32},
        ddpm={"denoiser": {"block_channels": (32, 32), "layers_per_block": 1, "norm_num_groups": 8},
              "num_train_timesteps": 50, "max_final_snr": 10.0, "epochs": 1, "batch_size": 8, "samples_per_class": 4,
              "sample_batch_size": 4},
        filter={"epochs": 2, "batch_size": 16, "embed_dim": 16, "gate": {"budget": 3}},
        unimodal={"epochs": 2, "step_size": 1, "patience": 2, "batch_size": 8, "augment": False},
        fusion={"epochs": 3},
        film={"enabled": True, "epochs": 1},
        audit={"sample_size": 8, "top_k": 2},
    )
