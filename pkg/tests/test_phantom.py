import os

import numpy as np
import pytest
from scipy.stats import ks_2samp
from sklearn.metrics import roc_auc_score

from models.experiment import PhantomConfig
from models.records import Label, Modality, PIPELINE_MODALITIES
from services.dataman import load_manifest, validate_manifest
from services.phantom import (
    MANIFEST_FILENAME,
    generate_phantoms,
    mean_in_region,
    phantom_batch,
    render_phantom,
    signal_region_mask,
)


def _balanced_labels(n_per_class):
    return [Label.POS] * n_per_class + [Label.NEG] * n_per_class


def test_counts_follow_layout(tmp_path):
    config = PhantomConfig(side=32, n_families=4, eyes_per_family=2)
    manifest = generate_phantoms(config, str(tmp_path))
    assert len({e.eye_id for e in manifest.entries}) == 8
    assert len({e.family_id for e in manifest.entries}) == 4
    assert len(manifest.entries) == 8 * len(PIPELINE_MODALITIES)
    for eye in {e.eye_id for e in manifest.entries}:
        assert sorted(e.modality.value for e in manifest.entries if e.eye_id == eye) == \
            sorted(m.value for m in PIPELINE_MODALITIES)
    validate_manifest(manifest, root=str(tmp_path))
    assert len(manifest.metadata) == len({e.patient_id for e in manifest.entries})


def test_both_classes_are_present(tmp_path):
    manifest = generate_phantoms(PhantomConfig(side=32, n_families=5, eyes_per_family=2), str(tmp_path))
    labels = {e.label for e in manifest.entries}
    assert labels == {Label.POS, Label.NEG}


def test_generation_is_seeded_and_worker_independent(tmp_path):
    config = PhantomConfig(side=32, n_families=4, eyes_per_family=2, seed=7)
    a = generate_phantoms(config, str(tmp_path / "a"), workers=1)
    b = generate_phantoms(config, str(tmp_path / "b"), workers=3)
    assert a.entries == b.entries
    for entry in a.entries:
        with open(tmp_path / "a" / entry.path, "rb") as fa, open(tmp_path / "b" / entry.path, "rb") as fb:
            assert fa.read() == fb.read()
    assert load_manifest(os.path.join(tmp_path, "a", MANIFEST_FILENAME)).entries == a.entries


@pytest.mark.parametrize("modality", PIPELINE_MODALITIES)
def test_images_are_unit_range(modality):
    image = render_phantom(modality, Label.POS, 32, 1.0, np.random.default_rng(0))
    assert image.shape == (32, 32)
    assert image.dtype == np.float32
    assert 0.0 <= image.min() and image.max() <= 1.0


def test_unknown_style_is_rejected():
    with pytest.raises(ValueError):
        render_phantom(Modality.COL, Label.POS, 32, 1.0, np.random.default_rng(0))


@pytest.mark.parametrize("modality", PIPELINE_MODALITIES)
def test_zero_signal_gives_indistinguishable_classes(modality):
    pos = mean_in_region(phantom_batch(modality, [Label.POS] * 80, 32, 0.0, seed=1), modality)
    neg = mean_in_region(phantom_batch(modality, [Label.NEG] * 80, 32, 0.0, seed=2), modality)
    assert ks_2samp(pos, neg).pvalue >= 0.01


@pytest.mark.parametrize("modality", PIPELINE_MODALITIES)
def test_same_draws_with_zero_signal_give_identical_images(modality):
    pos = render_phantom(modality, Label.POS, 32, 0.0, np.random.default_rng(3))
    neg = render_phantom(modality, Label.NEG, 32, 0.0, np.random.default_rng(3))
    np.testing.assert_array_equal(pos, neg)


@pytest.mark.slow
@pytest.mark.parametrize("modality", PIPELINE_MODALITIES)
def test_full_signal_is_linearly_detectable(modality):
    labels = _balanced_labels(200)
    images = phantom_batch(modality, labels, 64, 1.0, seed=5)
    score = mean_in_region(images, modality)
    y = np.array([1 if lb == Label.POS else 0 for lb in labels])
    auc = roc_auc_score(y, score)
    assert max(auc, 1.0 - auc) > 0.9


def test_band_and_vessel_styles_differ_in_row_structure():
    def row_to_column_variance(modality):
        images = phantom_batch(modality, [Label.NEG] * 10, 48, 1.0, seed=4)
        return float(np.mean([img.mean(axis=1).var() / (img.mean(axis=0).var() + 1e-9) for img in images]))

    assert row_to_column_variance(Modality.OCT_BMAC) > 5 * row_to_column_variance(Modality.OCTA_SMAC)


def test_signal_region_is_central():
    disc = signal_region_mask(Modality.OCTA_SMAC, 64)
    strip = signal_region_mask(Modality.OCT_BONH, 64)
    assert disc[32, 32] and not disc[0, 0]
    assert strip[:, 32].all() and not strip[:, 0].any()
    assert 0.05 < disc.mean() < 0.2
