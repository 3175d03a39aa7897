import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from core.exceptions import DataIntegrityError, PreprocessingError, StratificationError
from models.experiment import AugmentConfig, PreprocessConfig
from models.records import DatasetManifest, Label, ManifestEntry, MetadataRecord, Modality, Sex, Split
from services.classify import negative_target
from services.dataman import (
    ImageDataset,
    augment,
    encode_metadata,
    load_manifest,
    make_splits,
    preprocess,
    save_manifest,
    validate_manifest,
)
from tests.conftest import build_manifest

POS, NEG = Label.POS, Label.NEG


def _split_families(manifest: DatasetManifest, splits):
    by_split = {s: set() for s in Split}
    for e in manifest.entries:
        by_split[splits.split_of(e.family_id)].add(e.family_id)
    return by_split


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def test_single_eye_families_put_two_in_test():
    manifest = build_manifest([[POS]] * 4 + [[NEG]] * 6)
    splits = make_splits(manifest, test_frac=0.2, val_frac=0.2, seed=3)
    assert len(splits.families(Split.TEST)) == 2
    assert len(splits.assignments) == 10
    assert splits.eye_counts[Split.TEST] == 2


def test_splits_are_deterministic_under_seed():
    families = [[POS, NEG], [NEG, NEG], [POS], [NEG], [POS, POS], [NEG, NEG], [NEG], [POS, NEG],
                [NEG], [NEG, POS], [NEG], [NEG, NEG], [POS], [NEG], [NEG, NEG]]
    manifest = build_manifest(families)
    first = make_splits(manifest, seed=11, tolerance=0.1)
    second = make_splits(manifest, seed=11, tolerance=0.1)
    assert first == second


def test_family_holding_all_positives_blocks_split():
    manifest = build_manifest([[POS, POS, POS, POS]] + [[NEG]] * 12)
    with pytest.raises(StratificationError) as exc:
        make_splits(manifest, seed=0, max_attempts=20)
    assert exc.value.details["blocking_family"] == "F000"
    assert "F000" in exc.value.message


def test_splits_need_both_classes():
    with pytest.raises(StratificationError):
        make_splits(build_manifest([[NEG]] * 10))


def test_synthetic_entries_are_not_split():
    manifest = build_manifest([[POS]] * 4 + [[NEG]] * 6)
    manifest.entries.append(ManifestEntry(
        path="synthetic/a.png", family_id="__synthetic__", patient_id="s", eye_id="s0",
        modality=Modality.OCTA_SMAC, label=POS, provenance="SYNTHETIC",
    ))
    splits = make_splits(manifest, seed=1)
    assert "__synthetic__" not in splits.assignments


@settings(max_examples=40, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 3), min_size=10, max_size=30),
    pos_rate=st.floats(0.2, 0.6),
    seed=st.integers(0, 10_000),
)
def test_random_manifests_never_leak_families(sizes, pos_rate, seed):
    rng = np.random.default_rng(seed)
    families = [[POS if rng.random() < pos_rate else NEG for _ in range(n)] for n in sizes]
    flat = [lb for fam in families for lb in fam]
    assume(POS in flat and NEG in flat)
    manifest = build_manifest(families, modalities=(Modality.OCTA_SMAC, Modality.FAF))
    try:
        splits = make_splits(manifest, seed=seed, tolerance=0.05, max_attempts=30)
    except StratificationError:
        assume(False)
        return
    by_split = _split_families(manifest, splits)
    assert not by_split[Split.TRAIN] & by_split[Split.VAL]
    assert not by_split[Split.TRAIN] & by_split[Split.TEST]
    assert not by_split[Split.VAL] & by_split[Split.TEST]
    for split, frac in splits.pos_fraction.items():
        n = splits.eye_counts[split]
        assert abs(frac - splits.global_pos_fraction) <= max(0.05, 1.0 / (2 * n)) + 1e-12


# ---------------------------------------------------------------------------
# Manifest integrity
# ---------------------------------------------------------------------------

def test_eye_with_two_patients_is_rejected():
    manifest = build_manifest([[POS], [NEG]])
    manifest.entries.append(manifest.entries[0].model_copy(update={"patient_id": "other", "modality": Modality.FAF}))
    with pytest.raises(DataIntegrityError):
        validate_manifest(manifest, check_files=False)


def test_duplicate_eye_modality_needs_override():
    manifest = build_manifest([[POS], [NEG]])
    manifest.entries.append(manifest.entries[0].model_copy(update={"path": "images/dup.png"}))
    with pytest.raises(DataIntegrityError):
        validate_manifest(manifest, check_files=False)
    validate_manifest(manifest, allow_duplicates=True, check_files=False)


def test_missing_image_file_is_reported(tmp_path):
    with pytest.raises(DataIntegrityError):
        validate_manifest(build_manifest([[POS]]), root=str(tmp_path))


def test_manifest_file_is_tab_separated_with_header(tmp_path):
    path = save_manifest(build_manifest([[POS], [NEG]]), str(tmp_path / "manifest.tsv"))
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    assert lines[0].split("\t") == ["path", "family_id", "patient_id", "eye_id", "modality", "label", "provenance"]
    assert len(lines) == 3
    assert load_manifest(path).entries[1].label == NEG


def test_bad_manifest_header_is_rejected(tmp_path):
    path = tmp_path / "manifest.tsv"
    path.write_text("path\tlabel\nx.png\tPOS\n", encoding="utf-8")
    with pytest.raises(DataIntegrityError):
        load_manifest(str(path))


# ---------------------------------------------------------------------------
# Preprocessing and augmentation
# ---------------------------------------------------------------------------

def test_blank_bscan_has_no_content_rows():
    with pytest.raises(PreprocessingError):
        preprocess(np.zeros((64, 64)), Modality.OCT_BMAC, PreprocessConfig(side=32))


def test_non_finite_pixels_are_rejected():
    image = np.full((16, 16), 0.5)
    image[3, 3] = np.nan
    with pytest.raises(PreprocessingError):
        preprocess(image, Modality.OCTA_SMAC, PreprocessConfig(side=16))


def test_bscan_is_cropped_to_the_bright_band():
    image = np.zeros((1536, 1536), dtype=np.float64)
    image[500:901] = 0.5 + 0.5 * np.linspace(0.0, 1.0, 1536)[None, :]
    out = preprocess(image, Modality.OCT_BONH, PreprocessConfig(side=256))
    assert out.shape == (256, 256, 3)
    assert out.dtype == np.float32
    # every output row comes from the band, so rows are identical and never dark
    assert out.min() > 0.45
    np.testing.assert_allclose(out[0], out[-1], atol=1e-6)


def test_square_image_at_target_size_is_unchanged():
    rng = np.random.default_rng(0)
    image = rng.random((32, 32))
    config = PreprocessConfig(side=32, interpolation="nearest")
    once = preprocess(image, Modality.OCTA_SMAC, config)
    np.testing.assert_array_equal(once[..., 0], image.astype(np.float32))
    np.testing.assert_array_equal(preprocess(once, Modality.OCTA_SMAC, config), once)


def test_output_is_three_channel_unit_range():
    image = (np.arange(40 * 50) % 255).reshape(40, 50).astype(np.uint8)
    out = preprocess(image, Modality.FAF, PreprocessConfig(side=24))
    assert out.shape == (24, 24, 3)
    assert 0.0 <= out.min() and out.max() <= 1.0


def test_zero_ranges_leave_image_untouched():
    image = np.random.default_rng(1).random((24, 24, 3)).astype(np.float32)
    out = augment(image, Modality.FAF, np.random.default_rng(5), AugmentConfig.disabled())
    np.testing.assert_array_equal(out, image)


def test_bscan_zoom_is_forced_to_one():
    image = np.random.default_rng(2).random((24, 24, 3)).astype(np.float32)
    zoom_only = AugmentConfig(rotate_deg=0, shear_deg=0, brightness=0, contrast=0, zoom=0.3, crop=0)
    np.testing.assert_array_equal(augment(image, Modality.OCT_BMAC, np.random.default_rng(5), zoom_only), image)
    assert not np.array_equal(augment(image, Modality.OCTA_SMAC, np.random.default_rng(5), zoom_only), image)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), side=st.integers(8, 40))
def test_augment_is_seeded_and_keeps_shape(seed, side):
    image = np.random.default_rng(seed).random((side, side, 3)).astype(np.float32)
    a = augment(image, Modality.OCTA_SMAC, np.random.default_rng(seed))
    b = augment(image, Modality.OCTA_SMAC, np.random.default_rng(seed))
    assert a.shape == image.shape
    np.testing.assert_array_equal(a, b)
    assert 0.0 <= a.min() and a.max() <= 1.0


# ---------------------------------------------------------------------------
# Metadata and datasets
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("age, sex, expected", [
    (70, Sex.FEMALE, (0.70, 1.0)),
    (0, Sex.MALE, (0.0, 0.0)),
    (103, Sex.MALE, (1.03, 0.0)),
])
def test_encode_metadata(age, sex, expected):
    np.testing.assert_allclose(encode_metadata(MetadataRecord(age_years=age, sex=sex)), expected)


def test_dataset_items_follow_target_fn():
    manifest = build_manifest([[POS], [NEG]])
    images = [np.full((8, 8, 3), 0.25, dtype=np.float32), np.full((8, 8, 3), 0.75, dtype=np.float32)]
    dataset = ImageDataset(manifest.entries, None, PreprocessConfig(side=8), negative_target, images=images)
    tensor, target, index = dataset[1]
    assert tensor.shape == (3, 8, 8)
    assert float(target) == 1.0
    assert index == 1
    assert float(dataset[0][1]) == 0.0
    assert dataset.stack().shape == (2, 3, 8, 8)
