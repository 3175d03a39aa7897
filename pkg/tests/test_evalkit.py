import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ks_2samp, kstwobign

from core.exceptions import ConstantImageError, ValidationError
from models.experiment import AuditConfig
from models.records import AuditReport, KSResult, Label
from services.evalkit import (
    audit_modality,
    evaluate_scores,
    ks_two_sample,
    max_corr_distribution,
    memorization_flag,
    pearsonr,
    roc_pr_areas,
    trend_correlation,
    wasserstein_1d,
    youden_confusion,
)

samples = st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=30)


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------

def test_pearsonr_examples():
    x = np.random.default_rng(0).random(50)
    assert pearsonr(x, x) == pytest.approx(1.0)
    assert pearsonr([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    a, b = np.array([1, 2, 3, 4.0]), np.array([1, 2, 3, 5.0])
    expected = np.mean((a - a.mean()) * (b - b.mean())) / (a.std() * b.std())
    assert pearsonr(a, b) == pytest.approx(expected, abs=1e-12)


def test_pearsonr_rejects_constant_input():
    with pytest.raises(ConstantImageError):
        pearsonr([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValidationError):
        pearsonr([1, 2], [1, 2, 3])


@pytest.mark.parametrize("value", [0.1, 0.7, 1 / 3])
def test_constant_fractional_input_is_rejected(value):
    with pytest.raises(ConstantImageError):
        pearsonr(np.full(3, value), [1, 2, 3])
    with pytest.raises(ConstantImageError):
        pearsonr([1, 2, 3], [value] * 3)


def test_member_of_reference_set_has_max_correlation_one():
    rng = np.random.default_rng(1)
    b = rng.random((4, 6, 6))
    out = max_corr_distribution(b[2:3], b)
    np.testing.assert_allclose(out, [1.0])


def test_within_set_pair_gives_their_mutual_correlation():
    pair = np.array([[1.0, -1.0, 0.0, 0.0], [0.0, 1.0, -1.0, 0.0]])
    r = pearsonr(pair[0], pair[1])
    np.testing.assert_allclose(max_corr_distribution(pair, pair, exclude_self=True), [r, r])


def _brute_force(a, b, exclude_self):
    out = []
    for i, x in enumerate(a):
        out.append(max(pearsonr(x, y) for j, y in enumerate(b) if not (exclude_self and i == j)))
    return np.array(out)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n_a=st.integers(1, 6), n_b=st.integers(2, 8))
def test_kernel_matches_brute_force(seed, n_a, n_b):
    rng = np.random.default_rng(seed)
    a, b = rng.random((n_a, 5, 5)), rng.random((n_b, 5, 5))
    np.testing.assert_allclose(max_corr_distribution(a, b), _brute_force(a, b, False), rtol=0, atol=1e-10)
    np.testing.assert_allclose(max_corr_distribution(b, b, exclude_self=True), _brute_force(b, b, True),
                               rtol=0, atol=1e-10)


@pytest.mark.parametrize("value", [0.5, 0.1, 0.7])
def test_constant_image_is_named_in_the_error(value):
    images = np.random.default_rng(2).random((3, 4, 4))
    images[1] = value
    with pytest.raises(ConstantImageError) as exc:
        max_corr_distribution(images[:1], images, ids_b=["a", "b", "c"])
    assert exc.value.image_id == "b"


def test_within_set_mode_needs_two_images():
    one = np.random.default_rng(3).random((1, 4, 4))
    with pytest.raises(ValidationError):
        max_corr_distribution(one, one, exclude_self=True)
    with pytest.raises(ValidationError):
        max_corr_distribution(one, np.empty((0, 4, 4)))


# ---------------------------------------------------------------------------
# Distribution distances
# ---------------------------------------------------------------------------

def test_wasserstein_examples():
    assert wasserstein_1d([0.2, 0.5, 0.9], [0.2, 0.5, 0.9]) == 0.0
    assert wasserstein_1d([0.0], [1.0]) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        wasserstein_1d([], [1.0])


@settings(max_examples=50, deadline=None)
@given(u=samples, v=samples, w=samples)
def test_wasserstein_is_a_metric(u, v, w):
    assert wasserstein_1d(u, v) >= 0.0
    assert wasserstein_1d(u, v) == pytest.approx(wasserstein_1d(v, u), abs=1e-12)
    assert wasserstein_1d(u, w) <= wasserstein_1d(u, v) + wasserstein_1d(v, w) + 1e-9


def test_ks_examples():
    same = ks_two_sample([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
    assert same.statistic == 0.0
    assert same.p_value == pytest.approx(1.0)
    assert ks_two_sample([0.0, 0.1], [0.5, 0.7, 0.9]).statistic == 1.0
    result = ks_two_sample([1, 2, 3, 4], [1.5, 2.5, 3.5, 4.5])
    assert result.statistic == pytest.approx(0.25)
    with pytest.raises(ValidationError):
        ks_two_sample([], [1.0])


@settings(max_examples=50, deadline=None)
@given(u=samples, v=samples)
def test_ks_statistic_matches_scipy(u, v):
    result = ks_two_sample(u, v)
    assert result.statistic == pytest.approx(ks_2samp(u, v).statistic, abs=1e-12)
    assert 0.0 <= result.p_value <= 1.0


@settings(max_examples=50, deadline=None)
@given(u=samples, v=samples)
def test_ks_p_value_follows_asymptotic_formula(u, v):
    d = ks_2samp(u, v).statistic
    en = np.sqrt(len(u) * len(v) / (len(u) + len(v)))
    expected = min(max(kstwobign.sf((en + 0.12 + 0.11 / en) * d), 0.0), 1.0)
    assert ks_two_sample(u, v).p_value == pytest.approx(expected, abs=1e-6)


# ---------------------------------------------------------------------------
# Memorization audit
# ---------------------------------------------------------------------------

def test_memorization_rule():
    rvr = np.linspace(0.5, 0.8, 40)
    assert memorization_flag(np.append(rvr[:10] - 0.2, 1.0), rvr)
    assert not memorization_flag(rvr - 0.1, rvr)
    assert memorization_flag(np.minimum(rvr + 0.15, 0.99), rvr)
    assert not memorization_flag([], rvr)


def _structured_real(rng, n=20, side=8):
    base = rng.random((side, side))
    return np.stack([base + 0.5 * rng.random((side, side)) for _ in range(n)])


def test_copied_real_image_is_flagged():
    rng = np.random.default_rng(4)
    real = _structured_real(rng)
    synthetic = np.concatenate([rng.random((9, 8, 8)), real[3:4]])
    report = audit_modality(synthetic, real, AuditConfig(sample_size=200, top_k=2), "OCTA-SMAC",
                            synthetic_ids=[f"s{i}" for i in range(10)], real_ids=[f"r{i}" for i in range(20)])
    assert report.memorization_flag
    assert report.top_matches[0].synthetic_id == "s9"
    assert report.top_matches[0].real_id == "r3"
    assert report.top_matches[0].correlation == pytest.approx(1.0)
    assert len(report.top_matches) == 2


def test_dissimilar_synthetic_set_is_not_flagged():
    rng = np.random.default_rng(5)
    real = _structured_real(rng)
    report = audit_modality(rng.random((10, 8, 8)), real, AuditConfig(top_k=0), "FAF")
    assert not report.memorization_flag
    assert np.median(report.svr) < np.median(report.rvr)
    assert report.wd_svr_rvr > 0.0
    assert report.n_synthetic == 10 and report.n_real == 20
    assert report.top_matches == []


def test_audit_sample_is_seeded():
    rng = np.random.default_rng(6)
    synthetic, real = rng.random((12, 6, 6)), rng.random((5, 6, 6))
    config = AuditConfig(sample_size=5)
    first = audit_modality(synthetic, real, config, "FAF")
    assert first.n_synthetic == 5
    assert audit_modality(synthetic, real, config, "FAF") == first


def test_audit_needs_two_images_per_set():
    rng = np.random.default_rng(7)
    with pytest.raises(ValidationError):
        audit_modality(rng.random((1, 4, 4)), rng.random((5, 4, 4)), AuditConfig(), "FAF")


def _report(svr_mean: float, rvr_mean: float) -> AuditReport:
    ks = KSResult(statistic=0.0, p_value=1.0)
    return AuditReport(modality="m", svr=[svr_mean - 0.01, svr_mean + 0.01], rvr=[rvr_mean - 0.01, rvr_mean + 0.01],
                       svs=[0.5, 0.5], wd_svr_rvr=0.0, wd_rvr_svs=0.0, ks_svr_rvr=ks, ks_rvr_svs=ks,
                       n_synthetic=2, n_real=2)


def test_trend_correlation_across_modalities():
    assert trend_correlation([_report(0.5, 0.6), _report(0.6, 0.7)]) is None
    reports = [_report(0.5, 0.6), _report(0.6, 0.7), _report(0.8, 0.9)]
    assert trend_correlation(reports) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Classification metrics
# ---------------------------------------------------------------------------

def test_perfect_separation():
    scores, labels = [0.1, 0.2, 0.3, 0.7, 0.8], [0, 0, 0, 1, 1]
    assert roc_pr_areas(scores, labels) == (pytest.approx(1.0), pytest.approx(1.0))
    result = youden_confusion(scores, labels)
    assert result["sensitivity"] == 1.0 and result["specificity"] == 1.0
    assert 0.3 < result["threshold"] < 0.7


def test_constant_scores_give_chance_auroc():
    auroc, _ = roc_pr_areas([0.4] * 6, [0, 1, 0, 1, 1, 0])
    assert auroc == pytest.approx(0.5)


def test_single_class_labels_are_rejected():
    with pytest.raises(ValidationError):
        roc_pr_areas([0.1, 0.2], [1, 1])
    with pytest.raises(ValidationError):
        youden_confusion([0.1, 0.2], [0, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.booleans()), min_size=2, max_size=12))
def test_auroc_matches_pairwise_probability(points):
    scores = [s / 4 for s, _ in points]
    labels = [int(y) for _, y in points]
    if len(set(labels)) < 2:
        return
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    expected = np.mean([1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg])
    auroc, _ = roc_pr_areas(scores, labels)
    assert auroc == pytest.approx(expected)
    assert roc_pr_areas(np.exp(scores), labels)[0] == pytest.approx(auroc)


def _stepwise_average_precision(scores, labels):
    scores, labels = np.asarray(scores), np.asarray(labels)
    total, previous_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= t
        tp = (predicted & (labels == 1)).sum()
        recall = tp / (labels == 1).sum()
        total += (recall - previous_recall) * tp / predicted.sum()
        previous_recall = recall
    return total


def test_aupr_example():
    # thresholds .8, .6, .4, .2 give (recall, precision) (.5, 1), (.5, .5), (1, 2/3), (1, .5)
    _, aupr = roc_pr_areas([0.8, 0.6, 0.4, 0.2], [1, 0, 1, 0])
    assert aupr == pytest.approx(0.5 * 1.0 + 0.5 * 2 / 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.booleans()), min_size=2, max_size=12))
def test_aupr_matches_stepwise_average_precision(points):
    scores = [s / 4 for s, _ in points]
    labels = [int(y) for _, y in points]
    if len(set(labels)) < 2:
        return
    _, aupr = roc_pr_areas(scores, labels)
    assert aupr == pytest.approx(_stepwise_average_precision(scores, labels), abs=1e-12)


# unique Youden optimum at 0.55: sensitivity 2/3, specificity 4/5
EIGHT_SCORES = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
EIGHT_LABELS = np.array([0, 0, 1, 0, 0, 1, 1, 0])


def test_youden_threshold_matches_exhaustive_search():
    distinct = np.unique(EIGHT_SCORES)
    best_j, best_t = -np.inf, None
    for t in np.concatenate([distinct[:1], (distinct[:-1] + distinct[1:]) / 2]):
        pred = EIGHT_SCORES >= t
        sens = (pred & (EIGHT_LABELS == 1)).sum() / (EIGHT_LABELS == 1).sum()
        specificity = (~pred & (EIGHT_LABELS == 0)).sum() / (EIGHT_LABELS == 0).sum()
        if sens + specificity - 1 > best_j:
            best_j, best_t = sens + specificity - 1, t
    result = youden_confusion(EIGHT_SCORES, EIGHT_LABELS)
    assert result["threshold"] == pytest.approx(best_t)
    assert result["threshold"] == pytest.approx(0.55)
    assert result["sensitivity"] == pytest.approx(2 / 3)
    assert result["specificity"] == pytest.approx(0.8)
    assert result["precision"] == pytest.approx(2 / 3)
    assert result["f1"] == pytest.approx(2 / 3)


def test_inverting_scores_and_labels_swaps_sensitivity_and_specificity():
    direct = youden_confusion(EIGHT_SCORES, EIGHT_LABELS)
    inverted = youden_confusion(1.0 - EIGHT_SCORES, 1 - EIGHT_LABELS)
    assert inverted["sensitivity"] == pytest.approx(direct["specificity"])
    assert inverted["specificity"] == pytest.approx(direct["sensitivity"])
    assert roc_pr_areas(1.0 - EIGHT_SCORES, 1 - EIGHT_LABELS)[0] == pytest.approx(roc_pr_areas(EIGHT_SCORES, EIGHT_LABELS)[0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.booleans()), min_size=2, max_size=12))
def test_youden_index_is_never_below_chance(points):
    scores = np.array([s / 4 for s, _ in points])
    labels = np.array([int(y) for _, y in points])
    if len(set(labels.tolist())) < 2:
        return
    result = youden_confusion(scores, labels)
    assert result["youden"] >= 0.0
    assert result["threshold"] >= scores.min()
    assert result["sensitivity"] + result["specificity"] - 1.0 == pytest.approx(result["youden"])


def test_anti_informative_scores_are_reported_as_is():
    result = youden_confusion([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])
    assert result["youden"] == pytest.approx(0.0)
    assert result["threshold"] == pytest.approx(0.1)
    assert (result["sensitivity"], result["specificity"]) == (1.0, 0.0)
    assert result["precision"] == pytest.approx(0.5)
    assert roc_pr_areas([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])[0] == pytest.approx(0.0)


def test_network_outputs_are_inverted_before_scoring():
    labels = [Label.POS, Label.NEG, Label.POS, Label.NEG, Label.NEG]
    p_neg = [0.1, 0.9, 0.2, 0.8, 0.7]
    report = evaluate_scores(p_neg, labels, split="TEST", regime="real", modality="FAF")
    assert report.auroc == pytest.approx(1.0)
    assert report.sensitivity == 1.0 and report.specificity == 1.0
    assert 0.3 < report.youden_threshold < 0.8
    assert (report.n, report.n_pos) == (5, 2)
    with pytest.raises(ValidationError):
        evaluate_scores([0.5, 0.5], [Label.POS, Label.UNKNOWN])
