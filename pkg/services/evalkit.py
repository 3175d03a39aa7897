"""
Evaluation Service
Classification metrics and the memorization/diversity audit of synthetic images
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import kstwobign, ks_2samp, wasserstein_distance
from sklearn.metrics import average_precision_score, roc_auc_score

from core.exceptions import ConstantImageError, ValidationError
from models.experiment import AuditConfig
from models.records import AuditReport, KSResult, Label, MetricsReport, TopMatch

logger = logging.getLogger(__name__)

KERNEL_CHUNK = 256


# ---------------------------------------------------------------------------
# Correlation audit
# ---------------------------------------------------------------------------

def pearsonr(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two pixel vectors"""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValidationError("pearsonr inputs must have equal length", details={"a": a.size, "b": b.size})
    if a.size < 2:
        raise ValidationError("pearsonr needs at least 2 values")
    # zero range; a centred constant can keep a rounding residual
    if np.ptp(a) == 0.0:
        raise ConstantImageError("First input has zero variance")
    if np.ptp(b) == 0.0:
        raise ConstantImageError("Second input has zero variance")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(da @ da), np.sqrt(db @ db)
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


def _standardize(images: np.ndarray, ids: Optional[Sequence[str]]) -> np.ndarray:
    """Rows centred and scaled to unit norm, so a row dot product is their correlation"""
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    centred = flat - flat.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", centred, centred))
    zero = np.flatnonzero(np.ptp(flat, axis=1) == 0.0)
    if zero.size:
        image_id = ids[zero[0]] if ids is not None else str(int(zero[0]))
        raise ConstantImageError(f"Image {image_id} has zero variance", image_id=image_id)
    return centred / norms[:, None]


def max_corr_with_index(set_a: np.ndarray, set_b: np.ndarray, exclude_self: bool = False,
                        ids_a: Optional[Sequence[str]] = None, ids_b: Optional[Sequence[str]] = None,
                        workers: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Maximum correlation of each A image over B, and the index of the B image attaining it"""
    if len(set_b) == 0:
        raise ValidationError("Reference set is empty")
    if exclude_self:
        if len(set_a) != len(set_b):
            raise ValidationError("Within-set mode compares a set with itself")
        if len(set_b) < 2:
            raise ValidationError("Within-set mode needs at least 2 images")
    if len(set_a) == 0:
        return np.empty(0), np.empty(0, dtype=np.int64)
    za = _standardize(set_a, ids_a)
    zb = za if exclude_self and set_a is set_b else _standardize(set_b, ids_b)
    if za.shape[1] != zb.shape[1]:
        raise ValidationError("Images in both sets must have the same size")

    def chunk(start: int) -> Tuple[np.ndarray, np.ndarray]:
        corr = za[start:start + KERNEL_CHUNK] @ zb.T
        if exclude_self:
            rows = np.arange(corr.shape[0])
            corr[rows, start + rows] = -np.inf
        idx = corr.argmax(axis=1)
        return np.clip(corr[np.arange(corr.shape[0]), idx], -1.0, 1.0), idx

    starts = range(0, len(za), KERNEL_CHUNK)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(chunk, starts))
    else:
        parts = [chunk(s) for s in starts]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def max_corr_distribution(set_a: np.ndarray, set_b: np.ndarray, exclude_self: bool = False,
                          ids_a: Optional[Sequence[str]] = None, ids_b: Optional[Sequence[str]] = None,
                          workers: int = 1) -> np.ndarray:
    """
    For each image in A, its maximum Pearson correlation with any image in B.

    With exclude_self the two sets are the same collection and element i is not compared
    with itself.
    """
    return max_corr_with_index(set_a, set_b, exclude_self, ids_a, ids_b, workers)[0]


def wasserstein_1d(u: Sequence[float], v: Sequence[float]) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.size == 0 or v.size == 0:
        raise ValidationError("Wasserstein distance needs two nonempty samples")
    return float(wasserstein_distance(u, v))


def ks_two_sample(u: Sequence[float], v: Sequence[float]) -> KSResult:
    """Two-sample KS statistic with the asymptotic two-sided p-value"""
    u = np.sort(np.asarray(u, dtype=np.float64))
    v = np.sort(np.asarray(v, dtype=np.float64))
    n1, n2 = u.size, v.size
    if n1 == 0 or n2 == 0:
        raise ValidationError("KS test needs two nonempty samples")
    pooled = np.concatenate([u, v])
    cdf_u = np.searchsorted(u, pooled, side="right") / n1
    cdf_v = np.searchsorted(v, pooled, side="right") / n2
    d = float(np.max(np.abs(cdf_u - cdf_v)))
    en = np.sqrt(n1 * n2 / float(n1 + n2))
    p = float(kstwobign.sf((en + 0.12 + 0.11 / en) * d))
    return KSResult(statistic=d, p_value=min(max(p, 0.0), 1.0))


def memorization_flag(svr: Sequence[float], rvr: Sequence[float], threshold: float = 0.999,
                      alpha: float = 0.01) -> bool:
    """
    True when a synthetic image reproduces a real one (SvR reaches `threshold`), or when
    SvR lies significantly above RvR (one-sided KS at `alpha` with a higher median).
    """
    svr, rvr = np.asarray(svr, dtype=np.float64), np.asarray(rvr, dtype=np.float64)
    if svr.size == 0:
        return False
    if np.any(svr >= threshold):
        return True
    if rvr.size == 0:
        return False
    # alternative="less": the SvR CDF lies below the RvR CDF, i.e. SvR values are larger
    p = ks_2samp(svr, rvr, alternative="less").pvalue
    return bool(p < alpha and np.median(svr) > np.median(rvr))


def top_matches(synthetic: np.ndarray, real: np.ndarray, k: int = 3,
                synthetic_ids: Optional[Sequence[str]] = None, real_ids: Optional[Sequence[str]] = None,
                workers: int = 1) -> List[TopMatch]:
    """The k synthetic images closest to any real image, with their real partner"""
    values, partners = max_corr_with_index(synthetic, real, False, synthetic_ids, real_ids, workers)
    synthetic_ids = list(synthetic_ids) if synthetic_ids is not None else [str(i) for i in range(len(synthetic))]
    real_ids = list(real_ids) if real_ids is not None else [str(i) for i in range(len(real))]
    order = np.argsort(-values, kind="stable")[:k]
    return [TopMatch(synthetic_id=synthetic_ids[i], real_id=real_ids[partners[i]], correlation=float(values[i]))
            for i in order]


def audit_modality(synthetic: np.ndarray, real: np.ndarray, config: AuditConfig, modality: str,
                   synthetic_ids: Optional[Sequence[str]] = None, real_ids: Optional[Sequence[str]] = None,
                   workers: int = 1) -> AuditReport:
    """SvR, RvR and SvS distributions for one modality on a seeded synthetic sample"""
    synthetic = np.asarray(synthetic)
    real = np.asarray(real)
    synthetic_ids = list(synthetic_ids) if synthetic_ids is not None else [f"s{i}" for i in range(len(synthetic))]
    real_ids = list(real_ids) if real_ids is not None else [f"r{i}" for i in range(len(real))]
    if len(synthetic) < 2 or len(real) < 2:
        raise ValidationError(
            f"Audit for {modality} needs at least 2 synthetic and 2 real images",
            details={"synthetic": len(synthetic), "real": len(real)},
        )
    rng = np.random.default_rng(config.seed)
    if len(synthetic) > config.sample_size:
        pick = np.sort(rng.choice(len(synthetic), size=config.sample_size, replace=False))
        synthetic = synthetic[pick]
        synthetic_ids = [synthetic_ids[i] for i in pick]

    svr = max_corr_distribution(synthetic, real, False, synthetic_ids, real_ids, workers)
    rvr = max_corr_distribution(real, real, True, real_ids, real_ids, workers)
    svs = max_corr_distribution(synthetic, synthetic, True, synthetic_ids, synthetic_ids, workers)
    matches = top_matches(synthetic, real, config.top_k, synthetic_ids, real_ids, workers) if config.top_k else []
    report = AuditReport(
        modality=modality,
        svr=svr.tolist(),
        rvr=rvr.tolist(),
        svs=svs.tolist(),
        wd_svr_rvr=wasserstein_1d(svr, rvr),
        wd_rvr_svs=wasserstein_1d(rvr, svs),
        ks_svr_rvr=ks_two_sample(svr, rvr),
        ks_rvr_svs=ks_two_sample(rvr, svs),
        n_synthetic=len(synthetic),
        n_real=len(real),
        memorization_flag=memorization_flag(svr, rvr, config.memorization_threshold, config.alpha),
        top_matches=matches,
    )
    logger.info(
        f"Audit {modality}: WD(SvR,RvR)={report.wd_svr_rvr:.4f} WD(RvR,SvS)={report.wd_rvr_svs:.4f} "
        f"KS p={report.ks_rvr_svs.p_value:.3g}",
        extra={"stage": "audit", "modality": modality, "details": {"memorization": report.memorization_flag}},
    )
    return report


def trend_correlation(reports: Sequence[AuditReport]) -> Optional[float]:
    """Correlation across modalities between mean SvR and mean RvR; None below three modalities"""
    if len(reports) < 3:
        return None
    svr = [float(np.mean(r.svr)) for r in reports]
    rvr = [float(np.mean(r.rvr)) for r in reports]
    try:
        return pearsonr(svr, rvr)
    except ConstantImageError:
        return None


# ---------------------------------------------------------------------------
# Classification metrics
# ---------------------------------------------------------------------------

def _binary(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(np.int64).ravel()
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels must have equal length")
    if np.unique(labels).size < 2:
        raise ValidationError("Metrics need both classes present", details={"n": int(labels.size)})
    return scores, labels


def roc_pr_areas(scores: Sequence[float], labels: Sequence[int]) -> Tuple[float, float]:
    """(AUROC, AUPR) for scores where higher means class 1"""
    scores, labels = _binary(scores, labels)
    return float(roc_auc_score(labels, scores)), float(average_precision_score(labels, scores))


def youden_confusion(scores: Sequence[float], labels: Sequence[int]) -> Dict[str, float]:
    """
    Threshold maximizing sensitivity + specificity - 1, with confusion metrics at that threshold.

    Candidates are the lowest score (everything predicted class 1, J = 0) followed by the
    midpoints between consecutive distinct scores; the first maximum in ascending order wins.
    A score at or above the threshold predicts class 1.
    """
    scores, labels = _binary(scores, labels)
    distinct = np.unique(scores)
    candidates = np.concatenate([distinct[:1], (distinct[:-1] + distinct[1:]) / 2.0])
    predicted = scores[None, :] >= candidates[:, None]
    pos, neg = labels == 1, labels == 0
    tp = (predicted & pos).sum(axis=1)
    fp = (predicted & neg).sum(axis=1)
    sensitivity = tp / pos.sum()
    specificity = 1.0 - fp / neg.sum()
    best = int(np.argmax(sensitivity + specificity - 1.0))
    tp_b, fp_b = int(tp[best]), int(fp[best])
    precision = tp_b / (tp_b + fp_b) if tp_b + fp_b else 0.0
    sens = float(sensitivity[best])
    f1 = 2 * precision * sens / (precision + sens) if precision + sens else 0.0
    return {
        "threshold": float(candidates[best]),
        "sensitivity": sens,
        "specificity": float(specificity[best]),
        "precision": float(precision),
        "f1": float(f1),
        "youden": float(sensitivity[best] + specificity[best] - 1.0),
    }


def evaluate_scores(p_neg: Sequence[float], labels: Sequence[Label], split: Optional[str] = None,
                    regime: Optional[str] = None, modality: Optional[str] = None) -> MetricsReport:
    """
    Metric suite for AmyloidPET+ detection from network outputs.

    Networks output p_neg; scores are inverted to p_pos = 1 - p_neg and POS is the positive
    class, so sensitivity and specificity describe AmyloidPET+ detection. The Youden threshold
    is reported on the p_pos scale.
    """
    labels = [Label(lb) for lb in labels]
    if any(lb == Label.UNKNOWN for lb in labels):
        raise ValidationError("Evaluation labels must be POS or NEG")
    p_pos = 1.0 - np.asarray(p_neg, dtype=np.float64)
    y_pos = np.array([1 if lb == Label.POS else 0 for lb in labels])
    auroc, aupr = roc_pr_areas(p_pos, y_pos)
    confusion = youden_confusion(p_pos, y_pos)
    return MetricsReport(
        auroc=auroc,
        aupr=aupr,
        f1=confusion["f1"],
        sensitivity=confusion["sensitivity"],
        specificity=confusion["specificity"],
        precision=confusion["precision"],
        youden_threshold=confusion["threshold"],
        split=split,
        regime=regime,
        modality=modality,
        n=int(y_pos.size),
        n_pos=int(y_pos.sum()),
    )
