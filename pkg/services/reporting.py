"""
Reporting Service
Results grid across training regimes and the audit, ROC/PR and confusion plots
"""
import csv
import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from sklearn.metrics import precision_recall_curve, roc_curve

from models.records import AuditReport, Label, MetricsReport, PIPELINE_MODALITIES, TopMatch

logger = logging.getLogger(__name__)

GRID_METRICS = ("aupr", "auroc", "f1", "sensitivity", "specificity")
MULTIMODAL_ROWS = ("multimodal", "multimodal+metadata")
REGIME_ORDER = ("real", "synth", "pretrain")


def write_json(path: str, payload) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def results_grid(reports: Sequence[MetricsReport]) -> List[Dict[str, object]]:
    """
    Rows {unimodal modalities, multimodal with and without metadata} x regimes x splits,
    columns AUPR, AUROC, F1, sensitivity, specificity.
    """
    row_order = [m.value for m in PIPELINE_MODALITIES] + list(MULTIMODAL_ROWS)

    def key(r: MetricsReport):
        model = r.modality or ""
        return (
            row_order.index(model) if model in row_order else len(row_order),
            model,
            REGIME_ORDER.index(r.regime) if r.regime in REGIME_ORDER else len(REGIME_ORDER),
            r.split or "",
        )

    rows = []
    for r in sorted(reports, key=key):
        row = {"model": r.modality, "regime": r.regime, "split": r.split}
        row.update({m: round(float(getattr(r, m)), 3) for m in GRID_METRICS})
        rows.append(row)
    return rows


def pivot_grid(rows: Sequence[Dict[str, object]], split: str) -> Tuple[List[str], List[Dict[str, object]]]:
    """
    One row per model for a split with the regimes side by side, columns "<regime> <metric>".
    Regimes a model was not trained under are left empty.
    """
    selected = [r for r in rows if r["split"] == split]
    present = {r["regime"] for r in selected}
    regimes = [g for g in REGIME_ORDER if g in present] + sorted(present - set(REGIME_ORDER))
    fields = ["model"] + [f"{g} {m}" for g in regimes for m in GRID_METRICS]
    table: Dict[object, Dict[str, object]] = {}
    for r in selected:
        row = table.setdefault(r["model"], dict.fromkeys(fields, ""))
        row["model"] = r["model"]
        row.update({f"{r['regime']} {m}": r[m] for m in GRID_METRICS})
    return fields, list(table.values())


def write_grid(rows: Sequence[Dict[str, object]], csv_path: str, md_path: Optional[str] = None,
               fields: Optional[Sequence[str]] = None) -> str:
    fields = list(fields or ("model", "regime", "split") + GRID_METRICS)
    os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    if md_path:
        lines = ["| " + " | ".join(fields) + " |", "|" + "---|" * len(fields)]
        for row in rows:
            lines.append("| " + " | ".join(
                f"{row[f]:.3f}" if isinstance(row[f], float) else str(row[f]) for f in fields
            ) + " |")
        with open(md_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return csv_path


def plot_audit(reports: Sequence[AuditReport], path: str) -> str:
    """Max-correlation histograms per modality, annotated with WD and KS"""
    fig, axes = plt.subplots(1, max(1, len(reports)), figsize=(4 * max(1, len(reports)), 3.5), squeeze=False)
    bins = np.linspace(-1.0, 1.0, 81)
    for ax, report in zip(axes[0], reports):
        for name, values, colour in (("SvR", report.svr, "tab:red"), ("RvR", report.rvr, "tab:blue"),
                                     ("SvS", report.svs, "tab:green")):
            ax.hist(values, bins=bins, alpha=0.5, label=name, color=colour, density=True)
        lo = min(min(report.svr), min(report.rvr), min(report.svs))
        ax.set_xlim(max(-1.0, lo - 0.05), 1.0)
        ax.set_title(report.modality)
        ax.set_xlabel("max pearsonr")
        ax.text(0.02, 0.95,
                f"WD(SvR,RvR)={report.wd_svr_rvr:.3f}\nWD(RvR,SvS)={report.wd_rvr_svs:.3f}\n"
                f"KS p={report.ks_rvr_svs.p_value:.2e}",
                transform=ax.transAxes, va="top", fontsize=8)
        ax.legend(fontsize=8, loc="upper right")
    fig.tight_layout()
    return _save(fig, path)


def plot_top_matches(matches: Sequence[TopMatch], synthetic: Dict[str, np.ndarray], real: Dict[str, np.ndarray],
                     path: str) -> str:
    """Closest synthetic/real pairs side by side with their pixel scatter"""
    n = max(1, len(matches))
    fig, axes = plt.subplots(n, 3, figsize=(9, 3 * n), squeeze=False)
    for row, match in zip(axes, matches):
        s, r = synthetic[match.synthetic_id], real[match.real_id]
        row[0].imshow(s, cmap="gray", vmin=0, vmax=1)
        row[0].set_title(f"synthetic {match.synthetic_id}", fontsize=8)
        row[1].imshow(r, cmap="gray", vmin=0, vmax=1)
        row[1].set_title(f"real {match.real_id}", fontsize=8)
        row[2].scatter(r.ravel(), s.ravel(), s=1, alpha=0.3)
        row[2].set_title(f"r = {match.correlation:.3f}", fontsize=8)
        row[0].axis("off")
        row[1].axis("off")
    fig.tight_layout()
    return _save(fig, path)


def plot_roc_pr(curves: Dict[str, tuple], path: str) -> str:
    """ROC and PR panels; `curves` maps a name to (p_neg, labels)"""
    fig, (roc_ax, pr_ax) = plt.subplots(1, 2, figsize=(9, 4))
    for name, (p_neg, labels) in curves.items():
        y_pos = np.array([1 if Label(lb) == Label.POS else 0 for lb in labels])
        p_pos = 1.0 - np.asarray(p_neg, dtype=np.float64)
        if np.unique(y_pos).size < 2:
            continue
        fpr, tpr, _ = roc_curve(y_pos, p_pos)
        precision, recall, _ = precision_recall_curve(y_pos, p_pos)
        roc_ax.plot(fpr, tpr, label=name)
        pr_ax.step(recall, precision, where="post", label=name)
    roc_ax.plot([0, 1], [0, 1], "k--", linewidth=0.8)
    roc_ax.set_xlabel("1 - specificity")
    roc_ax.set_ylabel("sensitivity")
    pr_ax.set_xlabel("recall")
    pr_ax.set_ylabel("precision")
    roc_ax.legend(fontsize=7)
    pr_ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_confusion(confusion: Sequence[Sequence[int]], names: Sequence[str], path: str) -> str:
    cm = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 1.2 * len(names) + 1.5))
    ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(names)), labels=names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), labels=names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
