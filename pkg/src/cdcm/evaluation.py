"""Scoring, decision thresholds, classification metrics and histograms.

Scores are oriented so that larger means more anomalous: the distance to the
center for metric models and the sigmoid output for classifiers. A sample is
predicted anomalous iff ``score > threshold``; a score exactly on the
threshold counts as normal.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigurationError, UndefinedAUCError
from .losses import LossConfig, LossFamily, euclidean_distances
from .models import forward

CE_THRESHOLD = 0.5
DEEP_SAD_PERCENTILE = 95.0
REPORT_METRICS = ("precision", "recall", "f2", "accuracy", "aucroc")


class ScoreKind(str, Enum):
    DISTANCE = "distance"
    PROBABILITY = "probability"


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    kind: ScoreKind = ScoreKind.DISTANCE
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        self.kind = ScoreKind(self.kind)
        if self.scores.shape != self.labels.shape:
            raise ConfigurationError("scores and labels differ in length")
        if self.groups is not None:
            self.groups = np.asarray(self.groups)
            if self.groups.shape != self.scores.shape:
                raise ConfigurationError("groups and scores differ in length")
        if self.kind is ScoreKind.DISTANCE and np.any(self.scores < 0):
            raise ConfigurationError("distance scores must be >= 0")
        if self.kind is ScoreKind.PROBABILITY and np.any((self.scores < 0) | (self.scores > 1)):
            raise ConfigurationError("probability scores must lie in [0, 1]")


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f2: float
    accuracy: float
    aucroc: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    flags: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def decision_threshold(loss_family, margin=None, train_normal_scores=None):
    """Threshold rule per loss family.

    CE losses use 0.5, cDCM uses its margin, Deep SAD the 95th percentile
    (linear interpolation) of training-normal distances.
    """
    fam = LossFamily(loss_family)
    if fam is LossFamily.CDCM:
        if margin is None:
            raise ConfigurationError("cDCM threshold needs the margin")
        return float(margin)
    if fam is LossFamily.DEEP_SAD:
        s = np.asarray(train_normal_scores if train_normal_scores is not None else [], dtype=np.float64)
        if s.size == 0:
            raise ConfigurationError("Deep SAD threshold needs non-empty training-normal scores")
        return float(np.percentile(s, DEEP_SAD_PERCENTILE, method="linear"))
    return CE_THRESHOLD


def classify(scores, threshold):
    if not math.isfinite(threshold):
        raise ConfigurationError("threshold must be finite")
    s = scores.scores if isinstance(scores, ScoreSet) else np.asarray(scores, dtype=np.float64)
    return (s > threshold).astype(np.int64)


def f_beta(precision, recall, beta=2.0):
    """(1 + b^2) P R / (b^2 P + R); defined as 0 when P = R = 0."""
    denom = beta * beta * precision + recall
    if denom == 0:
        return 0.0
    return (1 + beta * beta) * precision * recall / denom


def confusion_metrics(preds, labels, beta=2.0):
    """Counts plus precision/recall/accuracy/F-beta.

    Zero denominators give 0 and add a flag instead of raising.
    """
    preds = np.asarray(preds).astype(np.int64).ravel()
    labels = np.asarray(labels).astype(np.int64).ravel()
    if preds.size == 0 or preds.shape != labels.shape:
        raise ConfigurationError("predictions and labels must be non-empty and of equal length")
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    flags = []
    if tp + fp == 0:
        precision = 0.0
        flags.append("precision_undefined")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        flags.append("recall_undefined")
    else:
        recall = tp / (tp + fn)
    if precision == 0 and recall == 0:
        flags.append("f_beta_undefined")
    return {
        "precision": precision,
        "recall": recall,
        "f2": f_beta(precision, recall, beta),
        "accuracy": (tp + tn) / preds.size,
        "tp": tp,
        "fp": fp,
        "tn": tn,
        "fn": fn,
        "flags": flags,
    }


def auc_roc(scores):
    """Mann-Whitney AUC with average ranks for ties (higher score = anomaly)."""
    if not isinstance(scores, ScoreSet):
        raise TypeError("auc_roc expects a ScoreSet")
    y = scores.labels
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUCROC needs both normal and anomaly samples")
    ranks = rankdata(scores.scores, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate_scores(scores: ScoreSet, threshold, beta=2.0) -> MetricsReport:
    m = confusion_metrics(classify(scores, threshold), scores.labels, beta)
    try:
        auc = auc_roc(scores)
    except UndefinedAUCError:
        auc = math.nan
        m["flags"].append("aucroc_undefined")
    return MetricsReport(aucroc=auc, threshold=float(threshold), **m)


def score_subset(net, subset, loss_cfg: LossConfig, batch_size=256, device="cpu") -> ScoreSet:
    """Run ``net`` over ``subset`` and convert outputs to anomaly scores."""
    out = forward(net, subset.images, batch_size=batch_size, device=device)
    if loss_cfg.family.is_metric:
        scores = euclidean_distances(out.astype(np.float64), np.asarray(loss_cfg.center)).numpy()
        kind = ScoreKind.DISTANCE
    else:
        scores = out.reshape(-1).astype(np.float64)
        kind = ScoreKind.PROBABILITY
    return ScoreSet(scores, subset.labels, kind, subset.groups)


def threshold_for(loss_cfg: LossConfig, train_scores: Optional[ScoreSet] = None):
    normals = None
    if train_scores is not None:
        normals = train_scores.scores[train_scores.labels == 0]
    return decision_threshold(loss_cfg.family, loss_cfg.margin, normals)


def prediction_histogram(scores: ScoreSet, threshold, bins=50, value_range=None):
    """Per-group bin counts over a shared range.

    Returns ``{"edges", "counts": {group: counts}, "threshold"}``. The default
    range is [0, max score] for distances and [0, 1] for probabilities.
    """
    if bins < 2:
        raise ConfigurationError("bins must be >= 2")
    if value_range is None:
        if scores.kind is ScoreKind.PROBABILITY:
            value_range = (0.0, 1.0)
        else:
            top = float(scores.scores.max()) if scores.scores.size else 1.0
            value_range = (0.0, max(top, float(threshold), 1e-12))
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    groups = scores.groups if scores.groups is not None else np.where(scores.labels == 1, "anomaly", "normal")
    counts = {}
    for g in sorted(set(groups.tolist())):
        counts[g], _ = np.histogram(scores.scores[groups == g], bins=edges)
    return {"edges": edges, "counts": counts, "threshold": float(threshold)}


def histogram_rows(hist):
    edges = hist["edges"]
    rows = []
    for i in range(len(edges) - 1):
        row = {"bin_low": edges[i], "bin_high": edges[i + 1]}
        for g, c in hist["counts"].items():
            row[g] = int(c[i])
        rows.append(row)
    return rows


def write_histogram(hist, csv_path, image_path=None, title=None):
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    rows = histogram_rows(hist)
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
        fh.write(f"# threshold,{hist['threshold']!r}\n")
    if image_path is not None:
        plot_histogram(hist, image_path, title)


def plot_histogram(hist, path, title=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .plotting import save_figure

    edges = hist["edges"]
    centers = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(6, 4))
    for g, c in hist["counts"].items():
        ax.bar(centers, c, width=width, alpha=0.5, label=g)
    ax.axvline(hist["threshold"], color="black")
    ax.set_xlabel("score")
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    save_figure(fig, path)
    plt.close(fig)


def aggregate_runs(reports):
    """Mean and sample std (ddof=1; 0 for a single report) per metric.

    F2 is averaged over runs, which is not the F2 of the averaged precision
    and recall.
    """
    if not reports:
        raise ConfigurationError("aggregate_runs needs at least one report")
    out = {}
    for name in REPORT_METRICS:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out[name] = (float(np.mean(vals)), std)
    return out


def write_metrics(rows, csv_path=None, json_path=None):
    """Write a list of flat dicts (one per run/fold/split) as CSV and/or JSON."""
    if csv_path is not None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        fields = []
        for r in rows:
            fields += [k for k in r if k not in fields]
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for r in rows:
                w.writerow({k: (";".join(v) if isinstance(v, list) else v) for k, v in r.items()})
    if json_path is not None:
        Path(json_path).write_text(json.dumps(rows, indent=2, sort_keys=True, default=float) + "\n")
