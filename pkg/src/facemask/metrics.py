"""Binary classification metrics with MASK as the positive class.

Ratios whose denominator is zero are reported as ``None``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .backbone import Backbone
from .dataset import DatasetManifest, Label, Split
from .nnhead import LOG2, HeadParameters, cross_entropy, head_forward


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def table(self) -> str:
        return (
            "              pred mask  pred no_mask\n"
            f"true mask     {self.tp:>9d}  {self.fn:>12d}\n"
            f"true no_mask  {self.fp:>9d}  {self.tn:>12d}\n"
        )


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float | None
    precision: float | None
    sensitivity: float | None
    specificity: float | None
    iou: float | None
    mcc: float | None
    cross_entropy: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        rows = [
            ("Accuracy", _pct(self.accuracy)),
            ("Precision", _pct(self.precision)),
            ("Sensitivity", _pct(self.sensitivity)),
            ("Specificity", _pct(self.specificity)),
            ("Intersection over Union (IoU)", _pct(self.iou)),
            ("Matthews Correlation Coefficient (MCC)", _num(self.mcc, ".4f")),
            ("Classification Loss", _num(self.cross_entropy, ".4e")),
        ]
        width = max(len(r[0]) for r in rows)
        lines = [f"{'Performance Metric':<{width}}  Value"]
        lines += [f"{name:<{width}}  {val}" for name, val in rows]
        return "\n".join(lines) + "\n"


def _pct(x):
    return "undefined" if x is None else f"{100 * x:.2f}%"


def _num(x, fmt):
    return "undefined" if x is None else format(x, fmt)


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def confusion(preds, truths) -> ConfusionMatrix:
    preds, truths = list(preds), list(truths)
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(truths)} truths")
    if not preds:
        raise ValueError("empty input")
    tp = fp = tn = fn = 0
    for p, t in zip(preds, truths):
        if p is Label.MASK:
            if t is Label.MASK:
                tp += 1
            else:
                fp += 1
        elif t is Label.MASK:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, tn, fn)


def compute_metrics(cm: ConfusionMatrix, cross_entropy: float | None = None) -> MetricsReport:
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    # python ints: the MCC denominator product cannot overflow
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = None if den == 0 else (tp * tn - fp * fn) / math.sqrt(den)
    return MetricsReport(
        accuracy=_ratio(tp + tn, cm.total),
        precision=_ratio(tp, tp + fp),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        iou=_ratio(tp, tp + fp + fn),
        mcc=mcc,
        cross_entropy=cross_entropy,
    )


@dataclass(frozen=True)
class RocCurve:
    points: list[tuple[float, float]]
    auc: float | None

    def to_csv(self) -> str:
        lines = ["fpr,tpr"] + [f"{f!r},{t!r}" for f, t in self.points]
        lines.append(f"# auc={'undefined' if self.auc is None else repr(self.auc)}")
        return "\n".join(lines) + "\n"


def roc(scores, truths) -> RocCurve:
    """ROC over thresholds at every distinct score; scores are P(MASK)."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = list(truths)
    if len(scores) != len(truths):
        raise ValueError(f"length mismatch: {len(scores)} scores vs {len(truths)} truths")
    pos = np.array([t is Label.MASK for t in truths], dtype=bool)
    n_pos = int(pos.sum())
    n_neg = len(truths) - n_pos
    if n_pos == 0 or n_neg == 0:
        return RocCurve([], None)

    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], pos[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    auc = 0.0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        dtp = int(p[i:j].sum())
        dfp = (j - i) - dtp
        # trapezoid between consecutive points, in count units
        auc += dfp * (tp + dtp / 2.0)
        tp += dtp
        fp += dfp
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return RocCurve(points, auc / (n_pos * n_neg))


def predict(features: np.ndarray, params: HeadParameters) -> np.ndarray:
    """EVAL-mode class probabilities for an (N, H, W, C) batch."""
    return head_forward(features, params, train=False).probs


def evaluate(manifest: DatasetManifest, split: Split, backbone: Backbone,
             params: HeadParameters, loss_base: str = LOG2
             ) -> tuple[MetricsReport, ConfusionMatrix, RocCurve]:
    records = manifest.split(split)
    if not records:
        raise ValueError(f"{split.value} split is empty")
    features = backbone.record_features(manifest, records)
    probs = predict(features, params)
    truths = [r.label for r in records]
    preds = [Label.from_index(i) for i in probs.argmax(axis=1)]
    onehot = np.stack([t.onehot() for t in truths])
    ce = cross_entropy(probs, onehot, loss_base)
    cm = confusion(preds, truths)
    return compute_metrics(cm, ce), cm, roc(probs[:, 0], truths)


def write_reports(out_dir: str | Path, report: MetricsReport, cm: ConfusionMatrix,
                  curve: RocCurve, prefix: str = "") -> None:
    out_dir = Path(out_dir)
    (out_dir / f"{prefix}metrics.json").write_text(report.to_json() + "\n")
    (out_dir / f"{prefix}metrics.txt").write_text(report.table())
    (out_dir / f"{prefix}confusion.json").write_text(cm.to_json() + "\n")
    (out_dir / f"{prefix}roc.csv").write_text(curve.to_csv())
