"""Multi-class evaluation: confusion, per-class scores, one-vs-rest ROC/PR.

Everything here is plain numpy and side-effect free. Conventions:

* argmax ties go to the lowest class index;
* a zero denominator in precision/recall/F1 yields 0;
* ROC AUC is the trapezoid under the (FPR, TPR) staircase, which equals the
  pair-ordering probability with ties counted as one half;
* PR AUC is average precision, ``sum (R_i - R_{i-1}) * P_i`` over distinct
  thresholds; the trapezoid area is kept alongside for reference.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

GRID_SIZE = 1001
MAX_CURVE_SAMPLES = 256


class UndefinedCurveError(ValueError):
    """A one-vs-rest curve cannot be formed (missing positives or negatives)."""


@dataclass
class PredictionMatrix:
    image_ids: list
    true_labels: np.ndarray
    scores: np.ndarray
    class_names: list

    def __post_init__(self):
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError(f"scores must be N x K, got shape {self.scores.shape}")
        n, k = self.scores.shape
        if len(self.image_ids) != n or self.true_labels.shape != (n,):
            raise ValueError("image_ids, true_labels and scores disagree on N")
        if len(self.class_names) != k:
            raise ValueError(f"{len(self.class_names)} class names for {k} score columns")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "true_label"] + [f"p_{c}" for c in self.class_names])
            for image_id, label, row in zip(self.image_ids, self.true_labels, self.scores):
                w.writerow([image_id, int(label)] + [f"{v:.6f}" for v in row])

    @classmethod
    def from_csv(cls, path) -> "PredictionMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path} is empty")
        header = rows[0]
        if header[:2] != ["image_id", "true_label"] or not all(h.startswith("p_") for h in header[2:]):
            raise ValueError(f"{path}: unexpected header {header[:3]}...")
        names = [h[2:] for h in header[2:]]
        body = rows[1:]
        return cls(
            image_ids=[r[0] for r in body],
            true_labels=np.array([int(r[1]) for r in body], dtype=np.int64),
            scores=np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), len(names)),
            class_names=names,
        )


@dataclass
class Curve:
    kind: str
    x: np.ndarray
    y: np.ndarray
    auc: float
    trapezoid_auc: Optional[float] = None
    # step-function form, PR only: value on (x_{i-1}, x_i] is y_i
    steps: Optional[tuple] = None

    def samples(self, max_points: int = MAX_CURVE_SAMPLES) -> dict:
        n = len(self.x)
        idx = np.arange(n) if n <= max_points else np.unique(np.linspace(0, n - 1, max_points).round().astype(int))
        return {"x": [float(v) for v in self.x[idx]], "y": [float(v) for v in self.y[idx]]}


def argmax_labels(scores) -> np.ndarray:
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError(f"need a non-empty N x K score matrix, got shape {scores.shape}")
    if scores.shape[1] < 2:
        raise ValueError("need at least two classes")
    return np.argmax(scores, axis=1)  # first maximum wins


def confusion(true_labels, predicted, num_classes: int) -> np.ndarray:
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if true_labels.shape != predicted.shape:
        raise ValueError("true and predicted label arrays differ in length")
    for name, arr in (("true", true_labels), ("predicted", predicted)):
        bad = np.flatnonzero((arr < 0) | (arr >= num_classes))
        if bad.size:
            raise ValueError(f"{name} label {arr[bad[0]]} at position {bad[0]} outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true_labels, predicted), 1)
    return cm


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den != 0)
    return out


def aggregate_metrics(cm) -> dict:
    cm = np.asarray(cm, dtype=np.int64)
    n = cm.sum()
    if n < 1:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    fp = predicted - tp
    fn = support - tp
    tn = n - tp - fp - fn
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    ovr_accuracy = (tp + tn) / n
    weights = support / n

    per_class = [
        {
            "precision": float(precision[k]),
            "recall": float(recall[k]),
            "f1": float(f1[k]),
            "ovr_accuracy": float(ovr_accuracy[k]),
            "support": int(support[k]),
        }
        for k in range(cm.shape[0])
    ]
    return {
        "accuracy": float(tp.sum() / n),
        "macro_precision": float(precision.mean()),
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
        "weighted_precision": float(np.dot(weights, precision)),
        "weighted_recall": float(np.dot(weights, recall)),
        "weighted_f1": float(np.dot(weights, f1)),
        "per_class": per_class,
    }


def _threshold_counts(scores, is_positive):
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_positive).astype(bool)
    if scores.shape != pos.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    p = pos[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(p)[ends]
    fps = np.cumsum(~p)[ends]
    return tps.astype(np.float64), fps.astype(np.float64), s[ends]


def roc_curve(scores, is_positive) -> Curve:
    pos = np.asarray(is_positive).astype(bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedCurveError(f"ROC undefined with {n_pos} positives and {n_neg} negatives")
    tps, fps, _ = _threshold_counts(scores, pos)
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return Curve("roc", fpr, tpr, auc, trapezoid_auc=auc)


def pr_curve(scores, is_positive) -> Curve:
    pos = np.asarray(is_positive).astype(bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UndefinedCurveError("PR curve undefined without positives")
    tps, fps, _ = _threshold_counts(scores, pos)
    precision = tps / (tps + fps)
    recall = tps / n_pos
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    # plotted curve starts at (recall 0, precision 1)
    x = np.r_[0.0, recall]
    y = np.r_[1.0, precision]
    trap = float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))
    return Curve("pr", x, y, ap, trapezoid_auc=trap, steps=(recall, precision))


def _dedupe(x, y, keep: str):
    """Collapse repeated x values, keeping the first or last y of each run."""
    if keep == "first":
        idx = np.r_[0, np.flatnonzero(np.diff(x) != 0) + 1]
    else:
        idx = np.r_[np.flatnonzero(np.diff(x) != 0), x.size - 1]
    return x[idx], y[idx]


def _roc_limits(curve: Curve, at: np.ndarray):
    """Left and right limits of the ROC polyline at each query FPR.

    Between distinct FPR values the curve runs from the top of one vertical
    run to the bottom of the next.
    """
    ux, lo = _dedupe(curve.x, curve.y, "first")
    _, hi = _dedupe(curve.x, curve.y, "last")
    at = np.asarray(at, dtype=np.float64)
    j = np.clip(np.searchsorted(ux, at, side="left"), 0, ux.size - 1)
    exact = ux[j] == at
    i = np.maximum(j - 1, 0)
    span = np.where(exact, 1.0, ux[j] - ux[i])
    t = np.where(exact, 0.0, (at - ux[i]) / span)
    between = hi[i] + t * (lo[j] - hi[i])
    return np.where(exact, lo[j], between), np.where(exact, hi[j], between)


def _pr_step_value(curve: Curve, at: np.ndarray) -> np.ndarray:
    recall, precision = curve.steps
    i = np.searchsorted(recall, at, side="left")
    return precision[np.minimum(i, recall.size - 1)]


def mean_curve(curves: Sequence[Curve], kind: Optional[str] = None, grid_size: int = GRID_SIZE) -> Curve:
    """Macro-average curves over a uniform grid on [0, 1].

    ROC curves are averaged as piecewise-linear functions of FPR (vertical
    segments keep both end values); PR curves as right-closed step functions
    of recall, matching average precision. The area is integrated exactly
    over the union of the grid and every curve's breakpoints, so averaging
    identical curves reproduces their own AUC.
    """
    curves = list(curves)
    if not curves:
        raise ValueError("mean_curve needs at least one curve")
    kind = kind or curves[0].kind
    if any(c.kind != kind for c in curves):
        raise ValueError("cannot average curves of different kinds")
    grid = np.linspace(0.0, 1.0, grid_size)

    if kind == "roc":
        breaks = np.unique(np.concatenate([grid] + [c.x for c in curves]))
        left = np.zeros_like(breaks)
        right = np.zeros_like(breaks)
        for c in curves:
            lo, hi = _roc_limits(c, breaks)
            left += lo
            right += hi
        left /= len(curves)
        right /= len(curves)
        auc = float(np.sum(np.diff(breaks) * (right[:-1] + left[1:]) / 2.0))
        y = np.mean([_roc_limits(c, grid)[1] for c in curves], axis=0)
        # a jump at FPR 0 is drawn from its lower end
        return Curve("roc", np.r_[0.0, grid], np.r_[left[0], y], auc, trapezoid_auc=auc)

    if kind == "pr":
        breaks = np.unique(np.concatenate([grid] + [c.steps[0] for c in curves]))
        mids = (breaks[:-1] + breaks[1:]) / 2.0
        vals = np.mean([_pr_step_value(c, mids) for c in curves], axis=0)
        auc = float(np.sum(np.diff(breaks) * vals))
        y = np.mean([_pr_step_value(c, grid) for c in curves], axis=0)
        trap = float(np.sum(np.diff(grid) * (y[1:] + y[:-1]) / 2.0))
        return Curve("pr", grid, y, auc, trapezoid_auc=trap)

    raise ValueError(f"unknown curve kind {kind!r}")


@dataclass
class EvaluationReport:
    class_names: list
    confusion: np.ndarray
    aggregates: dict
    roc: list  # Curve or error string per class
    pr: list
    mean_roc: Optional[Curve]
    mean_pr: Optional[Curve]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        per_class = []
        for k, name in enumerate(self.class_names):
            entry = {"name": name, **self.aggregates["per_class"][k]}
            for key, c in (("roc", self.roc[k]), ("pr", self.pr[k])):
                if isinstance(c, Curve):
                    entry[f"{key}_auc"] = c.auc
                else:
                    entry[f"{key}_auc"] = None
                    entry[f"{key}_error"] = c
            entry["pr_trapezoid_auc"] = self.pr[k].trapezoid_auc if isinstance(self.pr[k], Curve) else None
            per_class.append(entry)
        aggregates = {k: v for k, v in self.aggregates.items() if k != "per_class"}
        curves = {
            "roc": [c.samples() if isinstance(c, Curve) else None for c in self.roc],
            "pr": [c.samples() if isinstance(c, Curve) else None for c in self.pr],
            "mean_roc": self.mean_roc.samples() if self.mean_roc else None,
            "mean_pr": self.mean_pr.samples() if self.mean_pr else None,
        }
        return {
            **self.meta,
            "class_names": list(self.class_names),
            "confusion": self.confusion.tolist(),
            "per_class": per_class,
            "aggregates": aggregates,
            "mean_roc_auc": self.mean_roc.auc if self.mean_roc else None,
            "mean_pr_auc": self.mean_pr.auc if self.mean_pr else None,
            "mean_pr_trapezoid_auc": self.mean_pr.trapezoid_auc if self.mean_pr else None,
            "curves": curves,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def evaluate(pm: PredictionMatrix, meta: Optional[dict] = None) -> EvaluationReport:
    k = pm.num_classes
    cm = confusion(pm.true_labels, argmax_labels(pm.scores), k)
    agg = aggregate_metrics(cm)
    rocs, prs = [], []
    for c in range(k):
        is_c = pm.true_labels == c
        for fn, out in ((roc_curve, rocs), (pr_curve, prs)):
            try:
                out.append(fn(pm.scores[:, c], is_c))
            except UndefinedCurveError as exc:
                out.append(f"class {pm.class_names[c]!r}: {exc}")
    valid_roc = [c for c in rocs if isinstance(c, Curve)]
    valid_pr = [c for c in prs if isinstance(c, Curve)]
    return EvaluationReport(
        class_names=list(pm.class_names),
        confusion=cm,
        aggregates=agg,
        roc=rocs,
        pr=prs,
        mean_roc=mean_curve(valid_roc, "roc") if valid_roc else None,
        mean_pr=mean_curve(valid_pr, "pr") if valid_pr else None,
        meta=dict(meta or {}),
    )
