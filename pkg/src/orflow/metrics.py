"""Clip-level precision/recall/F1 and per-clip average precision / mAP."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

REPORT_FORMATS = ("json", "csv", "markdown_table")


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return self.tp + self.fn

    def accuracy(self) -> float:
        n = int(self.support.sum())
        return float(self.tp.sum()) / n if n else 0.0


def confusion_counts(pred_labels, true_labels, K: int) -> ConfusionCounts:
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {true.shape} labels")
    keep = true >= 0
    pred, true = pred[keep], true[keep]
    if np.any(true >= K) or np.any(pred >= K) or np.any(pred < 0):
        raise ValueError(f"labels must lie in [0, {K})")
    hit = pred == true
    tp = np.bincount(true[hit], minlength=K)
    fp = np.bincount(pred[~hit], minlength=K)
    fn = np.bincount(true[~hit], minlength=K)
    return ConfusionCounts(tp, fp, fn)


def _safe_div(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def precision_recall_f1(pred_labels, true_labels, K: int):
    """Per-class ``(precision, recall, f1, counts)``; 0/0 is reported as 0.

    Positions whose true label is -1 are ignored.
    """
    counts = confusion_counts(pred_labels, true_labels, K)
    p = _safe_div(counts.tp, counts.tp + counts.fp)
    r = _safe_div(counts.tp, counts.tp + counts.fn)
    f1 = _safe_div(2 * p * r, p + r)
    return p, r, f1, counts


def average_precision(scores, positives) -> float:
    """Non-interpolated AP: mean precision at the rank of every positive.

    Ranking is by descending score; equal scores keep their original order.
    The sum is accumulated as an exact rational and rounded once.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    total = sum((Fraction(k, int(r)) for k, r in enumerate(ranks, start=1)), Fraction(0))
    return float(total / n_pos)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def mean_ap(class_scores, true_labels, logits: bool = True):
    """Per-class AP over clips and their mean over classes with a positive.

    ``class_scores`` is T x K; with ``logits=True`` each row is softmaxed
    first. Background clips (-1) count only as negatives. Classes without
    positives get ``nan`` and are left out of the mean.
    """
    scores = np.asarray(class_scores, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores {scores.shape} do not match {labels.shape[0]} labels")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    probs = softmax(scores, axis=1) if logits else scores
    K = scores.shape[1]
    aps = np.full(K, np.nan)
    for c in range(K):
        pos = labels == c
        if pos.any():
            aps[c] = average_precision(probs[:, c], pos)
    present = ~np.isnan(aps)
    if not present.any():
        raise ValueError("no class has a positive clip")
    if not present.all():
        logger.info("classes without positives excluded from mAP: %s", np.flatnonzero(~present).tolist())
    return aps, float(aps[present].mean())


# --------------------------------------------------------------------------
# reports


def display_name(class_name: str) -> str:
    return class_name.replace("_", " ").capitalize()


@dataclass
class EvalReport:
    class_names: list[str]
    split: dict = field(default_factory=dict)
    precision: list[float] | None = None
    recall: list[float] | None = None
    f1: list[float] | None = None
    ap: list[float | None] | None = None
    mAP: float | None = None
    support: list[int] | None = None
    counts: dict | None = None
    model: str = ""

    def __post_init__(self):
        if not self.class_names:
            raise ValueError("report needs at least one class")
        K = len(self.class_names)
        for name in ("precision", "recall", "f1", "ap", "support"):
            values = getattr(self, name)
            if values is not None and len(values) != K:
                raise ValueError(f"{name} has {len(values)} entries for {K} classes")
        for name in ("precision", "recall", "f1", "ap"):
            for v in getattr(self, name) or []:
                if v is not None and not 0.0 <= v <= 1.0:
                    raise ValueError(f"{name} value {v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(**d)


def build_report(class_names, pred_labels, true_labels, class_scores=None, split=None,
                 model: str = "", logits: bool = True) -> EvalReport:
    """Assemble clip P/R/F1 and, when scores are given, per-class AP and mAP."""
    K = len(class_names)
    p, r, f1, counts = precision_recall_f1(pred_labels, true_labels, K)
    ap, m = None, None
    if class_scores is not None:
        aps, m = mean_ap(class_scores, true_labels, logits=logits)
        ap = [None if np.isnan(a) else float(a) for a in aps]
    return EvalReport(
        class_names=list(class_names),
        split=dict(split or {}),
        precision=[float(x) for x in p],
        recall=[float(x) for x in r],
        f1=[float(x) for x in f1],
        ap=ap,
        mAP=m,
        support=[int(x) for x in counts.support],
        counts={"tp": counts.tp.tolist(), "fp": counts.fp.tolist(), "fn": counts.fn.tolist(),
                "accuracy": counts.accuracy()},
        model=model,
    )


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def report_from_json(text: str) -> EvalReport:
    return EvalReport.from_dict(json.loads(text))


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "precision", "recall", "f1", "ap", "support"])
    for i, name in enumerate(report.class_names):
        w.writerow([
            name,
            _cell(report.precision, i),
            _cell(report.recall, i),
            _cell(report.f1, i),
            _cell(report.ap, i),
            "" if report.support is None else report.support[i],
        ])
    return buf.getvalue()


def _cell(values, i):
    if values is None or values[i] is None:
        return ""
    return repr(float(values[i]))


def _pct(v, decimals):
    return "-" if v is None else f"{100.0 * v:.{decimals}f}"


def report_to_markdown(report: EvalReport, decimals: int = 2) -> str:
    """One row per class plus a mean row; P/R/F1 columns and/or an AP column, in percent."""
    has_prf = report.precision is not None
    has_ap = report.ap is not None
    cols = ["Activity"] + (["Prec.", "Rec.", "F1"] if has_prf else []) + (["AP"] if has_ap else [])
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join(["---"] + [":-:"] * (len(cols) - 1)) + "|"]
    supported = [i for i in range(len(report.class_names))
                 if report.support is None or report.support[i] > 0]
    for i, name in enumerate(report.class_names):
        row = [display_name(name)]
        if has_prf:
            row += [_pct(report.precision[i], decimals), _pct(report.recall[i], decimals),
                    _pct(report.f1[i], decimals)]
        if has_ap:
            row.append(_pct(report.ap[i], decimals))
        lines.append("| " + " | ".join(row) + " |")
    summary = ["**Mean**"]
    if has_prf:
        for vals in (report.precision, report.recall, report.f1):
            summary.append(_pct(float(np.mean([vals[i] for i in supported])) if supported else None, decimals))
    if has_ap:
        summary.append(_pct(report.mAP, decimals))
    lines.append("| " + " | ".join(summary) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, path, format: str = "json", decimals: int = 2) -> Path:
    if format not in REPORT_FORMATS:
        raise ValueError(f"unknown report format {format!r}; expected one of {REPORT_FORMATS}")
    if format == "json":
        text = report_to_json(report)
    elif format == "csv":
        text = report_to_csv(report)
    else:
        text = report_to_markdown(report, decimals)
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path
