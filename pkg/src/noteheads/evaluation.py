"""Detection matching and precision/recall bookkeeping.

A prediction hits a true notehead when their IoU exceeds the threshold, or
when the prediction box fully contains the true box. Matching is one-to-one
and greedy in two phases: IoU hits first (highest IoU first), then
containment hits among the leftovers (smallest prediction first).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import iou_matrix


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, str]]  # (prediction, truth, "iou" | "containment")
    unmatched_predictions: list[int]
    unmatched_truths: list[int]


def _as_boxes(boxes) -> np.ndarray:
    return np.asarray([tuple(b) for b in boxes], dtype=np.int64).reshape(-1, 4)


def containment_matrix(outer, inner) -> np.ndarray:
    """``[i, j]`` is True when box ``outer[i]`` contains box ``inner[j]``."""
    a, b = _as_boxes(outer), _as_boxes(inner)
    return (
        (a[:, None, 0] <= b[None, :, 0])
        & (a[:, None, 1] <= b[None, :, 1])
        & (a[:, None, 2] >= b[None, :, 2])
        & (a[:, None, 3] >= b[None, :, 3])
    )


def match_detections(predictions, truths, iou_threshold: float = 0.5) -> MatchResult:
    pred, true = _as_boxes(predictions), _as_boxes(truths)
    n_pred, n_true = len(pred), len(true)
    used_p = np.zeros(n_pred, dtype=bool)
    used_t = np.zeros(n_true, dtype=bool)
    pairs = []
    if n_pred and n_true:
        iou = iou_matrix(pred, true)
        ii, jj = np.nonzero(iou > iou_threshold)
        for k in np.lexsort((jj, ii, -iou[ii, jj])):
            i, j = ii[k], jj[k]
            if not used_p[i] and not used_t[j]:
                used_p[i] = used_t[j] = True
                pairs.append((int(i), int(j), "iou"))
        contains = containment_matrix(pred, true) & ~used_p[:, None] & ~used_t[None, :]
        ii, jj = np.nonzero(contains)
        area = (pred[:, 2] - pred[:, 0]) * (pred[:, 3] - pred[:, 1])
        for k in np.lexsort((jj, ii, -iou[ii, jj], area[ii])):
            i, j = ii[k], jj[k]
            if not used_p[i] and not used_t[j]:
                used_p[i] = used_t[j] = True
                pairs.append((int(i), int(j), "containment"))
    return MatchResult(
        pairs,
        np.flatnonzero(~used_p).tolist(),
        np.flatnonzero(~used_t).tolist(),
    )


def _ratio(num, den) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class PageMetrics:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return _ratio(2 * p * r, p + r)

    @classmethod
    def from_match(cls, match: MatchResult) -> "PageMetrics":
        return cls(len(match.pairs), len(match.unmatched_predictions), len(match.unmatched_truths))

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def evaluate_page(predictions, truths, iou_threshold: float = 0.5) -> PageMetrics:
    return PageMetrics.from_match(match_detections(predictions, truths, iou_threshold))


def pixelwise_metrics(p, truth_labels, threshold: float = 0.5) -> dict:
    """Precision and recall of the positive class over target pixels."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth_labels).reshape(-1).astype(bool)
    if len(p) != len(truth):
        raise ValueError(f"{len(p)} predictions but {len(truth)} labels")
    pred = p >= threshold
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    return {"tp": tp, "fp": fp, "fn": fn, "precision": _ratio(tp, tp + fp), "recall": _ratio(tp, tp + fn)}


def aggregate(pages) -> dict:
    """Macro (mean of per-page ratios) and micro (pooled counts) averages."""
    pages = list(pages)
    if not pages:
        raise ValueError("no pages to aggregate")
    macro = {k: float(np.mean([getattr(m, k) for m in pages])) for k in ("precision", "recall", "f1")}
    pooled = PageMetrics(sum(m.tp for m in pages), sum(m.fp for m in pages), sum(m.fn for m in pages))
    return {"pages": len(pages), "macro": macro, "micro": pooled.to_dict()}


def format_table(named_pages, summary: dict | None = None) -> str:
    """Aligned plain-text table of per-page metrics."""
    rows = [("page", "tp", "fp", "fn", "precision", "recall", "f1")]
    for name, m in named_pages:
        rows.append((name, str(m.tp), str(m.fp), str(m.fn), f"{m.precision:.4f}", f"{m.recall:.4f}", f"{m.f1:.4f}"))
    if summary is not None:
        mi, ma = summary["micro"], summary["macro"]
        rows.append(("micro", str(mi["tp"]), str(mi["fp"]), str(mi["fn"]),
                     f"{mi['precision']:.4f}", f"{mi['recall']:.4f}", f"{mi['f1']:.4f}"))
        rows.append(("macro", "", "", "", f"{ma['precision']:.4f}", f"{ma['recall']:.4f}", f"{ma['f1']:.4f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
    return "\n".join(lines) + "\n"
