"""Pixel-level F1, image-level F1 and ROC-AUC at a 0.5 threshold."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

THRESHOLD = 0.5


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if 2 * tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def pixel_f1(prob_mask, gt, threshold: float = THRESHOLD) -> float | None:
    """F1 of the binarized mask (prob >= threshold) for one image; None when gt has no positives."""
    p = np.asarray(prob_mask)
    g = np.asarray(gt) != 0
    if p.shape != g.shape:
        raise ValueError(f"pixel_f1: prediction {p.shape} vs ground truth {g.shape}")
    if not g.any():
        return None
    pred = p >= threshold
    tp = int(np.count_nonzero(pred & g))
    fp = int(np.count_nonzero(pred & ~g))
    fn = int(np.count_nonzero(~pred & g))
    return _f1_from_counts(tp, fp, fn)


def mean_pixel_f1(prob_masks: Sequence, gts: Sequence, threshold: float = THRESHOLD) -> float | None:
    vals = [v for v in (pixel_f1(p, g, threshold) for p, g in zip(prob_masks, gts)) if v is not None]
    return float(np.mean(vals)) if vals else None


def image_f1(scores, labels, threshold: float = THRESHOLD) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"image_f1: {s.shape[0] if s.ndim else 1} scores vs {y.shape[0] if y.ndim else 1} labels")
    if s.size == 0:
        raise ValueError("image_f1 needs at least one sample")
    pred = s >= threshold
    tp = int(np.count_nonzero(pred & y))
    fp = int(np.count_nonzero(pred & ~y))
    fn = int(np.count_nonzero(~pred & y))
    return _f1_from_counts(tp, fp, fn)


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney form: P(score_pos > score_neg) with ties counted half.  None for one class."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("roc_auc: scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalRow:
    id: str
    pixel_f1: float | None
    predicted_label: int
    score: float
    label: int


@dataclass
class EvalReport:
    pixel_f1: float | None
    image_f1: float
    image_auc: float | None
    rows: list[EvalRow] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows: Sequence[EvalRow]) -> "EvalReport":
        px = [r.pixel_f1 for r in rows if r.pixel_f1 is not None]
        scores = [r.score for r in rows]
        labels = [r.label for r in rows]
        return cls(float(np.mean(px)) if px else None, image_f1(scores, labels), roc_auc(scores, labels), list(rows))

    def to_dict(self) -> dict:
        return {
            "pixel_f1": self.pixel_f1,
            "image_f1": self.image_f1,
            "image_auc": self.image_auc,
            "rows": [
                {"id": r.id, "pixel_f1": r.pixel_f1, "predicted_label": r.predicted_label,
                 "score": r.score, "label": r.label}
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        rows = [EvalRow(r["id"], r["pixel_f1"], r["predicted_label"], r["score"], r["label"]) for r in d["rows"]]
        return cls(d["pixel_f1"], d["image_f1"], d["image_auc"], rows)


def evaluate(prob_masks, gts, scores, labels, ids=None, threshold: float = THRESHOLD) -> EvalReport:
    ids = ids or [str(i) for i in range(len(scores))]
    rows = [
        EvalRow(str(i), pixel_f1(p, g, threshold), int(s >= threshold), float(s), int(y))
        for i, p, g, s, y in zip(ids, prob_masks, gts, scores, labels)
    ]
    return EvalReport.from_rows(rows)
