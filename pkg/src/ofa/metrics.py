"""Scoring generated outputs against references."""
from __future__ import annotations

from collections import Counter
from typing import Sequence

from .coords import BBox
from .vocab import normalize


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def acc_at_05(preds: Sequence[BBox], golds: Sequence[BBox], threshold: float = 0.5) -> float:
    """Fraction of predicted boxes whose IoU with the gold box is at least ``threshold``."""
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} references")
    if not preds:
        raise ValueError("accuracy of an empty prediction list is undefined")
    return sum(iou(p, g) >= threshold for p, g in zip(preds, golds)) / len(preds)


def _norm(s: str) -> str:
    return normalize(s).lower()


def exact_match(pred: str, gold: str) -> bool:
    return _norm(pred) == _norm(gold)


def closed_set_accuracy(preds: Sequence[str], golds: Sequence[str]) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} references")
    if not preds:
        raise ValueError("accuracy of an empty prediction list is undefined")
    return sum(exact_match(p, g) for p, g in zip(preds, golds)) / len(preds)


def token_f1(pred: str, gold: str) -> float:
    """Bag-of-tokens F1 after lowercasing and whitespace normalisation."""
    p, g = _norm(pred).split(), _norm(gold).split()
    if not p and not g:
        return 1.0
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)
