"""Classification metrics with "safe" (label 1) as the positive class."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    def as_dict(self) -> dict:
        return asdict(self)


def confusion(labels, predictions) -> Confusion:
    y = np.asarray(labels).astype(int)
    p = np.asarray(predictions).astype(int)
    if y.shape != p.shape:
        raise ValueError(f"labels and predictions differ in length: {y.shape} vs {p.shape}")
    return Confusion(int(np.sum((p == 1) & (y == 1))), int(np.sum((p == 1) & (y == 0))),
                     int(np.sum((p == 0) & (y == 1))), int(np.sum((p == 0) & (y == 0))))


def f1_from(c: Confusion) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        warnings.warn("F1 undefined (no positives in labels or predictions); reporting 1.0", RuntimeWarning,
                      stacklevel=3)
        return 1.0
    return 2 * c.tp / denom


def fpr_from(c: Confusion) -> float:
    if c.fp + c.tn == 0:
        raise ValueError("FPR needs at least one unsafe (label 0) sample")
    return c.fp / (c.fp + c.tn)


def f1(labels, predictions) -> float:
    return f1_from(confusion(labels, predictions))


def fpr(labels, predictions) -> float:
    """Fraction of actually unsafe samples predicted safe."""
    return fpr_from(confusion(labels, predictions))
