"""Post-hoc calibrators for binary safety scores, ECE/Brier, and min-ECE selection."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn

KINDS = ("temperature", "platt", "beta", "histogram", "isotonic")
CLIP = nn.PROB_EPS


def _clip(scores) -> np.ndarray:
    return np.clip(np.asarray(scores, dtype=float), CLIP, 1.0 - CLIP)


def logit(scores) -> np.ndarray:
    s = _clip(scores)
    return np.log(s) - np.log1p(-s)


def sigmoid(z) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def _check_labels(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("calibration labels contain a single class")
    return labels


@dataclass
class FittedCalibrator:
    kind: str
    params: dict = field(default_factory=dict)

    def __call__(self, scores) -> np.ndarray:
        return apply(self, scores)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "params": self.params}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> FittedCalibrator:
        d = json.loads(text)
        return cls(d["kind"], d["params"])


def identity(kind: str) -> FittedCalibrator:
    """A calibrator of the given kind at its identity parameters (not meaningful for histogram)."""
    if kind == "temperature":
        return FittedCalibrator(kind, {"T": 1.0})
    if kind == "platt":
        return FittedCalibrator(kind, {"a": 1.0, "b": 0.0})
    if kind == "beta":
        return FittedCalibrator(kind, {"a": 1.0, "b": 1.0, "c": 0.0})
    if kind == "isotonic":
        return FittedCalibrator(kind, {"breakpoints": [0.0], "values": [0.0], "identity": True})
    raise ValueError(f"no identity parameters for {kind!r}")


def apply(c: FittedCalibrator, scores) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    p = c.params
    if c.kind == "temperature":
        if p["T"] == 1.0:
            return s.copy()
        return sigmoid(logit(s) / p["T"])
    if c.kind == "platt":
        if p["a"] == 1.0 and p["b"] == 0.0:
            return s.copy()
        return sigmoid(p["a"] * logit(s) + p["b"])
    if c.kind == "beta":
        if p["a"] == 1.0 and p["b"] == 1.0 and p["c"] == 0.0:
            return s.copy()
        cs = _clip(s)
        return sigmoid(p["a"] * np.log(cs) - p["b"] * np.log1p(-cs) + p["c"])
    if c.kind == "histogram":
        q = len(p["values"])
        idx = np.minimum((s * q).astype(np.int64), q - 1)
        return np.asarray(p["values"])[np.clip(idx, 0, q - 1)]
    if c.kind == "isotonic":
        if p.get("identity"):
            return s.copy()
        bp = np.asarray(p["breakpoints"])
        idx = np.clip(np.searchsorted(bp, s, side="right") - 1, 0, len(bp) - 1)
        return np.asarray(p["values"])[idx]
    raise ValueError(f"unknown calibrator kind {c.kind!r}")


# ---------------------------------------------------------------- temperature

def scores_to_logit_pairs(scores) -> np.ndarray:
    """Logit pairs reproducing ``scores`` as the class-1 softmax output."""
    z = logit(scores)
    return np.stack([np.zeros_like(z), z], axis=1)


def golden_section(f, lo: float, hi: float, tol: float = 1e-6) -> float:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def binary_nll(z: np.ndarray, labels: np.ndarray) -> float:
    """Mean -log sigmoid(+-z) with labels in {0,1}."""
    signed = np.where(labels == 1, z, -z)
    return float(np.mean(np.logaddexp(0.0, -signed)))


def fit_temperature(logit_pairs, labels) -> FittedCalibrator:
    labels = _check_labels(labels)
    pairs = np.asarray(logit_pairs, dtype=float)
    z = pairs[:, 1] - pairs[:, 0]
    log_t = golden_section(lambda lt: binary_nll(z / math.exp(lt), labels), -4.0, 4.0, 1e-6)
    return FittedCalibrator("temperature", {"T": math.exp(log_t)})


# ---------------------------------------------------------------- platt

def fit_platt(scores, labels, cfg: nn.TrainConfig | None = None) -> FittedCalibrator:
    """Logistic unit on logit(score), trained with the shared Adam loop."""
    labels = _check_labels(labels)
    cfg = cfg or nn.TrainConfig(learning_rate=0.05, batch_size=512, max_epochs=200, plateau_eps=1e-5)
    x = logit(scores)[:, None]
    net = nn.DenseNet([np.array([[0.0, 1.0]])], [np.zeros(2)], ["softmax"])
    nn.train(net, len(x), nn.supervised(x, labels, "cross_entropy"), cfg)
    w, b = net.weights[0][0], net.biases[0]
    return FittedCalibrator("platt", {"a": float(w[1] - w[0]), "b": float(b[1] - b[0])})


# ---------------------------------------------------------------- beta

def _logistic_newton(x: np.ndarray, y: np.ndarray, iters: int = 100, ridge: float = 1e-9) -> np.ndarray:
    w = np.zeros(x.shape[1])
    for _ in range(iters):
        p = sigmoid(x @ w)
        grad = x.T @ (p - y)
        hess = (x * (p * (1 - p))[:, None]).T @ x + ridge * np.eye(x.shape[1])
        delta = np.linalg.solve(hess, grad)
        # damped step keeps separable data from diverging in one jump
        scale = min(1.0, 10.0 / max(1e-12, float(np.abs(delta).max())))
        w -= scale * delta
        if np.abs(delta).max() < 1e-10:
            break
    return w


def fit_beta(scores, labels) -> FittedCalibrator:
    """sigmoid(a*ln s - b*ln(1-s) + c) by logistic regression, projecting a, b onto >= 0.

    A negative coefficient is pinned to zero and the remaining ones refit.
    """
    labels = _check_labels(labels)
    s = _clip(scores)
    feats = np.stack([np.log(s), -np.log1p(-s), np.ones_like(s)], axis=1)
    y = labels.astype(float)
    active = [0, 1]
    while True:
        cols = active + [2]
        w = _logistic_newton(feats[:, cols], y)
        coef = dict(zip(cols, w))
        neg = [j for j in active if coef[j] < 0]
        if not neg:
            break
        active.remove(min(neg, key=lambda j: coef[j]))
    return FittedCalibrator("beta", {"a": float(coef.get(0, 0.0)), "b": float(coef.get(1, 0.0)),
                                     "c": float(coef[2])})


# ---------------------------------------------------------------- histogram

def fit_histogram(scores, labels, Q: int = 10) -> FittedCalibrator:
    if Q < 1:
        raise ValueError("Q must be >= 1")
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    idx = np.minimum((s * Q).astype(np.int64), Q - 1)
    counts = np.bincount(idx, minlength=Q)
    sums = np.bincount(idx, weights=y, minlength=Q)
    mids = (np.arange(Q) + 0.5) / Q
    values = np.where(counts > 0, sums / np.maximum(counts, 1), mids)
    return FittedCalibrator("histogram", {"values": values.tolist()})


# ---------------------------------------------------------------- isotonic

def pav(values, weights=None) -> np.ndarray:
    """Weighted non-decreasing least-squares fit by pool-adjacent-violators."""
    y = np.asarray(values, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    means, wsum, sizes = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        wsum.append(wi)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, n2 = means.pop(), wsum.pop(), sizes.pop()
            total = wsum[-1] + w2
            means[-1] = (means[-1] * wsum[-1] + m2 * w2) / total
            wsum[-1] = total
            sizes[-1] += n2
    return np.repeat(means, sizes)


def fit_isotonic(scores, labels) -> FittedCalibrator:
    s = np.asarray(scores, dtype=float)
    if len(s) == 0:
        raise ValueError("isotonic fit needs at least one sample")
    y = np.asarray(labels, dtype=float)
    uniq, inv = np.unique(s, return_inverse=True)
    counts = np.bincount(inv)
    means = np.bincount(inv, weights=y) / counts
    fitted = pav(means, counts)
    return FittedCalibrator("isotonic", {"breakpoints": uniq.tolist(), "values": fitted.tolist()})


# ---------------------------------------------------------------- metrics

@dataclass
class ReliabilityBins:
    lo: np.ndarray
    hi: np.ndarray
    conf: np.ndarray
    acc: np.ndarray
    count: np.ndarray
    scheme: str

    @property
    def Q(self) -> int:
        return len(self.count)

    def ece(self) -> float:
        n = self.count.sum()
        return float(np.sum(self.count / n * np.abs(self.acc - self.conf)))

    def to_csv(self) -> str:
        rows = ["bin_lo,bin_hi,conf,acc,count"]
        for r in zip(self.lo, self.hi, self.conf, self.acc, self.count):
            rows.append(f"{r[0]!r},{r[1]!r},{r[2]!r},{r[3]!r},{int(r[4])}")
        return "\n".join(rows) + "\n"


def reliability_bins(scores, labels, Q: int = 10, scheme: str = "equal-width") -> ReliabilityBins:
    """Per-bin confidence/accuracy; empty bins report conf = acc = 0 and count 0."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(s) < 1:
        raise ValueError("need at least one sample")
    if scheme == "equal-width":
        idx = np.minimum((s * Q).astype(np.int64), Q - 1)
        lo, hi = np.arange(Q) / Q, np.arange(1, Q + 1) / Q
    elif scheme == "equal-count":
        order = np.argsort(s, kind="stable")
        idx = np.empty(len(s), np.int64)
        for j, chunk in enumerate(np.array_split(order, Q)):
            idx[chunk] = j
        lo = np.array([s[c].min() if len(c) else np.nan for c in np.array_split(order, Q)])
        hi = np.array([s[c].max() if len(c) else np.nan for c in np.array_split(order, Q)])
    else:
        raise ValueError(f"unknown binning scheme {scheme!r}")
    count = np.bincount(idx, minlength=Q)
    denom = np.maximum(count, 1)
    conf = np.bincount(idx, weights=s, minlength=Q) / denom
    acc = np.bincount(idx, weights=(y == 1).astype(float), minlength=Q) / denom
    return ReliabilityBins(lo, hi, conf, acc, count, scheme)


def ece(scores, labels, Q: int = 10, scheme: str = "equal-width") -> float:
    return reliability_bins(scores, labels, Q, scheme).ece()


def brier(scores, labels) -> float:
    s = np.asarray(scores, dtype=float)
    if len(s) < 1:
        raise ValueError("need at least one sample")
    return float(np.mean((s - np.asarray(labels, dtype=float)) ** 2))


# ---------------------------------------------------------------- selection

def fit(kind: str, scores, labels, Q: int = 10, logit_pairs=None) -> FittedCalibrator:
    if kind == "temperature":
        return fit_temperature(scores_to_logit_pairs(scores) if logit_pairs is None else logit_pairs, labels)
    if kind == "platt":
        return fit_platt(scores, labels)
    if kind == "beta":
        return fit_beta(scores, labels)
    if kind == "histogram":
        return fit_histogram(scores, labels, Q)
    if kind == "isotonic":
        return fit_isotonic(scores, labels)
    raise ValueError(f"unknown calibrator kind {kind!r}")


@dataclass
class Selection:
    best: FittedCalibrator
    fitted: dict[str, FittedCalibrator]
    ece: dict[str, float]
    errors: dict[str, str]


def select_best(candidates, scores, labels, Q: int = 10, logit_pairs=None, select_scores=None,
                select_labels=None, tie_tol: float = 1e-12) -> Selection:
    """Fit every candidate kind and keep the one with minimum ECE.

    Candidates are fitted on (scores, labels); ECE is measured on the same data unless a
    separate selection split is passed. Ties go to the earlier kind in ``KINDS`` order.
    """
    sel_s = scores if select_scores is None else select_scores
    sel_y = labels if select_labels is None else select_labels
    ordered = sorted(candidates, key=KINDS.index)
    fitted, eces, errors = {}, {}, {}
    for kind in ordered:
        try:
            c = fit(kind, scores, labels, Q, logit_pairs)
        except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
            errors[kind] = str(exc)
            continue
        fitted[kind] = c
        eces[kind] = ece(apply(c, sel_s), sel_y, Q)
    if not fitted:
        raise ValueError("no calibrator could be fitted: " + "; ".join(f"{k}: {v}" for k, v in errors.items()))
    best_kind = None
    for kind in fitted:
        if best_kind is None or eces[kind] < eces[best_kind] - tie_tol:
            best_kind = kind
    return Selection(fitted[best_kind], fitted, eces, errors)
