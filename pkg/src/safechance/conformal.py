"""Equal-count binning and resampling conformal bounds on per-bin calibration error."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class ResampleConfig:
    M: int = 200
    N: int = 100
    alpha: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must be in (0, 0.5)")
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be >= 1")

    @property
    def rank(self) -> int:
        return quantile_rank(self.M, self.alpha)

    @property
    def vacuous(self) -> bool:
        return self.rank > self.M


def quantile_rank(M: int, alpha: float) -> int:
    """1-based order statistic used as the conformal quantile: ceil((M+1)(1-alpha))."""
    # round before ceil so 100 * 0.95 = 94.99999... lands on 95
    return int(math.ceil(round((M + 1) * (1.0 - alpha), 9)))


@dataclass
class BinnedValidationSet:
    scores: list[np.ndarray]
    labels: list[np.ndarray]
    discarded: int

    @property
    def Q(self) -> int:
        return len(self.scores)

    def ranges(self) -> list[tuple[float, float]]:
        return [(float(s.min()), float(s.max())) for s in self.scores]


def adaptive_bin(scores, labels, Q: int) -> BinnedValidationSet:
    """Sort by score and cut the first Q*floor(n/Q) samples into Q equal-count bins."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(s) < Q:
        raise ValueError(f"need at least Q={Q} samples, got {len(s)}")
    order = np.argsort(s, kind="stable")
    size = len(s) // Q
    keep = order[:Q * size]
    return BinnedValidationSet(
        [s[keep[j * size:(j + 1) * size]] for j in range(Q)],
        [y[keep[j * size:(j + 1) * size]] for j in range(Q)],
        len(s) - Q * size,
    )


def resample_errors(scores, labels, N: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """|mean score - mean label| over ``count`` size-N resamples with replacement."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(s) == 0:
        raise ValueError("cannot resample an empty bin")
    idx = rng.integers(0, len(s), size=(count, N))
    return np.abs(s[idx].mean(axis=1) - y[idx].mean(axis=1))


def concali(scores, labels, cfg: ResampleConfig, rng: np.random.Generator | None = None) -> tuple[float, bool]:
    """Bound c on a bin's calibration error; returns (c, vacuous).

    c is the ceil((M+1)(1-alpha))-th smallest resampled error; when that rank exceeds M
    the bound is the trivial 1.0 and the vacuity flag is set.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    deltas = resample_errors(scores, labels, cfg.N, cfg.M, rng)
    n = cfg.rank
    if n > cfg.M:
        return 1.0, True
    return float(np.sort(deltas)[n - 1]), False


def _substream(cfg: ResampleConfig, j: int, purpose: int = 0) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, purpose, j])


@dataclass
class ConformalBoundSet:
    bounds: list[float]
    ranges: list[tuple[float, float]]
    vacuous: list[bool]
    config: ResampleConfig
    data_hash: str = ""
    discarded: int = 0

    @property
    def Q(self) -> int:
        return len(self.bounds)

    def to_json(self) -> str:
        d = {
            "Q": self.Q,
            "bins": [{"lo": lo, "hi": hi, "c": c, "vacuous": v}
                     for (lo, hi), c, v in zip(self.ranges, self.bounds, self.vacuous)],
            "config": asdict(self.config),
            "data_hash": self.data_hash,
            "discarded": self.discarded,
        }
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> ConformalBoundSet:
        d = json.loads(text)
        bins = d["bins"]
        return cls([b["c"] for b in bins], [(b["lo"], b["hi"]) for b in bins], [b["vacuous"] for b in bins],
                   ResampleConfig(**d["config"]), d["data_hash"], d["discarded"])


def data_hash(scores, labels) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(scores, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(labels, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def bounds_for_all_bins(bv: BinnedValidationSet, cfg: ResampleConfig, data_hash: str = "") -> ConformalBoundSet:
    bounds, flags = [], []
    for j, (s, y) in enumerate(zip(bv.scores, bv.labels)):
        try:
            c, vac = concali(s, y, cfg, _substream(cfg, j))
        except ValueError as exc:
            raise ValueError(f"bin {j}: {exc}") from exc
        bounds.append(c)
        flags.append(vac)
    return ConformalBoundSet(bounds, bv.ranges(), flags, cfg, data_hash, bv.discarded)


@dataclass
class IntervalPrediction:
    center: float
    lo: float
    hi: float
    bin_index: int


def route(score: float, ranges: list[tuple[float, float]]) -> int:
    """Bin whose range holds the score (lower bin on shared boundaries), else the nearest one."""
    best, best_dist = 0, math.inf
    for j, (lo, hi) in enumerate(ranges):
        dist = max(lo - score, score - hi, 0.0)
        if dist < best_dist:
            best, best_dist = j, dist
    return best


def interval_predict(score: float, bset: ConformalBoundSet) -> IntervalPrediction:
    if bset.Q == 0:
        raise ValueError("empty bound set")
    j = route(score, bset.ranges)
    c = bset.bounds[j]
    return IntervalPrediction(score, max(0.0, score - c), min(1.0, score + c), j)


@dataclass
class CoverageReport:
    per_bin: list[float]
    bounds: list[float]
    error_quantiles: list[dict]
    flagged: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_bin))

    @property
    def std(self) -> float:
        return float(np.std(self.per_bin))

    def to_csv(self) -> str:
        qs = sorted(self.error_quantiles[0]) if self.error_quantiles else []
        rows = ["bin,bound,coverage," + ",".join(f"err_q{q}" for q in qs)]
        for j, (c, cov, eq) in enumerate(zip(self.bounds, self.per_bin, self.error_quantiles)):
            rows.append(f"{j},{c!r},{cov!r}," + ",".join(repr(eq[q]) for q in qs))
        return "\n".join(rows) + "\n"


ERROR_QUANTILES = (50, 90, 95, 99)


def coverage_eval(bset: ConformalBoundSet, scores, labels, trials: int | None = None) -> CoverageReport:
    """Empirical containment of fresh size-N resamples of each test bin within [0, c_j].

    Test samples are binned with the same Q and score ordering as the bound set.
    """
    cfg = bset.config
    trials = cfg.M if trials is None else trials
    bv = adaptive_bin(scores, labels, bset.Q)
    per_bin, quants, flagged = [], [], []
    for j, (s, y) in enumerate(zip(bv.scores, bv.labels)):
        if len(np.unique(s)) < cfg.N:
            flagged.append(j)
        errs = resample_errors(s, y, cfg.N, trials, _substream(cfg, j, purpose=1))
        per_bin.append(float(np.mean(errs <= bset.bounds[j])))
        quants.append({q: float(np.percentile(errs, q)) for q in ERROR_QUANTILES})
    return CoverageReport(per_bin, list(bset.bounds), quants, flagged)
