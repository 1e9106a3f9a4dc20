"""Label-free test-time adaptation of an image evaluator by marginal entropy minimization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .predictors import Evaluator, VaeEncoder, LatentForecaster, decode, forecast, window_features
from .sim import FRAME_H, FRAME_W, WindowDataset

AUG_KINDS = ("autocontrast", "equalize", "rotation", "solarize", "shear", "translate", "posterize")
DEFAULT_MAGNITUDE = {
    # kept small: a pole frame is a thin line, larger warps change its label
    "rotation": 3.0,  # degrees, max
    "shear": 0.05,
    "translate": 1.0,  # pixels, max
    "solarize": 0.95,  # threshold
    "posterize": 2.0,  # bits -> 4 levels
    "autocontrast": 0.0,
    "equalize": 0.0,
    "identity": 0.0,
}


@dataclass(frozen=True)
class Augmentation:
    kind: str
    magnitude: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in AUG_KINDS + ("identity",):
            raise ValueError(f"unknown augmentation {self.kind!r}")

    @property
    def strength(self) -> float:
        return DEFAULT_MAGNITUDE[self.kind] if self.magnitude is None else self.magnitude


def _image(y) -> np.ndarray:
    return np.asarray(y, dtype=float).reshape(FRAME_H, FRAME_W)


def _resample(img: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Nearest-neighbour inverse mapping about the image center; outside pixels become 0."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.mgrid[0:h, 0:w]
    src = inv @ np.stack([(cc - cx).ravel(), (rr - cy).ravel()])
    sc = np.rint(src[0] + cx).astype(int)
    sr = np.rint(src[1] + cy).astype(int)
    ok = (sr >= 0) & (sr < h) & (sc >= 0) & (sc < w)
    out = np.zeros(h * w)
    out[ok] = img[sr[ok], sc[ok]]
    return out.reshape(h, w)


def augment(y, a: Augmentation) -> np.ndarray:
    """Apply one augmentation to a frame; returns float pixels of the same shape as ``y``."""
    shape = np.shape(y)
    img = _image(y)
    rng = np.random.default_rng(a.seed)
    s = a.strength
    if a.kind == "identity":
        out = img.copy()
    elif a.kind == "autocontrast":
        lo, hi = img.min(), img.max()
        out = img.copy() if hi <= lo else (img - lo) / (hi - lo)
    elif a.kind == "equalize":
        levels = np.clip(np.rint(np.nan_to_num(img) * 255), 0, 255).astype(int)
        hist = np.bincount(levels.ravel(), minlength=256)
        cdf = np.cumsum(hist)
        cdf_min = cdf[hist > 0][0]
        n = levels.size
        out = img.copy() if n == cdf_min else (cdf[levels] - cdf_min) / (n - cdf_min)
    elif a.kind == "rotation":
        ang = math.radians(rng.uniform(-s, s))
        c, sn = math.cos(ang), math.sin(ang)
        out = img.copy() if ang == 0 else _resample(img, np.array([[c, sn], [-sn, c]]))
    elif a.kind == "shear":
        k = rng.uniform(-s, s)
        out = _resample(img, np.array([[1.0, -k], [0.0, 1.0]]))
    elif a.kind == "translate":
        dx, dy = rng.integers(-int(s), int(s) + 1, size=2)
        out = np.zeros_like(img)
        h, w = img.shape
        out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = img[max(-dy, 0):h - max(dy, 0),
                                                                        max(-dx, 0):w - max(dx, 0)]
    elif a.kind == "solarize":
        out = np.where(img >= s, 1.0 - img, img)
    else:  # posterize
        levels = 2 ** int(s)
        out = np.minimum(np.floor(img * levels), levels - 1) / (levels - 1)
    return np.clip(out, 0.0, 1.0).reshape(shape)


@dataclass
class AdaptationConfig:
    B: int = 8
    eta: float = 1.0
    copy_semantics: bool = True
    kinds: tuple[str, ...] = ("identity",) + AUG_KINDS
    seed: int = 0

    def __post_init__(self):
        if self.B < 2:
            raise ValueError("B must be >= 2")
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")


def views(y, cfg: AdaptationConfig, sample_seed: int = 0) -> np.ndarray:
    """(B, H*W) augmented views; kinds cycle through ``cfg.kinds``."""
    flat = np.asarray(y, dtype=float).reshape(-1)
    out = np.empty((cfg.B, flat.size))
    for i in range(cfg.B):
        kind = cfg.kinds[i % len(cfg.kinds)]
        seed = int(np.random.SeedSequence([cfg.seed, sample_seed, i]).generate_state(1)[0])
        out[i] = augment(flat, Augmentation(kind, seed=seed))
    return out


def marginal_probs(v: Evaluator, y, cfg: AdaptationConfig, sample_seed: int = 0, view_batch=None) -> np.ndarray:
    if v.input_kind != "image":
        raise ValueError("test-time adaptation needs an image evaluator")
    x = views(y, cfg, sample_seed) if view_batch is None else view_batch
    return nn.forward(v.net, x).mean(axis=0)


def memo_loss(p_bar) -> float:
    """Entropy of the marginal pair; probabilities are floored at the shared clamp so 0 log 0 = 0."""
    p = np.asarray(p_bar, dtype=float)
    return float(-np.sum(p * np.log(np.clip(p, nn.PROB_EPS, 1.0))))


def memo_loss_and_grad(net: nn.DenseNet, view_batch: np.ndarray):
    """Entropy of the view-averaged softmax and its gradient w.r.t. all parameters."""
    cache = nn.forward_cache(net, view_batch)
    probs = cache[0][-1]
    p_bar = probs.mean(axis=0)
    clipped = np.clip(p_bar, nn.PROB_EPS, 1.0)
    d_pbar = -(np.log(clipped) + 1.0)
    d_out = np.broadcast_to(d_pbar / len(view_batch), probs.shape)
    grads, _ = nn.backward(net, cache, d_out)
    return memo_loss(p_bar), grads


@dataclass
class AdaptationLog:
    events: list[dict] = field(default_factory=list)

    def record(self, **kw):
        self.events.append(kw)


def adapt(v: Evaluator, y, cfg: AdaptationConfig, sample_seed: int = 0,
          log: AdaptationLog | None = None) -> Evaluator:
    """One gradient step on the marginal entropy for a single frame (no labels involved)."""
    if v.input_kind != "image":
        raise ValueError("test-time adaptation needs an image evaluator")
    x = views(y, cfg, sample_seed)
    loss, grads = memo_loss_and_grad(v.net, x)
    if not all(np.all(np.isfinite(g)) for g in grads):
        if log is not None:
            log.record(sample=sample_seed, event="skip", reason="non-finite gradient")
        return v
    out = Evaluator(v.net.copy(), v.input_kind) if cfg.copy_semantics else v
    if cfg.eta:
        for p, g in zip(out.net.params(), grads):
            p -= cfg.eta * g
    if log is not None:
        after = memo_loss(nn.forward(out.net, x).mean(axis=0))
        log.record(sample=sample_seed, event="adapt", loss_before=loss, loss_after=after)
    return out


def predict_adapted(v: Evaluator, y, cfg: AdaptationConfig, sample_seed: int = 0,
                    log: AdaptationLog | None = None) -> int:
    adapted = adapt(v, y, cfg, sample_seed, log)
    flat = np.asarray(y, dtype=float).reshape(1, -1)
    return int(nn.forward(adapted.net, flat)[0].argmax())


def predict_adapted_batch(v: Evaluator, frames: np.ndarray, cfg: AdaptationConfig,
                          log: AdaptationLog | None = None, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Labels and adapted softmax pairs for a stack of float frames (n, H*W)."""
    frames = np.asarray(frames, dtype=float).reshape(len(frames), -1)
    labels = np.empty(len(frames), np.int64)
    probs = np.empty((len(frames), 2))
    for i, y in enumerate(frames):
        adapted = adapt(v, y, cfg, offset + i, log)
        probs[i] = nn.forward(adapted.net, y[None])[0]
        labels[i] = probs[i].argmax()
    return labels, probs


# ------------------------------------------------------------- shifted set

@dataclass
class ShiftConfig:
    contrast: float = 0.6
    brightness: float = 0.0


def photometric(frames: np.ndarray, shift: ShiftConfig) -> np.ndarray:
    """Scale intensities by ``contrast`` then add ``brightness``, clipped to [0, 1]."""
    return np.clip(shift.contrast * np.asarray(frames, dtype=float) + shift.brightness, 0.0, 1.0)


def make_shifted_set(vae: VaeEncoder, f: LatentForecaster | None, ds: WindowDataset, shift: ShiftConfig | None,
                     latents: np.ndarray | None = None, idx=None) -> tuple[np.ndarray, np.ndarray]:
    """Decoded horizon-k forecasts (optionally photometrically shifted) and their true labels.

    With ``f=None`` the true future latents stand in for the forecast. Labels come from the
    ground-truth future state and are meant for scoring only.
    """
    from .predictors import encode

    if latents is None:
        latents = encode(vae, ds.frames)
    ends = ds.ends if idx is None else ds.ends[idx]
    if f is None:
        final = latents[ends + ds.k]
    else:
        final = forecast(f, window_features(latents, ds, idx))[:, -1, :]
    frames = decode(vae, final)
    if shift is not None:
        frames = photometric(frames, shift)
    return frames, ds.labels if idx is None else ds.labels[idx]
