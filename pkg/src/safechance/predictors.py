"""Monolithic and composite safety predictors built on :mod:`safechance.nn`.

Class index 1 is "safe" everywhere; score pairs are ``(p_unsafe, p_safe)``.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .sim import FRAME_H, FRAME_W, WindowDataset, rebalance_indices, to_pixels

N_PIXELS = FRAME_H * FRAME_W
INPUT_KINDS = ("image", "latent", "latent_window")


def net_fingerprint(*nets: nn.DenseNet) -> str:
    h = hashlib.sha256()
    for net in nets:
        for p in net.params():
            h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------- VAE

@dataclass
class VaeEncoder:
    enc: nn.DenseNet  # pixels -> [mean | log_var]
    dec: nn.DenseNet  # latent -> pixels (sigmoid)
    latent_dim: int
    lambda1: float = 1.0
    frozen: bool = False

    def __post_init__(self):
        if self.enc.layer_dims[-1] != 2 * self.latent_dim:
            raise ValueError("encoder output must be 2 * latent_dim (mean and log-variance)")
        if self.dec.layer_dims[0] != self.latent_dim:
            raise ValueError(f"decoder input dim {self.dec.layer_dims[0]} != latent dim {self.latent_dim}")

    @property
    def fingerprint(self) -> str:
        return net_fingerprint(self.enc, self.dec)


def new_vae(rng: np.random.Generator, latent_dim: int = 16, hidden: int = 128, lambda1: float = 1.0,
            n_pixels: int = N_PIXELS) -> VaeEncoder:
    enc = nn.init_net([n_pixels, hidden, 2 * latent_dim], ["tanh", "identity"], rng)
    dec = nn.init_net([latent_dim, hidden, n_pixels], ["tanh", "sigmoid"], rng)
    return VaeEncoder(enc, dec, latent_dim, lambda1)


def kl_divergence(mean: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    """KL(N(mean, exp(log_var)) || N(0, I)) per row."""
    return 0.5 * np.sum(mean**2 + np.exp(log_var) - 1.0 - log_var, axis=-1)


def vae_loss_and_grad(vae: VaeEncoder, x: np.ndarray, noise: np.ndarray):
    """Loss and gradients (encoder params then decoder params) for fixed noise draws.

    Loss per sample is the summed squared pixel error plus lambda1 times the closed-form
    KL term, averaged over the batch.
    """
    d = vae.latent_dim
    b = len(x)
    enc_cache = nn.forward_cache(vae.enc, x)
    h = enc_cache[0][-1]
    mean, log_var = h[:, :d], h[:, d:]
    std = np.exp(0.5 * log_var)
    z = mean + std * noise
    dec_cache = nn.forward_cache(vae.dec, z)
    recon = dec_cache[0][-1]
    resid = recon - x
    recon_loss = np.sum(resid**2) / b
    kl = np.sum(kl_divergence(mean, log_var)) / b
    dec_grads, dz = nn.backward(vae.dec, dec_cache, 2.0 * resid / b)
    d_mean = dz + vae.lambda1 * mean / b
    d_log_var = dz * noise * 0.5 * std + vae.lambda1 * 0.5 * (np.exp(log_var) - 1.0) / b
    enc_grads, _ = nn.backward(vae.enc, enc_cache, np.hstack([d_mean, d_log_var]))
    return float(recon_loss + vae.lambda1 * kl), enc_grads + dec_grads


def train_vae(frames: np.ndarray, cfg: nn.TrainConfig, lambda1: float = 1.0, latent_dim: int = 16,
              hidden: int = 128, vae: VaeEncoder | None = None) -> tuple[VaeEncoder, nn.TrainResult]:
    """Fit a VAE on uint8 frames (or float pixels in [0,1]); the result is frozen."""
    if len(frames) == 0:
        raise ValueError("no frames to train on")
    if lambda1 < 0:
        raise ValueError("lambda1 must be >= 0")
    if vae is None:
        vae = new_vae(np.random.default_rng([cfg.seed, 17]), latent_dim, hidden, lambda1)
    vae.lambda1 = lambda1
    vae.frozen = False
    as_float = frames.dtype == np.uint8

    def objective(model, idx, rng):
        x = to_pixels(frames[idx]) if as_float else frames[idx]
        noise = rng.standard_normal((len(idx), vae.latent_dim))
        return vae_loss_and_grad(vae, x, noise)

    result = nn.train([vae.enc, vae.dec], len(frames), objective, cfg)
    probe = to_pixels(frames[:512]) if as_float else frames[:512]
    var = np.exp(nn.forward(vae.enc, probe)[:, latent_dim:])
    if float(var.mean()) < 1e-6:
        warnings.warn("VAE posterior variance collapsed below 1e-6", RuntimeWarning, stacklevel=2)
    vae.frozen = True
    return vae, result


def encode(vae: VaeEncoder, frames) -> np.ndarray:
    """Posterior means; accepts one frame or a stack of uint8 / float frames."""
    frames = np.asarray(frames)
    single = frames.ndim == 2 and frames.shape == (FRAME_H, FRAME_W) or frames.ndim == 1
    batch = frames[None] if single else frames
    if batch.dtype == np.uint8:
        out = nn.predict_batched(vae.enc, batch, transform=to_pixels)[:, :vae.latent_dim]
    else:
        out = nn.predict_batched(vae.enc, np.asarray(batch, float).reshape(len(batch), -1))[:, :vae.latent_dim]
    return out[0] if single else out


def decode(vae: VaeEncoder, latents) -> np.ndarray:
    latents = np.asarray(latents, dtype=float)
    single = latents.ndim == 1
    out = nn.predict_batched(vae.dec, latents[None] if single else latents)
    return out[0] if single else out


# ------------------------------------------------------------------- windows

def action_feature(actions: np.ndarray, force_max: float = 10.0) -> np.ndarray:
    return np.sign(np.asarray(actions, dtype=float)) if force_max else np.asarray(actions, float)


def window_features(latents: np.ndarray, ds: WindowDataset, idx=None) -> np.ndarray:
    """(n, m*(d+1)) features: each window latent followed by its normalized action."""
    win = ds.window_indices(idx)
    acts = action_feature(ds.actions[win])[..., None]
    return np.concatenate([latents[win], acts], axis=2).reshape(len(win), -1)


def pixel_window_features(ds: WindowDataset, idx=None) -> np.ndarray:
    win = ds.window_indices(idx)
    px = to_pixels(ds.frames[win.ravel()]).reshape(len(win), ds.m, -1)
    acts = action_feature(ds.actions[win])[..., None]
    return np.concatenate([px, acts], axis=2).reshape(len(win), -1)


# --------------------------------------------------------------- forecaster

@dataclass
class LatentForecaster:
    net: nn.DenseNet
    m: int
    n: int
    k: int
    latent_dim: int
    encoder_fingerprint: str = ""

    def __post_init__(self):
        if self.n > self.k:
            raise ValueError(f"output window n={self.n} exceeds horizon k={self.k}")
        if self.net.layer_dims[0] != self.m * (self.latent_dim + 1):
            raise ValueError("forecaster input must be m * (latent_dim + 1)")
        if self.net.layer_dims[-1] != self.n * self.latent_dim:
            raise ValueError("forecaster output must be n * latent_dim")


def forecast_targets(latents: np.ndarray, ds: WindowDataset, n: int, idx=None) -> np.ndarray:
    ends = ds.ends if idx is None else ds.ends[idx]
    steps = ends[:, None] + ds.k + np.arange(-n + 1, 1)[None, :]
    return latents[steps].reshape(len(ends), -1)


def train_forecaster(vae: VaeEncoder, ds: WindowDataset, cfg: nn.TrainConfig, n: int = 1, hidden: int = 64,
                     latents: np.ndarray | None = None) -> tuple[LatentForecaster, nn.TrainResult]:
    """Regress future latents (from true future frames) on the latent/action window."""
    if not vae.frozen:
        raise RuntimeError("train the VAE first: forecaster targets need a frozen encoder")
    if latents is None:
        latents = encode(vae, ds.frames)
    x = window_features(latents, ds)
    y = forecast_targets(latents, ds, n)
    rng = np.random.default_rng([cfg.seed, 23])
    net = nn.mlp([x.shape[1], hidden, n * vae.latent_dim], rng)
    result = nn.train(net, len(x), nn.supervised(x, y, "mse"), cfg)
    return LatentForecaster(net, ds.m, n, ds.k, vae.latent_dim, vae.fingerprint), result


def forecast(f: LatentForecaster, features: np.ndarray) -> np.ndarray:
    """(batch, n, d) predicted latents; the last one is aligned with the horizon."""
    out = nn.predict_batched(f.net, np.atleast_2d(features))
    return out.reshape(len(out), f.n, f.latent_dim)


# ---------------------------------------------------------------- evaluator

@dataclass
class Evaluator:
    net: nn.DenseNet
    input_kind: str

    def __post_init__(self):
        if self.input_kind not in INPUT_KINDS:
            raise ValueError(f"unknown input kind {self.input_kind!r}")
        if self.net.activations[-1] != "softmax" or self.net.layer_dims[-1] != 2:
            raise ValueError("evaluator must end in a 2-way softmax")

    def probs(self, x) -> np.ndarray:
        return nn.forward(self.net, x)


def classifier(in_dim: int, hidden: int, rng: np.random.Generator, depth: int = 1) -> nn.DenseNet:
    return nn.mlp([in_dim] + [hidden] * depth + [2], rng, out="softmax")


def train_classifier(inputs, labels, cfg: nn.TrainConfig, hidden: int = 32, transform=None,
                     depth: int = 1, balance: bool = True) -> tuple[nn.DenseNet, nn.TrainResult]:
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("training labels contain a single class")
    rng = np.random.default_rng([cfg.seed, 29])
    idx = rebalance_indices(labels, rng) if balance else np.arange(len(labels))
    x0 = inputs[idx[:1]]
    in_dim = (transform(x0) if transform is not None else np.asarray(x0)).reshape(1, -1).shape[1]
    net = classifier(in_dim, hidden, rng, depth)

    def objective(model, b, r):
        sel = idx[b]
        x = inputs[sel]
        if transform is not None:
            x = transform(x)
        return nn.loss_and_grad(model, x, labels[sel], "cross_entropy")

    return net, nn.train(net, len(idx), objective, cfg)


def train_evaluator(inputs, labels, cfg: nn.TrainConfig, input_kind: str, hidden: int = 32,
                    depth: int = 1) -> tuple[Evaluator, nn.TrainResult]:
    """Train a 2-class evaluator; uint8 frames are converted to [0,1] pixels per batch."""
    inputs = np.asarray(inputs)
    transform = to_pixels if inputs.dtype == np.uint8 else None
    net, result = train_classifier(inputs, labels, cfg, hidden, transform, depth)
    return Evaluator(net, input_kind), result


# ------------------------------------------------------------- predictors

@dataclass
class MonolithicPredictor:
    head: nn.DenseNet
    m: int
    k: int
    vae: VaeEncoder | None = None  # None: raw pixels
    encoder_fingerprint: str = ""

    def features(self, ds: WindowDataset, idx=None, latents=None) -> np.ndarray:
        if self.vae is None:
            return pixel_window_features(ds, idx)
        if latents is None:
            latents = encode(self.vae, ds.frames)
        return window_features(latents, ds, idx)


def train_monolithic(vae: VaeEncoder | None, ds: WindowDataset, cfg: nn.TrainConfig, hidden: int = 64,
                     latents: np.ndarray | None = None) -> tuple[MonolithicPredictor, nn.TrainResult]:
    """Train the 2-class head on encoded windows, or on raw pixel windows when ``vae`` is None."""
    if vae is not None and not vae.frozen:
        raise RuntimeError("train the VAE first: the monolithic head needs a frozen encoder")
    p = MonolithicPredictor(None, ds.m, ds.k, vae, vae.fingerprint if vae else "")  # type: ignore[arg-type]
    if vae is None:
        # pixel windows are materialized per batch only
        p.head, result = train_classifier(np.arange(len(ds)), ds.labels, cfg, hidden,
                                          transform=lambda idx: pixel_window_features(ds, idx))
    else:
        p.head, result = train_classifier(p.features(ds, latents=latents), ds.labels, cfg, hidden)
    return p, result


CHUNK = 4096


def _chunks(ds: WindowDataset, idx):
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx)
    for start in range(0, max(len(idx), 1), CHUNK):
        yield idx[start:start + CHUNK]


def _label_scores(net: nn.DenseNet, x: np.ndarray):
    z = nn.predict_batched(net, np.atleast_2d(x), fn=nn.logits)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    return probs.argmax(axis=1), probs, z


@dataclass
class Prediction:
    labels: np.ndarray  # argmax class, 1 = safe
    probs: np.ndarray  # (n, 2) softmax pairs
    logits: np.ndarray  # (n, 2)

    @property
    def scores(self) -> np.ndarray:
        return self.probs[:, 1]

    @classmethod
    def concat(cls, parts: list[Prediction]) -> Prediction:
        return cls(np.concatenate([p.labels for p in parts]), np.concatenate([p.probs for p in parts]),
                   np.concatenate([p.logits for p in parts]))


def _window_array(window) -> tuple[np.ndarray, np.ndarray]:
    frames = np.array([f for f, _ in window])
    actions = np.array([a for _, a in window], dtype=float)
    return frames, actions


def _single_window_ds(window, k: int) -> WindowDataset:
    frames, actions = _window_array(window)
    m = len(frames)
    return WindowDataset(frames, actions, np.zeros((m, 4)), np.array([m - 1]), np.zeros(1, np.int64), m, k,
                         np.zeros(1, np.int64))


def predict_monolithic_batch(p: MonolithicPredictor, ds: WindowDataset, idx=None, latents=None) -> Prediction:
    if ds.m != p.m:
        raise ValueError(f"window length {ds.m} != predictor window {p.m}")
    if p.vae is not None and latents is None:
        latents = encode(p.vae, ds.frames)
    return Prediction.concat([Prediction(*_label_scores(p.head, p.features(ds, c, latents)))
                              for c in _chunks(ds, idx)])


def predict_monolithic(p: MonolithicPredictor, window) -> tuple[int, np.ndarray]:
    """Label and softmax pair for one window of (frame, action) pairs."""
    pred = predict_monolithic_batch(p, _single_window_ds(window, p.k))
    return int(pred.labels[0]), pred.probs[0]


def _check_stages(vae: VaeEncoder, f: LatentForecaster, v: Evaluator, m: int):
    if f.encoder_fingerprint and f.encoder_fingerprint != vae.fingerprint:
        raise RuntimeError("forecaster was trained against a different encoder; retrain it")
    if f.latent_dim != vae.latent_dim:
        raise ValueError(f"forecaster stage: latent dim {f.latent_dim} != encoder {vae.latent_dim}")
    if m != f.m:
        raise ValueError(f"forecaster stage: window length {m} != forecaster m {f.m}")
    need = {"latent": f.latent_dim, "latent_window": f.n * f.latent_dim, "image": vae.dec.layer_dims[-1]}
    if v.input_kind not in need:
        raise ValueError(f"evaluator stage: unknown input kind {v.input_kind!r}")
    if v.net.layer_dims[0] != need[v.input_kind]:
        raise ValueError(f"evaluator stage: expects {v.net.layer_dims[0]} inputs, pipeline gives "
                         f"{need[v.input_kind]} for kind {v.input_kind!r}")


def evaluator_inputs(v: Evaluator, predicted: np.ndarray) -> np.ndarray:
    """Map (batch, n, d) forecasts to what a latent evaluator consumes."""
    if v.input_kind == "latent":
        return predicted[:, -1, :]
    if v.input_kind == "latent_window":
        return predicted.reshape(len(predicted), -1)
    raise ValueError(f"latent pipeline cannot feed an {v.input_kind!r} evaluator")


def predict_composite_batch(vae: VaeEncoder, f: LatentForecaster, v: Evaluator, ds: WindowDataset, idx=None,
                            latents=None) -> Prediction:
    _check_stages(vae, f, v, ds.m)
    if latents is None:
        latents = encode(vae, ds.frames)
    predicted = forecast(f, window_features(latents, ds, idx))
    return Prediction(*_label_scores(v.net, evaluator_inputs(v, predicted)))


def predict_composite(vae: VaeEncoder, f: LatentForecaster, v: Evaluator, window) -> tuple[int, np.ndarray]:
    pred = predict_composite_batch(vae, f, v, _single_window_ds(window, f.k))
    return int(pred.labels[0]), pred.probs[0]


def forecast_frames(vae: VaeEncoder, f: LatentForecaster, ds: WindowDataset, idx=None, latents=None) -> np.ndarray:
    """Decoded final forecast latent for each window, as (n, H*W) pixels."""
    if latents is None:
        latents = encode(vae, ds.frames)
    predicted = forecast(f, window_features(latents, ds, idx))
    return decode(vae, predicted[:, -1, :])


def predict_composite_image_batch(vae: VaeEncoder, f: LatentForecaster, v_img: Evaluator, ds: WindowDataset,
                                  idx=None, latents=None) -> Prediction:
    if v_img.input_kind != "image":
        raise ValueError("composite image pipeline needs an image evaluator")
    _check_stages(vae, f, v_img, ds.m)
    if latents is None:
        latents = encode(vae, ds.frames)
    return Prediction.concat([Prediction(*_label_scores(v_img.net, forecast_frames(vae, f, ds, c, latents)))
                              for c in _chunks(ds, idx)])


def predict_composite_image(vae: VaeEncoder, f: LatentForecaster, v_img: Evaluator, window) -> tuple[int, np.ndarray]:
    pred = predict_composite_image_batch(vae, f, v_img, _single_window_ds(window, f.k))
    return int(pred.labels[0]), pred.probs[0]
