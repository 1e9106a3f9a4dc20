"""Small dense networks with hand-written backprop, Adam, and a shared training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

log = logging.getLogger(__name__)

PROB_EPS = 1e-12
ACTIVATIONS = ("tanh", "relu", "identity", "sigmoid", "softmax")


@dataclass
class DenseNet:
    weights: list[np.ndarray]  # (fan_in, fan_out)
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have one entry per layer")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if act == "softmax" and i != len(self.weights) - 1:
                raise ValueError("softmax is only allowed on the output layer")
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> DenseNet:
        return copy.deepcopy(self)

    def spec(self) -> dict:
        return {"layer_dims": self.layer_dims, "activations": list(self.activations)}


Model = Union[DenseNet, Sequence[DenseNet]]


def init_net(dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> DenseNet:
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    ws, bs = [], []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        scale = math.sqrt((2.0 if act == "relu" else 1.0) / fan_in)
        ws.append(rng.standard_normal((fan_in, fan_out)) * scale)
        bs.append(np.zeros(fan_out))
    return DenseNet(ws, bs, list(activations))


def mlp(dims: Sequence[int], rng: np.random.Generator, hidden: str = "tanh", out: str = "identity") -> DenseNet:
    return init_net(dims, [hidden] * (len(dims) - 2) + [out], rng)


def params_of(model: Model) -> list[np.ndarray]:
    if isinstance(model, DenseNet):
        return model.params()
    return [p for net in model for p in net.params()]


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if name == "softmax":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    return z


def _act_backward(name: str, z: np.ndarray, a: np.ndarray, da: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return da * (1.0 - a * a)
    if name == "relu":
        return da * (z > 0)
    if name == "sigmoid":
        return da * a * (1.0 - a)
    if name == "softmax":
        return a * (da - (a * da).sum(axis=1, keepdims=True))
    return da


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != net.layer_dims[0]:
        raise ValueError(f"input dim {x.shape[1]} != network input dim {net.layer_dims[0]}")
    return x, single


def forward_cache(net: DenseNet, x) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Return (layer inputs..., output) activations and pre-activations for backprop."""
    x, _ = _as_batch(net, x)
    acts, pre = [x], []
    for w, b, name in zip(net.weights, net.biases, net.activations):
        z = acts[-1] @ w + b
        pre.append(z)
        acts.append(_act(name, z))
    return acts, pre


def forward(net: DenseNet, x) -> np.ndarray:
    x, single = _as_batch(net, x)
    for w, b, name in zip(net.weights, net.biases, net.activations):
        x = _act(name, x @ w + b)
    return x[0] if single else x


def logits(net: DenseNet, x) -> np.ndarray:
    """Output pre-activations (the logits for a softmax head)."""
    x, single = _as_batch(net, x)
    for i, (w, b, name) in enumerate(zip(net.weights, net.biases, net.activations)):
        x = x @ w + b
        if i < len(net.weights) - 1:
            x = _act(name, x)
    return x[0] if single else x


def backward(net: DenseNet, cache, d_out: np.ndarray, d_pre_out: bool = False):
    """Reverse-mode pass given dL/d(output); returns (param grads, dL/d(input)).

    With ``d_pre_out`` the gradient is taken to be w.r.t. the output pre-activation
    (used for the fused softmax/cross-entropy shortcut).
    """
    acts, pre = cache
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    d = d_out
    for i in reversed(range(len(net.weights))):
        if not (d_pre_out and i == len(net.weights) - 1):
            d = _act_backward(net.activations[i], pre[i], acts[i + 1], d)
        grads[2 * i] = acts[i].T @ d
        grads[2 * i + 1] = d.sum(axis=0)
        d = d @ net.weights[i].T
    return grads, d


def one_hot(labels, n: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


def cross_entropy(probs: np.ndarray, labels) -> float:
    p = np.clip(probs[np.arange(len(probs)), np.asarray(labels, dtype=np.int64)], PROB_EPS, 1 - PROB_EPS)
    return float(-np.mean(np.log(p)))


def loss_and_grad(net: DenseNet, x, y=None, loss: str = "mse", d_out: np.ndarray | None = None):
    """Loss value and parameter gradients for one batch.

    ``loss`` is "mse" (mean over all output elements), "cross_entropy" (integer labels,
    softmax output) or "external", where ``d_out`` is dL/d(output) supplied by the caller
    and the returned loss is None.
    """
    cache = forward_cache(net, x)
    out = cache[0][-1]
    if loss == "mse":
        y = np.asarray(y, dtype=np.float64).reshape(out.shape)
        grads, _ = backward(net, cache, 2.0 * (out - y) / out.size)
        return mse(out, y), grads
    if loss == "cross_entropy":
        if net.activations[-1] != "softmax":
            raise ValueError("cross_entropy needs a softmax output layer")
        oh = one_hot(y, out.shape[1])
        grads, _ = backward(net, cache, (out - oh) / len(out), d_pre_out=True)
        return cross_entropy(out, y), grads
    if loss == "external":
        if d_out is None:
            raise ValueError("external loss needs d_out")
        grads, _ = backward(net, cache, np.asarray(d_out, dtype=np.float64).reshape(out.shape))
        return None, grads
    raise ValueError(f"unknown loss {loss!r}")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: Model) -> AdamState:
        ps = params_of(model)
        return cls([np.zeros_like(p) for p in ps], [np.zeros_like(p) for p in ps])


def adam_step(model: Model, grads: list[np.ndarray], state: AdamState, lr: float):
    """In-place Adam update; returns (model, state) for chaining."""
    ps = params_of(model)
    if len(ps) != len(grads) or any(p.shape != g.shape for p, g in zip(ps, grads)):
        raise ValueError("gradient shapes do not match the model parameters")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(ps, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 100
    plateau_window: int = 10
    plateau_eps: float = 1e-4
    lr_decay: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.plateau_eps > 0:
            raise ValueError("plateau_eps must be > 0")
        if not 0 < self.lr_decay < 1:
            raise ValueError("lr_decay must be in (0, 1)")


@dataclass
class TrainResult:
    losses: list[float]
    best: list[float]  # running minimum of losses
    lr_decay_epoch: int | None
    stop_reason: str


Objective = Callable[[Model, np.ndarray, np.random.Generator], tuple[float, list[np.ndarray]]]


def supervised(inputs, targets, loss: str, transform: Callable | None = None) -> Objective:
    """Objective over indexable inputs; ``transform`` maps a raw input batch to floats."""

    def objective(net, idx, rng):
        x = inputs[idx]
        if transform is not None:
            x = transform(x)
        return loss_and_grad(net, x, targets[idx], loss)

    return objective


def train(model: Model, n: int, objective: Objective, cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam over ``n`` samples with the plateau rule.

    When the mean per-epoch improvement over the last ``plateau_window`` epochs falls
    below ``plateau_eps`` the learning rate is multiplied by ``lr_decay`` once; the next
    plateau (measured from the decay epoch) stops training.
    """
    if n < 1:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.for_model(model)
    lr = cfg.learning_rate
    losses: list[float] = []
    best: list[float] = []
    decay_epoch = None
    reason = "max_epochs"
    w = cfg.plateau_window
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            value, grads = objective(model, idx, rng)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {bi}")
            adam_step(model, grads, state, lr)
            total += value * len(idx)
        losses.append(total / n)
        best.append(min(losses[-1], best[-1]) if best else losses[-1])
        since = epoch - (decay_epoch if decay_epoch is not None else 0)
        if since >= w and (losses[epoch - w] - losses[epoch]) / w < cfg.plateau_eps:
            if decay_epoch is None:
                decay_epoch = epoch
                lr *= cfg.lr_decay
                log.debug("plateau at epoch %d, lr -> %g", epoch, lr)
            else:
                reason = "plateau"
                break
    return TrainResult(losses, best, decay_epoch, reason)


def iterate_batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def predict_batched(net: DenseNet, inputs, transform: Callable | None = None, size: int = 4096,
                    fn: Callable = forward) -> np.ndarray:
    outs = []
    for sl in iterate_batches(len(inputs), size):
        x = inputs[sl]
        outs.append(fn(net, transform(x) if transform is not None else x))
    if not outs:
        return np.zeros((0, net.layer_dims[-1]))
    return np.concatenate(outs)
