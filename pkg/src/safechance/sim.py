"""Cart-pole environment: physics, rendering, scripted controller, datasets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FRAME_W = 32
FRAME_H = 32
TRACK_LIMIT = 2.4
SAFE_ANGLE = 6.0 * math.pi / 180.0
ACTIVITY_ANGLE = 48.0 * math.pi / 180.0

CART_ROWS = (24, 25)
CART_WIDTH = 6
POLE_PIXELS = 12


@dataclass(frozen=True)
class PhysicsParams:
    gravity: float = 9.8
    mass_cart: float = 1.0
    mass_pole: float = 0.1
    length: float = 0.5  # half pole length
    force_max: float = 10.0
    dt: float = 0.02

    def __post_init__(self):
        if min(self.mass_cart, self.mass_pole, self.length, self.dt) <= 0:
            raise ValueError(f"physics params must be positive: {self}")


@dataclass(frozen=True)
class SystemState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])

    @classmethod
    def from_array(cls, a) -> SystemState:
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass
class ControllerParams:
    """Noisy bang-bang state feedback; gains are perturbed once per rollout."""

    gains: tuple[float, float, float, float] = (0.05, 0.2, 1.0, 0.3)
    gain_scale: float = 1.0
    noise_std: float = 0.02


@dataclass
class Trajectory:
    states: np.ndarray  # (T, 4) float64
    frames: np.ndarray  # (T, H, W) uint8, 0/255 intensities
    actions: np.ndarray  # (T - 1,) float64, signed force
    seed: int
    cause: str = "horizon"  # horizon | track | angle
    clamped: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)


def _check_finite(s) -> np.ndarray:
    a = s.as_array() if isinstance(s, SystemState) else np.asarray(s, dtype=float)
    if a.shape != (4,) or not np.all(np.isfinite(a)):
        raise ValueError(f"state must be 4 finite values, got {a!r}")
    return a


def step(s, force: float, p: PhysicsParams = PhysicsParams()) -> np.ndarray:
    """Advance one timestep with semi-implicit Euler (rates first, then positions).

    ``s`` is a SystemState or a length-4 array; the new state is returned as an array.
    """
    x, x_dot, theta, theta_dot = _check_finite(s)
    total = p.mass_cart + p.mass_pole
    sin_t, cos_t = math.sin(theta), math.cos(theta)
    theta_acc = (p.gravity * sin_t + cos_t * (-force - p.mass_pole * p.length * theta_dot**2 * sin_t) / total) / (
        p.length * (4.0 / 3.0 - p.mass_pole * cos_t**2 / total)
    )
    x_acc = (force + p.mass_pole * p.length * (theta_dot**2 * sin_t - theta_acc * cos_t)) / total
    x_dot = x_dot + p.dt * x_acc
    theta_dot = theta_dot + p.dt * theta_acc
    return np.array([x + p.dt * x_dot, x_dot, theta + p.dt * theta_dot, theta_dot])


def is_safe(s) -> int:
    theta = s.theta if isinstance(s, SystemState) else s[2]
    return int(abs(theta) <= SAFE_ANGLE)


def cart_column(x: float) -> int:
    return int(np.rint((x + TRACK_LIMIT) / (2 * TRACK_LIMIT) * (FRAME_W - 1)))


def pole_pixels(col: int, theta: float) -> list[tuple[int, int]]:
    """(row, col) pixels of the pole: a DDA line of unit steps along its major axis."""
    dx, dy = math.sin(theta), -math.cos(theta)
    major = max(abs(dx), abs(dy))
    dx, dy = dx / major, dy / major
    row0 = CART_ROWS[0] - 1
    return [(row0 + int(np.rint(t * dy)), col + int(np.rint(t * dx))) for t in range(POLE_PIXELS)]


def cart_pixels(col: int) -> list[tuple[int, int]]:
    half = CART_WIDTH // 2
    return [(r, c) for r in CART_ROWS for c in range(col - half, col - half + CART_WIDTH)]


def render(s) -> tuple[np.ndarray, bool]:
    """Rasterize a state to a uint8 frame (0 background, 255 lit).

    Returns ``(frame, clamped)``; ``clamped`` is set when x left the track and was
    pinned to its edge.
    """
    a = _check_finite(s)
    x = float(np.clip(a[0], -TRACK_LIMIT, TRACK_LIMIT))
    col = cart_column(x)
    frame = np.zeros((FRAME_H, FRAME_W), dtype=np.uint8)
    for r, c in cart_pixels(col) + pole_pixels(col, a[2]):
        if 0 <= r < FRAME_H and 0 <= c < FRAME_W:
            frame[r, c] = 255
    return frame, x != a[0]


def to_pixels(frames: np.ndarray) -> np.ndarray:
    """uint8 frames -> float intensities in [0,1], flattened to (n, H*W)."""
    frames = np.asarray(frames)
    single = frames.ndim == 1 or frames.shape == (FRAME_H, FRAME_W)
    return frames.reshape(1 if single else frames.shape[0], -1) / 255.0


def perturb_gains(cp: ControllerParams, rng: np.random.Generator) -> np.ndarray:
    base = np.asarray(cp.gains, dtype=float)
    return base + cp.gain_scale * np.abs(base) * rng.standard_normal(4)


def controller(s, gains, rng: np.random.Generator, noise_std: float, force_max: float = 10.0) -> float:
    a = _check_finite(s)
    eps = noise_std * rng.standard_normal() if noise_std > 0 else 0.0
    return force_max if float(np.dot(gains, a)) + eps > 0 else -force_max


def initial_state(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-0.05, 0.05, size=4)


def rollout(
    s0,
    steps: int,
    seed: int,
    cp: ControllerParams = ControllerParams(),
    p: PhysicsParams = PhysicsParams(),
    gains=None,
) -> Trajectory:
    """Run the controller for up to ``steps`` actions, stopping on track or angle exit.

    All randomness (gain perturbation, action noise) comes from ``seed``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    if gains is None:
        gains = perturb_gains(cp, rng)
    s = _check_finite(s0)
    states, frames, actions, clamped = [s], [], [], []
    cause = "horizon"
    for t in range(steps):
        f, c = render(s)
        frames.append(f)
        if c:
            clamped.append(t)
        u = controller(s, gains, rng, cp.noise_std, p.force_max)
        s = step(s, u, p)
        actions.append(u)
        states.append(s)
        if abs(s[0]) > TRACK_LIMIT:
            cause = "track"
            break
        if abs(s[2]) > ACTIVITY_ANGLE:
            cause = "angle"
            break
    f, c = render(s)
    frames.append(f)
    if c:
        clamped.append(len(states) - 1)
    return Trajectory(
        states=np.array(states),
        frames=np.array(frames, dtype=np.uint8),
        actions=np.array(actions),
        seed=seed,
        cause=cause,
        clamped=clamped,
    )


def random_rollout(seed: int, steps: int, cp: ControllerParams = ControllerParams(),
                   p: PhysicsParams = PhysicsParams()) -> Trajectory:
    """Rollout from a seed-derived initial state (uniform in +-0.05 per component)."""
    s0 = initial_state(np.random.default_rng([seed, 1]))
    return rollout(s0, steps, seed, cp, p)


@dataclass
class WindowDataset:
    """Windows of (frame, action) pairs with a safety label ``k`` steps after the window end.

    Windows are stored as indices into ``frames``/``actions``/``states``, which are the
    concatenation of all source trajectories; ``ends[j]`` is the global index of the last
    frame of window j. Actions at the last state of a trajectory are padded with 0.
    """

    frames: np.ndarray  # (N, H, W) uint8
    actions: np.ndarray  # (N,) float
    states: np.ndarray  # (N, 4)
    ends: np.ndarray  # (n,) int64
    labels: np.ndarray  # (n,) int64
    m: int
    k: int
    traj_ids: np.ndarray  # (n,) source trajectory position

    def __len__(self) -> int:
        return len(self.ends)

    def window_indices(self, idx=None) -> np.ndarray:
        ends = self.ends if idx is None else self.ends[idx]
        return ends[:, None] + np.arange(-self.m + 1, 1)[None, :]

    def window(self, j: int) -> list[tuple[np.ndarray, float]]:
        return [(self.frames[i], float(self.actions[i])) for i in self.window_indices([j])[0]]

    def subset(self, idx) -> WindowDataset:
        idx = np.asarray(idx)
        return WindowDataset(self.frames, self.actions, self.states, self.ends[idx], self.labels[idx],
                             self.m, self.k, self.traj_ids[idx])


def concat_trajectories(trajs: list[Trajectory]):
    frames = np.concatenate([t.frames for t in trajs]) if trajs else np.zeros((0, FRAME_H, FRAME_W), np.uint8)
    states = np.concatenate([t.states for t in trajs]) if trajs else np.zeros((0, 4))
    actions = np.concatenate([np.append(t.actions, 0.0) for t in trajs]) if trajs else np.zeros(0)
    offsets = np.cumsum([0] + [len(t) for t in trajs])
    return frames, actions, states, offsets


def window_ends(lengths, m: int, k: int):
    """Global window-end indices and owning trajectory for trajectories of the given lengths."""
    if m < 1 or k < 1:
        raise ValueError(f"need m >= 1 and k >= 1, got m={m}, k={k}")
    ends, owners = [], []
    offset = 0
    for ti, T in enumerate(lengths):
        count = max(0, T - m - k + 1)
        ends.append(offset + m - 1 + np.arange(count))
        owners.append(np.full(count, ti))
        offset += T
    if not ends:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(ends).astype(np.int64), np.concatenate(owners).astype(np.int64)


def build_dataset(trajs: list[Trajectory], m: int, k: int) -> WindowDataset:
    frames, actions, states, _ = concat_trajectories(trajs)
    ends, owners = window_ends([len(t) for t in trajs], m, k)
    labels = (np.abs(states[ends + k, 2]) <= SAFE_ANGLE).astype(np.int64) if len(ends) else np.zeros(0, np.int64)
    return WindowDataset(frames, actions, states, ends, labels, m, k, owners)


def rebalance_indices(labels, rng: np.random.Generator) -> np.ndarray:
    """Indices resampled so both classes match the larger class count, shuffled.

    The larger class is kept whole; the smaller one is drawn with replacement.
    """
    labels = np.asarray(labels)
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    if len(pos) == 0:
        raise ValueError("cannot rebalance: no safe (label 1) samples")
    if len(neg) == 0:
        raise ValueError("cannot rebalance: no unsafe (label 0) samples")
    big, small = (pos, neg) if len(pos) >= len(neg) else (neg, pos)
    extra = small if len(small) == len(big) else rng.choice(small, size=len(big), replace=True)
    idx = np.concatenate([big, extra])
    rng.shuffle(idx)
    return idx


def rebalance(ds: WindowDataset, rng: np.random.Generator) -> WindowDataset:
    """1:1 safe/unsafe resample of a window dataset (see :func:`rebalance_indices`)."""
    return ds.subset(rebalance_indices(ds.labels, rng))
