"""On-disk artifacts: networks as per-layer tensor files plus JSON sidecars, and file hashes."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import tensorfile
from .nn import DenseNet


def git_hash(data: bytes) -> str:
    """Git blob id of a byte string."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_hash(path: str | os.PathLike) -> str:
    return git_hash(Path(path).read_bytes())


def tree_hash(paths) -> str:
    """Combined hash of several files (order-independent, names included)."""
    h = hashlib.sha1()
    for p in sorted(Path(p) for p in paths):
        h.update(p.name.encode() + b"\0" + file_hash(p).encode())
    return h.hexdigest()


def write_json(path: str | os.PathLike, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def read_json(path: str | os.PathLike):
    return json.loads(Path(path).read_text())


def write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def quantize(*nets: DenseNet) -> None:
    """Round parameters to float32 in place so saved and in-memory nets agree exactly."""
    for net in nets:
        for p in net.params():
            p[...] = p.astype(np.float32)


def save_net(directory: str | os.PathLike, net: DenseNet, meta: dict | None = None) -> list[Path]:
    d = Path(directory)
    files = []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        for name, arr in ((f"layer{i}_w.ctsr", w), (f"layer{i}_b.ctsr", b)):
            tensorfile.write(d / name, arr.astype(np.float32))
            files.append(d / name)
    write_json(d / "net.json", {**net.spec(), "meta": meta or {}})
    return files + [d / "net.json"]


def load_net(directory: str | os.PathLike) -> tuple[DenseNet, dict]:
    d = Path(directory)
    spec = read_json(d / "net.json")
    n = len(spec["activations"])
    weights = [tensorfile.read(d / f"layer{i}_w.ctsr").astype(np.float64) for i in range(n)]
    biases = [tensorfile.read(d / f"layer{i}_b.ctsr").astype(np.float64) for i in range(n)]
    net = DenseNet(weights, biases, list(spec["activations"]))
    if net.layer_dims != spec["layer_dims"]:
        raise ValueError(f"{d}: stored layer dims {spec['layer_dims']} disagree with tensors {net.layer_dims}")
    return net, spec["meta"]


def net_files(directory: str | os.PathLike) -> list[Path]:
    return sorted(Path(directory).glob("*.ctsr")) + [Path(directory) / "net.json"]
