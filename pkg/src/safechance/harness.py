"""Experiment orchestration: data generation, training, evaluation, calibration, conformal bounds, reports.

Layout under ``cfg.out``::

    data/manifest.json
    data/{split}/frames.ctsr states.ctsr actions.ctsr windows_m{m}_k{k}.ctsr
    models/vae/{enc,dec}/  models/evaluator_{image,latent}/  models/{mono,forecaster}_m{m}_k{k}/
    models/calibrator_{pipeline}_m{m}_k{k}.json
    results/{command}_{pipeline}_m{m}_k{k}.json  (+ reliability / coverage CSVs, bound sets)
    report.csv  report.json  f1_vs_k.csv

Nothing written here carries a timestamp, so reruns of the same config are byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from pathlib import Path

import numpy as np

from . import calibration, conformal, memo, store, tensorfile
from .config import PIPELINES, SPLITS, ComponentConfig, RunConfig
from .metrics import confusion, f1_from, fpr_from
from .nn import TrainConfig, TrainResult
from .predictors import (
    Evaluator,
    LatentForecaster,
    MonolithicPredictor,
    Prediction,
    VaeEncoder,
    encode,
    predict_composite_batch,
    predict_composite_image_batch,
    predict_monolithic_batch,
    train_evaluator,
    train_forecaster,
    train_monolithic,
    train_vae,
)
from .sim import SAFE_ANGLE, ControllerParams, PhysicsParams, WindowDataset, build_dataset, concat_trajectories
from .sim import random_rollout

log = logging.getLogger(__name__)

REPORT_FIELDS = (
    "command", "pipeline", "m", "k", "set", "variant", "n", "tp", "fp", "fn", "tn", "f1", "fpr",
    "ece_pre", "ece_post", "brier_pre", "brier_post", "calibrator",
    "coverage_mean", "coverage_std", "bound_mean", "bound_std", "vacuous_bins",
    "config_hash", "artifact_hash",
)
NULL = "null"


class MissingArtifact(RuntimeError):
    """A required upstream file is absent; ``command`` names what produces it."""

    def __init__(self, path: Path, command: str):
        super().__init__(f"missing {path}; run `safechance {command}` first")
        self.path = path
        self.command = command


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _tag(pipeline: str, m: int, k: int) -> str:
    return f"{pipeline}_m{m}_k{k}"


class Run:
    """Paths plus in-process caches for one RunConfig."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.hash = cfg.hash()
        self._arrays: dict = {}
        self._latents: dict = {}
        self._preds: dict = {}

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def models(self) -> Path:
        return self.root / "models"

    @property
    def results(self) -> Path:
        return self.root / "results"

    def physics(self) -> PhysicsParams:
        return PhysicsParams(**self.cfg.physics)

    def controller(self) -> ControllerParams:
        c = dict(self.cfg.controller)
        c["gains"] = tuple(c["gains"])
        return ControllerParams(**c)

    def train_config(self, comp: ComponentConfig, *tag: int) -> TrainConfig:
        return comp.train_config(_seed(self.cfg.seed, *tag))

    # ------------------------------------------------------------- data

    def split_arrays(self, split: str) -> dict:
        if split not in self._arrays:
            d = self.data / split
            if not (self.data / "manifest.json").exists():
                raise MissingArtifact(self.data / "manifest.json", "generate")
            self._arrays[split] = {
                "frames": tensorfile.read(d / "frames.ctsr"),
                "states": tensorfile.read(d / "states.ctsr").astype(np.float64),
                "actions": tensorfile.read(d / "actions.ctsr").astype(np.float64),
            }
        return self._arrays[split]

    def dataset(self, split: str, m: int, k: int) -> WindowDataset:
        path = self.data / split / f"windows_m{m}_k{k}.ctsr"
        if not path.exists():
            raise MissingArtifact(path, "generate")
        a = self.split_arrays(split)
        w = tensorfile.read(path).astype(np.int64)
        return WindowDataset(a["frames"], a["actions"], a["states"], w[:, 0], w[:, 1], m, k, w[:, 2])

    def latents(self, split: str, vae: VaeEncoder) -> np.ndarray:
        key = (split, vae.fingerprint)
        if key not in self._latents:
            self._latents[key] = encode(vae, self.split_arrays(split)["frames"])
        return self._latents[key]


def as_run(cfg: RunConfig | Run) -> Run:
    """Commands accept a Run so a driver can share its caches across steps."""
    return cfg if isinstance(cfg, Run) else Run(cfg)


def _result(cmd: str, pipeline: str, m: int, k: int, **kw) -> dict:
    row = {f: None for f in REPORT_FIELDS}
    row.update(command=cmd, pipeline=pipeline, m=m, k=k)
    row.update(kw)
    return row


def _counts(labels, preds) -> dict:
    c = confusion(labels, preds)
    out = {**c.as_dict(), "n": int(len(labels)), "f1": f1_from(c)}
    out["fpr"] = fpr_from(c) if c.fp + c.tn else None
    return out


# ------------------------------------------------------------------ generate

def cmd_generate(cfg: RunConfig | Run) -> dict:
    """Roll out every split from its own seed range and write frames, states and window files."""
    run = as_run(cfg)
    cfg = run.cfg
    p, cp = run.physics(), run.controller()
    manifest = {"config_hash": run.hash, "splits": {}}
    for split in SPLITS:
        lo, hi = cfg.split_seed_range(split)
        trajs = [random_rollout(s, cfg.max_steps, cp, p) for s in range(lo, hi)]
        frames, actions, states, _ = concat_trajectories(trajs)
        d = run.data / split
        tensorfile.write(d / "frames.ctsr", frames)
        tensorfile.write(d / "states.ctsr", states.astype(np.float32))
        tensorfile.write(d / "actions.ctsr", actions.astype(np.float32))
        windows = {}
        for m in cfg.windows:
            for k in cfg.horizons:
                ds = build_dataset(trajs, m, k)
                arr = np.stack([ds.ends, ds.labels, ds.traj_ids], axis=1).astype(np.float32)
                name = f"windows_m{m}_k{k}.ctsr"
                tensorfile.write(d / name, arr)
                safe = int(ds.labels.sum())
                windows[f"m{m}_k{k}"] = {"file": name, "count": len(ds), "safe": safe, "unsafe": len(ds) - safe}
        manifest["splits"][split] = {
            "seed_range": [lo, hi],
            "lengths": [len(t) for t in trajs],
            "causes": dict(sorted(Counter(t.cause for t in trajs).items())),
            "clamped_frames": int(sum(len(t.clamped) for t in trajs)),
            "frames": int(len(frames)),
            "safe_states": int(np.sum(np.abs(states[:, 2]) <= SAFE_ANGLE)),
            "windows": windows,
        }
        log.info("generated %s: %d trajectories, %d frames", split, len(trajs), len(frames))
    store.write_json(run.data / "manifest.json", manifest)
    return manifest


# --------------------------------------------------------------------- train

def _nn_meta(run: Run, result: TrainResult, **kw) -> dict:
    return {"config_hash": run.hash, "losses": result.losses, "lr_decay_epoch": result.lr_decay_epoch,
            "stop_reason": result.stop_reason, **kw}


def _subsample(n: int, limit: int, seed: int) -> np.ndarray:
    if not limit or limit >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=limit, replace=False))


def load_vae(run: Run) -> VaeEncoder:
    d = run.models / "vae"
    if not (d / "dec" / "net.json").exists():
        raise MissingArtifact(d, "train")
    enc, meta = store.load_net(d / "enc")
    dec, _ = store.load_net(d / "dec")
    return VaeEncoder(enc, dec, meta["latent_dim"], meta["lambda1"], frozen=True)


def ensure_vae(run: Run) -> VaeEncoder:
    try:
        return load_vae(run)
    except MissingArtifact:
        pass
    cfg = run.cfg
    frames = run.split_arrays("train")["frames"]
    idx = _subsample(len(frames), cfg.vae.max_samples, _seed(cfg.seed, 101))
    log.info("training VAE on %d frames", len(idx))
    vae, result = train_vae(frames[idx], run.train_config(cfg.vae, 1), cfg.lambda1, cfg.latent_dim, cfg.vae.hidden)
    store.quantize(vae.enc, vae.dec)
    meta = _nn_meta(run, result, latent_dim=vae.latent_dim, lambda1=vae.lambda1, fingerprint=vae.fingerprint)
    store.save_net(run.models / "vae" / "enc", vae.enc, meta)
    store.save_net(run.models / "vae" / "dec", vae.dec, {"config_hash": run.hash})
    return vae


def _load_dependent(path: Path, fingerprint: str | None):
    """Load a net trained on top of an encoder; None when absent or stale."""
    if not (path / "net.json").exists():
        return None
    net, meta = store.load_net(path)
    if fingerprint is not None and meta.get("encoder_fingerprint") != fingerprint:
        log.info("%s was trained against a different encoder; retraining", path)
        return None
    return net, meta


def _frame_labels(run: Run, split: str, limit: int, seed: int):
    a = run.split_arrays(split)
    idx = _subsample(len(a["frames"]), limit, seed)
    return idx, (np.abs(a["states"][idx, 2]) <= SAFE_ANGLE).astype(np.int64)


def ensure_evaluator(run: Run, kind: str, vae: VaeEncoder | None = None) -> Evaluator:
    """Image evaluator on true frames, or latent evaluator on their encodings; labels from the frame's own state."""
    path = run.models / f"evaluator_{kind}"
    got = _load_dependent(path, vae.fingerprint if kind == "latent" else None)
    if got is not None:
        return Evaluator(got[0], kind)
    cfg = run.cfg
    idx, labels = _frame_labels(run, "train", cfg.evaluator.max_samples, _seed(cfg.seed, 102))
    if kind == "image":
        inputs = run.split_arrays("train")["frames"][idx]
    else:
        inputs = run.latents("train", vae)[idx]
    log.info("training %s evaluator on %d samples", kind, len(idx))
    v, result = train_evaluator(inputs, labels, run.train_config(cfg.evaluator, 2, kind == "image"), kind,
                                cfg.evaluator.hidden)
    store.quantize(v.net)
    extra = {"encoder_fingerprint": vae.fingerprint} if kind == "latent" else {}
    store.save_net(path, v.net, _nn_meta(run, result, **extra))
    return v


def load_evaluator(run: Run, kind: str, vae: VaeEncoder | None = None) -> Evaluator:
    path = run.models / f"evaluator_{kind}"
    got = _load_dependent(path, vae.fingerprint if kind == "latent" else None)
    if got is None:
        raise MissingArtifact(path, "train --pipeline composite" + ("_image" if kind == "image" else ""))
    return Evaluator(got[0], kind)


def ensure_forecaster(run: Run, vae: VaeEncoder, m: int, k: int) -> LatentForecaster:
    path = run.models / f"forecaster_m{m}_k{k}"
    got = _load_dependent(path, vae.fingerprint)
    if got is not None:
        net, meta = got
        return LatentForecaster(net, m, meta["n"], k, vae.latent_dim, vae.fingerprint)
    cfg = run.cfg
    ds = run.dataset("train", m, k)
    log.info("training forecaster m=%d k=%d on %d windows", m, k, len(ds))
    f, result = train_forecaster(vae, ds, run.train_config(cfg.forecaster, 3, m, k), cfg.forecast_window,
                                 cfg.forecaster.hidden, run.latents("train", vae))
    store.quantize(f.net)
    store.save_net(path, f.net, _nn_meta(run, result, n=f.n, encoder_fingerprint=vae.fingerprint))
    return f


def load_forecaster(run: Run, vae: VaeEncoder, m: int, k: int) -> LatentForecaster:
    path = run.models / f"forecaster_m{m}_k{k}"
    got = _load_dependent(path, vae.fingerprint)
    if got is None:
        raise MissingArtifact(path, f"train --pipeline composite --k {k}")
    return LatentForecaster(got[0], m, got[1]["n"], k, vae.latent_dim, vae.fingerprint)


def _mono_fingerprint(run: Run, vae: VaeEncoder | None) -> str | None:
    return vae.fingerprint if run.cfg.monolithic_input == "latent" else None


def ensure_mono(run: Run, vae: VaeEncoder | None, m: int, k: int) -> MonolithicPredictor:
    path = run.models / f"mono_m{m}_k{k}"
    fp = _mono_fingerprint(run, vae)
    got = _load_dependent(path, fp)
    if got is not None:
        return MonolithicPredictor(got[0], m, k, vae if fp else None, fp or "")
    cfg = run.cfg
    ds = run.dataset("train", m, k)
    log.info("training monolithic m=%d k=%d on %d windows", m, k, len(ds))
    latents = run.latents("train", vae) if fp else None
    p, result = train_monolithic(vae if fp else None, ds, run.train_config(cfg.monolithic, 4, m, k),
                                 cfg.monolithic.hidden, latents)
    store.quantize(p.head)
    extra = {"encoder_fingerprint": fp} if fp else {}
    store.save_net(path, p.head, _nn_meta(run, result, input=cfg.monolithic_input, **extra))
    return p


def load_mono(run: Run, m: int, k: int) -> MonolithicPredictor:
    vae = load_vae(run) if run.cfg.monolithic_input == "latent" else None
    path = run.models / f"mono_m{m}_k{k}"
    fp = _mono_fingerprint(run, vae)
    got = _load_dependent(path, fp)
    if got is None:
        raise MissingArtifact(path, f"train --pipeline mono --k {k}")
    return MonolithicPredictor(got[0], m, k, vae, fp or "")


def cmd_train(cfg: RunConfig | Run, pipeline: str, k: int, m: int | None = None) -> list[Path]:
    """Train the pipeline's stages in dependency order; returns the model directories used."""
    if pipeline not in PIPELINES:
        raise ValueError(f"unknown pipeline {pipeline!r}")
    run = as_run(cfg)
    cfg = run.cfg
    m = cfg.windows[0] if m is None else m
    run.dataset("train", m, k)  # fail early on missing data
    needs_vae = pipeline != "mono" or cfg.monolithic_input == "latent"
    vae = ensure_vae(run) if needs_vae else None
    if pipeline == "mono":
        ensure_mono(run, vae, m, k)
        dirs = [run.models / f"mono_m{m}_k{k}"]
    else:
        kind = "latent" if pipeline == "composite" else "image"
        ensure_forecaster(run, vae, m, k)
        ensure_evaluator(run, kind, vae)
        dirs = [run.models / f"forecaster_m{m}_k{k}", run.models / f"evaluator_{kind}"]
    if vae is not None:
        dirs = [run.models / "vae" / "enc", run.models / "vae" / "dec"] + dirs
    return dirs


def _model_dirs(run: Run, pipeline: str, m: int, k: int) -> list[Path]:
    dirs = []
    if pipeline != "mono" or run.cfg.monolithic_input == "latent":
        dirs += [run.models / "vae" / "enc", run.models / "vae" / "dec"]
    if pipeline == "mono":
        dirs.append(run.models / f"mono_m{m}_k{k}")
    else:
        dirs.append(run.models / f"forecaster_m{m}_k{k}")
        dirs.append(run.models / ("evaluator_latent" if pipeline == "composite" else "evaluator_image"))
    return dirs


def artifact_hash(run: Run, pipeline: str, m: int, k: int, extra=()) -> str:
    files = [f for d in _model_dirs(run, pipeline, m, k) for f in store.net_files(d)]
    return store.tree_hash(files + list(extra))


def predict(run: Run, pipeline: str, m: int, k: int, split: str) -> Prediction:
    key = (pipeline, m, k, split)
    if key in run._preds:
        return run._preds[key]
    ds = run.dataset(split, m, k)
    if pipeline == "mono":
        p = load_mono(run, m, k)
        latents = run.latents(split, p.vae) if p.vae is not None else None
        out = predict_monolithic_batch(p, ds, latents=latents)
    else:
        vae = load_vae(run)
        f = load_forecaster(run, vae, m, k)
        if pipeline == "composite":
            out = predict_composite_batch(vae, f, load_evaluator(run, "latent", vae), ds,
                                          latents=run.latents(split, vae))
        else:
            out = predict_composite_image_batch(vae, f, load_evaluator(run, "image"), ds,
                                                latents=run.latents(split, vae))
    run._preds[key] = out
    return out


# ---------------------------------------------------------------------- eval

def stratified_sample(labels, n: int, minority: float, seed: int) -> np.ndarray:
    """Sorted indices with at least ``minority`` of the rows from the unsafe class when available."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    n_neg = min(len(neg), int(math.ceil(n * minority)))
    n_pos = min(len(pos), n - n_neg)
    pick = np.concatenate([rng.choice(neg, n_neg, replace=False), rng.choice(pos, n_pos, replace=False)])
    return np.sort(pick)


def evaluator_sets(run: Run, m: int, k: int):
    """Normal (true future frames) and shifted (decoded forecasts under a contrast change) test sets."""
    cfg = run.cfg
    ds = run.dataset("test", m, k)
    idx = stratified_sample(ds.labels, cfg.memo["samples"], cfg.memo["minority"], _seed(cfg.seed, 7, m, k))
    vae = load_vae(run)
    f = load_forecaster(run, vae, m, k)
    normal = ds.frames[ds.ends[idx] + k].reshape(len(idx), -1) / 255.0
    shift = memo.ShiftConfig(cfg.memo["contrast"], cfg.memo["brightness"])
    shifted, labels = memo.make_shifted_set(vae, f, ds, shift, run.latents("test", vae), idx)
    return normal, shifted, labels


def cmd_eval(cfg: RunConfig | Run, pipeline: str, k: int, adapted: bool = False, m: int | None = None) -> list[dict]:
    """F1/FPR on the test split; with ``adapted`` also raw vs MEMO image-evaluator rows on normal/shifted/mix."""
    run = as_run(cfg)
    cfg = run.cfg
    m = cfg.windows[0] if m is None else m
    pred = predict(run, pipeline, m, k, "test")
    labels = run.dataset("test", m, k).labels
    extra_files = []
    rows = [_result("eval", pipeline, m, k, set="test", variant="raw", **_counts(labels, pred.labels))]
    if adapted:
        v = load_evaluator(run, "image")
        extra_files = store.net_files(run.models / "evaluator_image")
        normal, shifted, y = evaluator_sets(run, m, k)
        acfg = memo.AdaptationConfig(B=cfg.memo["B"], eta=cfg.memo["eta"], seed=cfg.seed)
        raw = {"normal": v.probs(normal).argmax(axis=1), "shifted": v.probs(shifted).argmax(axis=1)}
        alog = memo.AdaptationLog()
        ada = {"normal": memo.predict_adapted_batch(v, normal, acfg, alog, 0)[0],
               "shifted": memo.predict_adapted_batch(v, shifted, acfg, alog, len(normal))[0]}
        skipped = sum(e["event"] == "skip" for e in alog.events)
        if skipped:
            log.warning("MEMO skipped %d samples with non-finite gradients", skipped)
        store.write_text(run.results / f"adaptation_{_tag(pipeline, m, k)}.jsonl",
                         "".join(json.dumps(e, sort_keys=True) + "\n" for e in alog.events))
        for variant, preds in (("raw", raw), ("adapted", ada)):
            sets = {"normal": (y, preds["normal"]), "shifted": (y, preds["shifted"]),
                    "mix": (np.concatenate([y, y]), np.concatenate([preds["normal"], preds["shifted"]]))}
            for name, (yy, pp) in sets.items():
                rows.append(_result("eval", "image_evaluator", m, k, set=name, variant=variant, **_counts(yy, pp)))
    ah = artifact_hash(run, pipeline, m, k, extra_files)
    for r in rows:
        r.update(config_hash=run.hash, artifact_hash=ah)
    store.write_json(run.results / f"eval_{_tag(pipeline, m, k)}.json", {"rows": rows})
    return rows


# ----------------------------------------------------------------- calibrate

def inner_split(traj_ids, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Split window indices by source trajectory into a fitting part and a selection part."""
    traj_ids = np.asarray(traj_ids)
    cut = int(math.ceil((traj_ids.max() + 1) * fraction)) if len(traj_ids) else 0
    return np.flatnonzero(traj_ids < cut), np.flatnonzero(traj_ids >= cut)


def _calibrator_path(run: Run, pipeline: str, m: int, k: int) -> Path:
    return run.models / f"calibrator_{_tag(pipeline, m, k)}.json"


def cmd_calibrate(cfg: RunConfig | Run, pipeline: str, k: int, m: int | None = None) -> dict:
    """Select the min-ECE calibrator on a held-out half of Z_cal, refit it on all of Z_cal, score Z_te."""
    run = as_run(cfg)
    cfg = run.cfg
    m = cfg.windows[0] if m is None else m
    Q = cfg.calibration["Q"]
    cal = predict(run, pipeline, m, k, "calibration")
    cal_ds = run.dataset("calibration", m, k)
    te = predict(run, pipeline, m, k, "test")
    te_y = run.dataset("test", m, k).labels
    fit_i, sel_i = inner_split(cal_ds.traj_ids, cfg.calibration["inner_split"])
    kinds = cfg.calibration["kinds"]
    s, y, z = cal.scores, cal_ds.labels, cal.logits
    try:
        sel = calibration.select_best(kinds, s[fit_i], y[fit_i], Q, z[fit_i], s[sel_i], y[sel_i])
    except ValueError as exc:
        log.warning("inner split unusable (%s); selecting on all of the calibration split", exc)
        sel = calibration.select_best(kinds, s, y, Q, z)
    best = calibration.fit(sel.best.kind, s, y, Q, z)
    store.write_text(_calibrator_path(run, pipeline, m, k), best.to_json() + "\n")
    post = calibration.apply(best, te.scores)
    tag = _tag(pipeline, m, k)
    pre_bins = calibration.reliability_bins(te.scores, te_y, Q)
    post_bins = calibration.reliability_bins(post, te_y, Q)
    store.write_text(run.results / f"reliability_{tag}_pre.csv", pre_bins.to_csv())
    store.write_text(run.results / f"reliability_{tag}_post.csv", post_bins.to_csv())
    ah = artifact_hash(run, pipeline, m, k, [_calibrator_path(run, pipeline, m, k)])
    # labels stay the predictor's argmax; calibration only remaps the chance
    row = _result("calibrate", pipeline, m, k, set="test", variant="calibrated", **_counts(te_y, te.labels),
                  ece_pre=pre_bins.ece(), ece_post=post_bins.ece(), brier_pre=calibration.brier(te.scores, te_y),
                  brier_post=calibration.brier(post, te_y), calibrator=best.kind,
                  config_hash=run.hash, artifact_hash=ah)
    out = {"rows": [row], "selection_ece": sel.ece, "errors": sel.errors, "calibrator": best.to_json()}
    store.write_json(run.results / f"calibrate_{tag}.json", out)
    return out


def load_calibrator(run: Run, pipeline: str, m: int, k: int) -> calibration.FittedCalibrator:
    path = _calibrator_path(run, pipeline, m, k)
    if not path.exists():
        raise MissingArtifact(path, f"calibrate --pipeline {pipeline} --k {k}")
    return calibration.FittedCalibrator.from_json(path.read_text())


# ----------------------------------------------------------------- conformal

def cmd_conformal(cfg: RunConfig | Run, pipeline: str, k: int, m: int | None = None) -> dict:
    """Bin calibrated Z_val chances, bound each bin's error, and measure coverage on Z_te."""
    run = as_run(cfg)
    cfg = run.cfg
    m = cfg.windows[0] if m is None else m
    c = load_calibrator(run, pipeline, m, k)
    cc = cfg.conformal
    val_s = calibration.apply(c, predict(run, pipeline, m, k, "validation").scores)
    val_y = run.dataset("validation", m, k).labels
    te_s = calibration.apply(c, predict(run, pipeline, m, k, "test").scores)
    te_y = run.dataset("test", m, k).labels
    rcfg = conformal.ResampleConfig(cc["M"], cc["N"], cc["alpha"], cfg.seed)
    bset = conformal.bounds_for_all_bins(conformal.adaptive_bin(val_s, val_y, cc["Q"]), rcfg,
                                         conformal.data_hash(val_s, val_y))
    tag = _tag(pipeline, m, k)
    bound_path = run.results / f"bounds_{tag}.json"
    store.write_text(bound_path, bset.to_json() + "\n")
    rep = conformal.coverage_eval(bset, te_s, te_y, cc["trials"])
    store.write_text(run.results / f"coverage_{tag}.csv", rep.to_csv())
    ah = artifact_hash(run, pipeline, m, k, [_calibrator_path(run, pipeline, m, k), bound_path])
    row = _result("conformal", pipeline, m, k, set="test", variant="calibrated", n=int(len(te_y)),
                  coverage_mean=rep.mean, coverage_std=rep.std, bound_mean=float(np.mean(bset.bounds)),
                  bound_std=float(np.std(bset.bounds)), vacuous_bins=int(sum(bset.vacuous)),
                  config_hash=run.hash, artifact_hash=ah)
    out = {"rows": [row], "flagged_bins": rep.flagged, "per_bin_coverage": rep.per_bin}
    store.write_json(run.results / f"conformal_{tag}.json", out)
    return out


# -------------------------------------------------------------------- report

def _cell(v) -> str:
    if v is None:
        return NULL
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(r.get(h)) for h in header])
    return buf.getvalue()


def collect_rows(results: Path) -> list[dict]:
    rows = []
    for path in sorted(results.glob("*.json")) if results.exists() else []:
        d = store.read_json(path)
        if isinstance(d, dict) and "rows" in d:
            rows += d["rows"]
    return rows


def cmd_report(cfg: RunConfig | Run) -> list[dict]:
    """Join every command's rows and emit the horizon-vs-F1 series; absent cells are written as null."""
    run = as_run(cfg)
    cfg = run.cfg
    rows = collect_rows(run.results)
    store.write_text(run.root / "report.csv", _csv(REPORT_FIELDS, rows))
    store.write_json(run.root / "report.json", {"config_hash": run.hash, "rows": rows})
    series = []
    for pipeline in PIPELINES:
        for m in cfg.windows:
            for k in cfg.horizons:
                hit = [r for r in rows if r["command"] == "eval" and r["pipeline"] == pipeline and r["m"] == m
                       and r["k"] == k and r["set"] == "test" and r["variant"] == "raw"]
                r = hit[0] if hit else {}
                series.append({"pipeline": pipeline, "m": m, "k": k, "f1": r.get("f1"), "fpr": r.get("fpr")})
    store.write_text(run.root / "f1_vs_k.csv", _csv(("pipeline", "m", "k", "f1", "fpr"), series))
    return rows


def cmd_all(cfg: RunConfig | Run) -> list[dict]:
    run = as_run(cfg)
    cfg = run.cfg
    cmd_generate(run)
    for m in cfg.windows:
        for k in cfg.horizons:
            for pipeline in PIPELINES:
                cmd_train(run, pipeline, k, m)
                cmd_eval(run, pipeline, k, adapted=pipeline == "composite_image", m=m)
                cmd_calibrate(run, pipeline, k, m)
                cmd_conformal(run, pipeline, k, m)
    return cmd_report(run)
