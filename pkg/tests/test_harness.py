from __future__ import annotations

import csv
import dataclasses
import json

import numpy as np
import pytest

from safechance import cli, config, harness, store, tensorfile
from safechance.config import SPLITS


def tiny_config(out, **kw) -> config.RunConfig:
    small = dict(hidden=16, max_epochs=2, batch_size=64, max_samples=2000)
    d = {
        "trajectories": {s: 10 for s in SPLITS},
        "max_steps": 60,
        "windows": [4],
        "horizons": [3, 6],
        "latent_dim": 4,
        "vae": small, "forecaster": small, "monolithic": small, "evaluator": small,
        "memo": {"B": 2, "samples": 20},
        "calibration": {"Q": 5},
        "conformal": {"Q": 3, "M": 40, "N": 10, "trials": 50},
        "out": str(out),
    }
    d.update(kw)
    return config.from_dict(d)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    cfg = tiny_config(tmp_path_factory.mktemp("full"))
    rows = harness.cmd_all(cfg)
    return cfg, rows


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_deterministic_bytes(tmp_path):
    a, b = tiny_config(tmp_path / "a"), tiny_config(tmp_path / "b")
    harness.cmd_generate(a)
    harness.cmd_generate(b)
    fa, fb = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert fa.keys() == fb.keys() and fa == fb


def test_manifest_recount(full_run):
    cfg, _ = full_run
    run = harness.Run(cfg)
    man = store.read_json(run.data / "manifest.json")
    assert man["config_hash"] == cfg.hash()
    for split in SPLITS:
        info = man["splits"][split]
        for key, w in info["windows"].items():
            arr = tensorfile.read(run.data / split / w["file"])
            assert len(arr) == w["count"]
            assert int(arr[:, 1].sum()) == w["safe"]
        states = tensorfile.read(run.data / split / "states.ctsr")
        assert len(states) == info["frames"] == sum(info["lengths"])


def test_split_seed_ranges_disjoint(full_run):
    cfg, _ = full_run
    man = store.read_json(harness.Run(cfg).data / "manifest.json")
    seeds = [set(range(*man["splits"][s]["seed_range"])) for s in SPLITS]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not seeds[i] & seeds[j]
    assert sum(map(len, seeds)) == 40


def test_seed_ranges_disjoint_across_config_seeds():
    a, b = config.RunConfig(seed=0), config.RunConfig(seed=1)
    ranges = [range(*c.split_seed_range(s)) for c in (a, b) for s in SPLITS]
    assert len(set().union(*map(set, ranges))) == sum(map(len, ranges))


def test_cli_missing_artifact_exit_3(tmp_path, capsys):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"trajectories": {s: 2 for s in SPLITS}}))
    code = cli.main(["train", "--pipeline", "mono", "--k", "5", "--config", str(cfg_path),
                     "--out", str(tmp_path / "run")])
    assert code == 3
    assert "safechance generate" in capsys.readouterr().err


def test_cli_config_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"horizons": [0]}))
    assert cli.main(["generate", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert cli.main(["generate", "--config", str(bad)]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_generate_with_seed_override(tmp_path, capsys):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"trajectories": {s: 2 for s in SPLITS}, "max_steps": 20, "horizons": [3]}))
    assert cli.main(["generate", "--config", str(cfg_path), "--seed", "2", "--out", str(tmp_path / "r")]) == 0
    ranges = json.loads(capsys.readouterr().out)
    assert ranges["train"] == [20_000_000, 20_000_002]


def test_empty_report_has_header(tmp_path):
    rows = harness.cmd_report(tiny_config(tmp_path))
    assert rows == []
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines == [",".join(harness.REPORT_FIELDS)]
    series = list(csv.DictReader(open(tmp_path / "f1_vs_k.csv")))
    assert len(series) == 3 * 2 and all(r["f1"] == "null" for r in series)


def test_report_row_count_is_sum_of_commands(full_run):
    cfg, rows = full_run
    results = harness.Run(cfg).results
    per_cmd = sum(len(store.read_json(p)["rows"]) for cmd in ("eval", "calibrate", "conformal")
                  for p in results.glob(f"{cmd}_*.json"))
    assert len(rows) == per_cmd
    with open(harness.Run(cfg).root / "report.csv") as fh:
        assert len(list(csv.DictReader(fh))) == per_cmd
    assert all(r["config_hash"] == cfg.hash() and r["artifact_hash"] for r in rows)


def test_f1_vs_k_shape(full_run):
    cfg, _ = full_run
    with open(harness.Run(cfg).root / "f1_vs_k.csv") as fh:
        series = list(csv.DictReader(fh))
    assert [(r["pipeline"], r["k"]) for r in series] == [(p, str(k)) for p in config.PIPELINES for k in (3, 6)]
    assert all(r["f1"] != "null" for r in series)


def test_rates_in_unit_interval(full_run):
    _, rows = full_run
    for r in rows:
        for key in ("f1", "fpr", "ece_pre", "ece_post", "brier_pre", "brier_post", "coverage_mean", "bound_mean"):
            if r[key] is not None:
                assert 0.0 <= r[key] <= 1.0, (key, r)


def test_mix_set_is_concatenation(full_run):
    _, rows = full_run
    memo_rows = [r for r in rows if r["pipeline"] == "image_evaluator"]
    assert memo_rows
    for k in (3, 6):
        for variant in ("raw", "adapted"):
            got = {r["set"]: r for r in memo_rows if r["k"] == k and r["variant"] == variant}
            assert got["mix"]["n"] == got["normal"]["n"] + got["shifted"]["n"]
            assert got["normal"]["n"] == got["shifted"]["n"]
            for c in ("tp", "fp", "fn", "tn"):
                assert got["mix"][c] == got["normal"][c] + got["shifted"][c]


def test_reliability_counts_and_f1_unchanged(full_run):
    cfg, rows = full_run
    run = harness.Run(cfg)
    for pipeline in config.PIPELINES:
        tag = f"{pipeline}_m4_k6"
        n_test = len(run.dataset("test", 4, 6))
        for part in ("pre", "post"):
            with open(run.results / f"reliability_{tag}_{part}.csv") as fh:
                assert sum(int(r["count"]) for r in csv.DictReader(fh)) == n_test
        ev = next(r for r in rows if r["command"] == "eval" and r["pipeline"] == pipeline and r["k"] == 6)
        cal = next(r for r in rows if r["command"] == "calibrate" and r["pipeline"] == pipeline and r["k"] == 6)
        assert ev["f1"] == cal["f1"]


def test_conformal_bound_file_deterministic(full_run):
    cfg, _ = full_run
    run = harness.Run(cfg)
    path = run.results / "bounds_mono_m4_k3.json"
    before = path.read_bytes()
    harness.cmd_conformal(cfg, "mono", 3)
    assert path.read_bytes() == before


def test_calibrator_and_bounds_round_trip(full_run):
    cfg, _ = full_run
    from safechance import calibration, conformal

    run = harness.Run(cfg)
    for path in run.models.glob("calibrator_*.json"):
        text = path.read_text()
        assert calibration.FittedCalibrator.from_json(text).to_json() + "\n" == text
    for path in run.results.glob("bounds_*.json"):
        text = path.read_text()
        assert conformal.ConformalBoundSet.from_json(text).to_json() + "\n" == text


def test_composite_trains_vae_first_and_is_reproducible(tmp_path):
    hashes = []
    for name in ("a", "b"):
        cfg = tiny_config(tmp_path / name, horizons=[3])
        harness.cmd_generate(cfg)
        assert not (tmp_path / name / "models" / "vae").exists()
        harness.cmd_train(cfg, "composite", 3)
        models = tmp_path / name / "models"
        assert (models / "vae" / "enc" / "net.json").exists()
        hashes.append(store.tree_hash(p for p in models.rglob("*") if p.is_file()))
    assert hashes[0] == hashes[1]


def test_eval_before_train_names_command(tmp_path):
    cfg = tiny_config(tmp_path, horizons=[3])
    harness.cmd_generate(cfg)
    with pytest.raises(harness.MissingArtifact, match="safechance train"):
        harness.cmd_eval(cfg, "mono", 3)


def test_stratified_sample_minority():
    labels = np.array([1] * 95 + [0] * 5)
    idx = harness.stratified_sample(labels, 20, 0.3, 0)
    assert np.sum(labels[idx] == 0) == 5 and len(idx) == 20
    idx = harness.stratified_sample(np.array([1] * 50 + [0] * 50), 20, 0.3, 0)
    assert np.sum(np.array([1] * 50 + [0] * 50)[idx] == 0) == 6


def test_inner_split_by_trajectory():
    traj = np.array([0, 0, 1, 1, 2, 3, 3])
    fit, sel = harness.inner_split(traj, 0.5)
    assert set(traj[fit]).isdisjoint(traj[sel])
    assert sorted(np.concatenate([fit, sel])) == list(range(7))


def test_config_hash_ignores_out():
    a = config.RunConfig(out="x")
    assert a.hash() == dataclasses.replace(a, out="y").hash()
    assert a.hash() != dataclasses.replace(a, seed=1).hash()
