from __future__ import annotations

import json
import os
import resource
import subprocess
import sys
from pathlib import Path

import pytest

SEEDS = (0, 1, 2)
ACCEPTANCE_LINES: list[str] = []


def _child_cpu() -> float:
    r = resource.getrusage(resource.RUSAGE_CHILDREN)
    return r.ru_utime + r.ru_stime


def _full_run(out: Path, seed: int) -> dict:
    """Run the default pipeline in a fresh interpreter; reuse a finished run directory."""
    timing = out / "timing.json"
    if timing.exists():
        return json.loads(timing.read_text())
    before = _child_cpu()
    subprocess.run([sys.executable, "-m", "safechance", "all", "--seed", str(seed), "--out", str(out)],
                   check=True)
    info = {"seed": seed, "cpu_seconds": _child_cpu() - before}
    timing.write_text(json.dumps(info))
    return info


@pytest.fixture(scope="session")
def reference_runs(tmp_path_factory):
    """Default-config runs for three seeds plus a second run of seed 0.

    Set SAFECHANCE_RUN_CACHE to a directory to keep the runs between sessions.
    """
    cache = os.environ.get("SAFECHANCE_RUN_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("reference")
    out = {seed: (root / f"seed{seed}", _full_run(root / f"seed{seed}", seed)) for seed in SEEDS}
    out["rerun"] = (root / "seed0_rerun", _full_run(root / "seed0_rerun", 0))
    return out


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
