#!/usr/bin/env python3
"""Smoke tests for the fifo-desk command line.

Run this script to verify the whole pipeline works end-to-end at micro
scale: gen-data, train, eval, analyze and grad-check, through the actual
CLI interface rather than unit test fixtures.
"""

import csv
import os
import subprocess
import sys
import tempfile
from pathlib import Path

SCRIPT_DIR = Path(__file__).parent
PROJECT_ROOT = SCRIPT_DIR.parent
SRC_DIR = PROJECT_ROOT / "src"

MICRO_CONFIG = """\
master_seed: 11
image_size: 16
num_classes: 4
train_cw: 4
train_rf: 4
eval_cw: 3
eval_rf: 3
width_base: 8
factor_dim: 8
batch_per_domain: 2
pretrain_iters: 2
warmup_iters: 1
total_iters: 3
checkpoint_interval: 2
log_every: 1
content_filter_iters: 2
independence_k: 5
log_level: WARNING
"""


def run_cli(workdir: Path, *args: str) -> subprocess.CompletedProcess[str]:
    """Run fifo-desk with the micro config in workdir."""
    env = {"PYTHONPATH": str(SRC_DIR), "FIFO_DESK_DATASET_ROOT": str(workdir / "data")}
    return subprocess.run(
        [sys.executable, "-m", "fifo_desk", "--config", str(workdir / "config.yaml"), *args],
        capture_output=True,
        text=True,
        env={**os.environ, **env},
        cwd=PROJECT_ROOT,
    )


def expect_ok(result: subprocess.CompletedProcess[str]) -> str:
    if result.returncode != 0:
        print(f"STDERR: {result.stderr}")
        raise RuntimeError(f"Command failed with code {result.returncode}")
    return result.stdout


def test_gen_data(workdir: Path) -> None:
    print("Testing gen-data...", end=" ")
    out = expect_ok(run_cli(workdir, "gen-data"))
    assert "Wrote 18 samples" in out, out
    assert (workdir / "data" / "manifest.csv").exists()
    print("PASSED")


def test_train(workdir: Path) -> None:
    print("Testing train...", end=" ")
    expect_ok(run_cli(workdir, "train", "--out", str(workdir / "run")))
    for name in ("pretrained", "warmup", "final"):
        assert (workdir / "run" / name / "network.csv").exists(), name
    with open(workdir / "run" / "train_log.csv", newline="") as f:
        phases = [row["phase"] for row in csv.DictReader(f)]
    assert phases == ["pretrain", "pretrain", "warmup", "fifo", "fifo"], phases
    print("PASSED")


def test_eval(workdir: Path) -> None:
    print("Testing eval...", end=" ")
    out = expect_ok(run_cli(workdir, "eval", "--checkpoint", str(workdir / "run" / "final")))
    assert "eval CW mIoU" in out, out
    assert (workdir / "run" / "final" / "eval_eval.csv").exists()
    print("PASSED")


def test_analyze(workdir: Path) -> None:
    print("Testing analyze...", end=" ")
    run = workdir / "run"
    expect_ok(
        run_cli(
            workdir,
            "analyze",
            "--checkpoint",
            str(run / "final"),
            "--baseline",
            str(run / "pretrained"),
        )
    )
    with open(run / "final" / "analysis.csv", newline="") as f:
        run_ids = {row["run_id"] for row in csv.DictReader(f)}
    assert run_ids == {"checkpoint", "baseline", "delta"}, run_ids
    print("PASSED")


def test_grad_check(workdir: Path) -> None:
    print("Testing grad-check...", end=" ")
    out = expect_ok(run_cli(workdir, "grad-check"))
    assert "cases passed" in out, out
    print("PASSED")


def test_missing_dataset_exit_code(workdir: Path) -> None:
    print("Testing missing dataset exit code...", end=" ")
    result = run_cli(
        workdir,
        "eval",
        "--checkpoint",
        str(workdir / "run" / "final"),
        "--data",
        str(workdir / "nowhere"),
    )
    assert result.returncode == 3, result.returncode
    print("PASSED")


def main() -> int:
    print("=" * 60)
    print("fifo-desk CLI Smoke Tests")
    print("=" * 60)
    print()

    tests = [
        test_gen_data,
        test_train,
        test_eval,
        test_analyze,
        test_grad_check,
        test_missing_dataset_exit_code,
    ]

    passed = 0
    failed = 0

    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(tmp)
        (workdir / "config.yaml").write_text(MICRO_CONFIG)
        for test in tests:
            try:
                test(workdir)
                passed += 1
            except Exception as e:
                print(f"FAILED: {e}")
                failed += 1

    print()
    print("=" * 60)
    print(f"Results: {passed} passed, {failed} failed")
    print("=" * 60)

    return 0 if failed == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
