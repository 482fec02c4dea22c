"""Full CLI pipeline run with relative paths, for determinism checks."""

import os
import subprocess
import sys
from pathlib import Path

from m4gn.cli import run

STEPS = [
    ["gen", "--case", "beam", "--length-cells", "8", "--T", "6", "--count", "2", "--seed", "7", "--out", "data"],
    ["modal", "--mesh", "data/case_000", "--modes", "4", "--out", "modal"],
    ["segment", "--mesh", "data/case_000", "--modal", "modal/modal.json", "--k", "4",
     "--variant", "mdod_e", "--tau", "0.5", "--out", "seg"],
    ["train", "--data", "data", "--segmentation", "seg/segmentation.json", "--steps", "15",
     "--d", "8", "--L", "2", "--L-S", "1", "--heads", "2", "--noise", "0.001", "--val-count", "1",
     "--seed", "7", "--out", "train"],
    ["rollout", "--checkpoint", "train/checkpoint", "--case", "data/case_001",
     "--segmentation", "seg/segmentation.json", "--out", "roll"],
    ["metrics", "--case", "data/case_001", "--pred", "roll/rollout.json",
     "--segmentation", "seg/segmentation.json", "--out", "met"],
    ["metrics", "--oracle", "--oracle-cases", "3", "--seed", "7", "--out", "oracle"],
    ["report", "--case", "data/case_001", "--segmentation", "seg/segmentation.json",
     "--metrics", "met/metrics.json", "--out", "rep"],
]


def run_pipeline(workdir: Path, subprocess_mode: bool = False) -> list[int]:
    """Run every step inside ``workdir``; returns the exit codes."""
    workdir.mkdir(parents=True, exist_ok=True)
    codes = []
    if subprocess_mode:
        for argv in STEPS:
            proc = subprocess.run([sys.executable, "-m", "m4gn.cli", *argv], cwd=workdir,
                                  capture_output=True, text=True)
            codes.append(proc.returncode)
        return codes
    old = os.getcwd()
    os.chdir(workdir)
    try:
        for argv in STEPS:
            codes.append(run(list(argv)))
    finally:
        os.chdir(old)
    return codes


def snapshot(workdir: Path) -> dict:
    return {str(p.relative_to(workdir)): p.read_bytes()
            for p in sorted(workdir.rglob("*")) if p.is_file()}
