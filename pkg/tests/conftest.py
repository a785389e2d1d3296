"""Shared fixtures.

The acceptance suite checks end-to-end behavior on one benchmark run at the
default desk scale (8 classes x 20 samples, 256 channels, 10 wavelet scales,
chains with k in {2, 4}, 500 mixtures per mixing model at 50 dB).  That run
takes a couple of minutes, so it is built once per session and shared; unit
test runs that never request it pay nothing.
"""

import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from endmix.config import RunConfig
from endmix.pipeline import (
    DetectResult,
    EvaluateResult,
    SimulateResult,
    TrainResult,
    run_detect,
    run_evaluate,
    run_simulate,
    run_train,
)


@dataclass
class DeskRun:
    cfg: RunConfig
    sim: SimulateResult
    train: TrainResult
    detect: DetectResult
    evaluation: EvaluateResult
    train_seconds: float
    total_seconds: float
    out_dir: Path


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory) -> DeskRun:
    out = tmp_path_factory.mktemp("desk")
    cfg = RunConfig(out_dir=str(out))
    t0 = time.perf_counter()
    sim = run_simulate(cfg)
    t1 = time.perf_counter()
    train = run_train(cfg, sim.train)
    t2 = time.perf_counter()
    detect = run_detect(cfg, train.banks_by_k, sim.datasets, sim.train)
    evaluation = run_evaluate(cfg, detect, sim.ns_records)
    t3 = time.perf_counter()
    return DeskRun(
        cfg=cfg,
        sim=sim,
        train=train,
        detect=detect,
        evaluation=evaluation,
        train_seconds=t2 - t1,
        total_seconds=t3 - t0,
        out_dir=out,
    )
