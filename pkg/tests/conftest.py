"""Shared fixtures: small compiled synthetic corpora and the trained overfit run."""

from __future__ import annotations

import time
from pathlib import Path

import pytest

from radarseg4d.dataset import CompiledDataset, DatasetConfig, compile_dataset
from radarseg4d.network import NetworkConfig
from radarseg4d.synthetic import SynthConfig, write_synthetic_raw
from radarseg4d.trainer import Hyperparams, train

# Acceptance outcomes, printed at the end of the session.
ACCEPTANCE: list[tuple[int, str, bool, str]] = []

# Overfit fixture: ten frames in one sequence, 1-3 fully visible persons.
OVERFIT_SYNTH = SynthConfig(seed=1, frames=10, frames_per_sequence=10, persons=(1, 3),
                            visible_fraction=(1.0, 1.0))
OVERFIT_HP = Hyperparams(learning_rate=3e-3, batch_size=2, augment=False, epochs=200,
                         lr_step_epochs=20, val_split="train", seed=0)


def build_dataset(root: Path, synth: SynthConfig, ratios=(0.7, 0.15, 0.15)) -> CompiledDataset:
    write_synthetic_raw(synth, root / "raw")
    compile_dataset(root / "raw", root / "ds", DatasetConfig(split_ratios=ratios, synth=synth.to_dict()))
    return CompiledDataset(root / "ds")


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> CompiledDataset:
    """60 frames in six sequences with the default scene statistics."""
    return build_dataset(tmp_path_factory.mktemp("small"), SynthConfig(seed=7, frames=60))


@pytest.fixture(scope="session")
def overfit_dataset(tmp_path_factory) -> CompiledDataset:
    return build_dataset(tmp_path_factory.mktemp("overfit"), OVERFIT_SYNTH, ratios=(1.0, 0.0, 0.0))


@pytest.fixture(scope="session")
def overfit_run(overfit_dataset, tmp_path_factory):
    """Tiny network trained on the overfit fixture; returns (result, seconds)."""
    out = tmp_path_factory.mktemp("overfit_run")
    t0 = time.perf_counter()
    result = train(overfit_dataset, NetworkConfig.tiny(), OVERFIT_HP, out)
    return result, time.perf_counter() - t0


@pytest.fixture
def acceptance():
    """Record one criterion outcome: ``acceptance(n, name, ok, detail)``."""

    def record(n: int, name: str, ok: bool, detail: str = "") -> bool:
        ACCEPTANCE.append((n, name, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n:2d}. {name}  {detail}")
