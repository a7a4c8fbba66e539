import numpy as np
import pytest

from flare import datagen, trainer

TINY_KW = dict(
    batch_size=4,
    d_model=32,
    n_heads=2,
    n_fusion_blocks=1,
    n_qformer_blocks=1,
    n_queries=3,
    n_future_tokens=3,
    n_dit_blocks=2,
    l_tap=1,
    horizon=8,
    k_steps=2,
)


def tiny_cfg(**overrides) -> trainer.TrainConfig:
    kw = dict(TINY_KW)
    kw.update(overrides)
    return trainer.TrainConfig(**kw)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small labeled dataset: 2 tasks x 3 demos."""
    path = str(tmp_path_factory.mktemp("data") / "tiny.npz")
    suite = datagen.make_task_suite(2, seed=0)
    datagen.generate_dataset(suite, 3, False, seed=1, out_path=path)
    return path


@pytest.fixture(scope="session")
def tiny_af_dataset(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("data_af") / "tiny_af.npz")
    suite = datagen.make_task_suite(2, seed=0)
    datagen.generate_dataset(suite, 3, True, seed=2, out_path=path)
    return path


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_dataset):
    """A short training run with two checkpoints, shared across tests."""
    out = str(tmp_path_factory.mktemp("run") / "out")
    cfg = tiny_cfg(steps=6, checkpoint_every=3)
    result = trainer.fit(cfg, tiny_dataset, out)
    return {"cfg": cfg, "out": out, "result": result, "data": tiny_dataset}


# ------------------------------------------------- acceptance summary --

ACCEPTANCE_LABELS = [
    "flow identities",
    "timestep distribution",
    "gradient correctness",
    "tap locality",
    "ema contract",
    "reduction to baseline",
    "multitask gain",
    "action-free transfer",
    "protocol fidelity",
    "determinism",
]

_acceptance_lines: dict[str, str] = {}


def record_acceptance(label: str, ok: bool, detail: str) -> None:
    """Store one pass/fail line; printed as a block after the test run."""
    assert label in ACCEPTANCE_LABELS, label
    _acceptance_lines[label] = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for i, label in enumerate(ACCEPTANCE_LABELS, start=1):
        line = _acceptance_lines.get(label, f"FAIL  {label}: no result recorded")
        terminalreporter.write_line(f"{i:2d}. {line}")
