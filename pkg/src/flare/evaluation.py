"""Checkpoint evaluation protocol and ablation sweeps.

Every checkpoint is rolled out for a fixed number of episodes per task;
the reported score of a run is the maximum mean success over the final
few checkpoints (latest wins ties). Episode initial states derive from
(seed, task, episode) alone, so every checkpoint and every ablation cell
sees the same evaluation worlds.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
from dataclasses import dataclass

import numpy as np

from . import model, trainer
from .datagen import TaskSpec, WorldConfig, rollout, sample_initial_state


@dataclass
class CheckpointEval:
    step: int
    path: str
    per_task: dict[int, float]
    mean_success: float


@dataclass
class EvalReport:
    checkpoints: list[CheckpointEval]
    episodes_per_task: int
    seed: int
    last_k: int
    selected_step: int
    selected_score: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def select_score(evals: list[CheckpointEval], last_k: int) -> tuple[int, float]:
    """Max mean success over the last ``last_k`` checkpoints by step; ties
    resolve to the latest step."""
    if not evals:
        raise ValueError("no checkpoint evaluations to select from")
    tail = sorted(evals, key=lambda e: e.step)[-last_k:]
    best = tail[0]
    for e in tail[1:]:
        if e.mean_success >= best.mean_success:
            best = e
    return best.step, best.mean_success


def episode_seed(seed: int, task_id: int, episode: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, task_id, episode, 11])


def policy_seed(seed: int, task_id: int, episode: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, task_id, episode, 13])


def evaluate_policy(
    policy_factory,
    suite: list[TaskSpec],
    episodes_per_task: int,
    seed: int,
    world: WorldConfig,
) -> dict[int, float]:
    """Success rate per task for ``policy_factory(task, rng_seed) -> policy_fn``."""
    per_task: dict[int, float] = {}
    for task in suite:
        wins = 0
        for e in range(episodes_per_task):
            init_rng = np.random.default_rng(episode_seed(seed, task.task_id, e))
            init = sample_initial_state(task, init_rng, world)
            policy_fn = policy_factory(task, policy_seed(seed, task.task_id, e))
            reset = getattr(policy_fn, "reset", None)
            if reset is not None:  # stateful policies (e.g. the expert) re-anchor per episode
                reset(init)
            _ep, ok = rollout(policy_fn, task, init, max_steps=world.episode_horizon, cfg=world)
            wins += int(ok)
        per_task[task.task_id] = wins / episodes_per_task
    return per_task


def _checkpoint_step(path: str) -> int:
    m = re.search(r"ckpt_(\d+)\.npz$", os.path.basename(path))
    if not m:
        raise ValueError(f"not a checkpoint filename: {path}")
    return int(m.group(1))


def list_checkpoints(ckpt_dir: str) -> list[str]:
    names = sorted(f for f in os.listdir(ckpt_dir) if re.fullmatch(r"ckpt_\d+\.npz", f))
    if not names:
        raise ValueError(f"no checkpoints found in {ckpt_dir}")
    return [os.path.join(ckpt_dir, f) for f in names]


def evaluate(
    ckpt_paths: list[str],
    suite: list[TaskSpec],
    episodes_per_task: int,
    seed: int,
    last_k: int = 5,
) -> EvalReport:
    """Roll out every checkpoint on the suite and select the final score."""
    if episodes_per_task < 1:
        raise ValueError("episodes_per_task must be >= 1")
    evals = []
    for path in sorted(ckpt_paths, key=_checkpoint_step):
        params, mc, fc, world, _meta = trainer.restore_policy(path)
        for task in suite:
            if task.tokens.max() >= mc.vocab_size:
                raise ValueError("suite instruction tokens exceed checkpoint vocabulary")

        def factory(task, rng_seed, _params=params):
            return model.make_policy_fn(_params, mc, fc, world.action_clip, rng_seed)

        per_task = evaluate_policy(factory, suite, episodes_per_task, seed, world)
        mean = float(np.mean(list(per_task.values())))
        evals.append(CheckpointEval(_checkpoint_step(path), path, per_task, mean))
    step, score = select_score(evals, last_k)
    return EvalReport(evals, episodes_per_task, seed, last_k, step, score)


# -------------------------------------------------------------- ablation --

_ABLATION_AXES = {
    "lambda": ("lam", float),
    "L_tap": ("l_tap", int),
    "ema_rho": ("ema_rho", float),
    "target_embedding": ("target_embedding", str),
}


@dataclass
class AblationGrid:
    axis: str
    values: list
    selected_scores: list[float]
    reports: list[EvalReport]

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "values": self.values,
            "selected_scores": self.selected_scores,
            "reports": [r.to_dict() for r in self.reports],
        }


def ablate(
    axis: str,
    values: list,
    base_cfg: trainer.TrainConfig,
    data_path: str,
    out_dir: str,
    episodes_per_task: int,
    seed: int,
    action_free_path: str | None = None,
    last_k: int = 5,
) -> AblationGrid:
    """Train and evaluate one run per value of a single swept field."""
    if axis not in _ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(_ABLATION_AXES)}")
    if not values:
        raise ValueError("no ablation values given")
    field_name, cast = _ABLATION_AXES[axis]
    from .datagen import load_dataset

    suite = load_dataset(data_path).suite()
    reports = []
    scores = []
    for raw in values:
        value = cast(raw)
        cfg = dataclasses.replace(base_cfg, **{field_name: value})
        cell_dir = os.path.join(out_dir, f"{axis}_{value}")
        result = trainer.fit(cfg, data_path, cell_dir, action_free_path=action_free_path)
        report = evaluate(result["checkpoints"], suite, episodes_per_task, seed, last_k)
        reports.append(report)
        scores.append(report.selected_score)
    grid = AblationGrid(axis, [cast(v) for v in values], scores, reports)
    with open(os.path.join(out_dir, f"ablation_{axis}.json"), "w") as f:
        json.dump(grid.to_dict(), f, indent=2, sort_keys=True)
    return grid


# ----------------------------------------------------------------- plots --


def emit_plots(reports: dict[str, EvalReport], out_dir: str, grid: AblationGrid | None = None) -> list[str]:
    """Success-vs-step curves for named runs, plus an optional ablation
    summary. Refuses to plot nothing."""
    if not reports and grid is None:
        raise ValueError("nothing to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    written = []
    if reports:
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, rep in reports.items():
            steps = [e.step for e in rep.checkpoints]
            means = [e.mean_success for e in rep.checkpoints]
            ax.plot(steps, means, marker="o", label=name)
        ax.set_xlabel("training step")
        ax.set_ylabel("mean success rate")
        ax.set_ylim(-0.05, 1.05)
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, "eval_curves.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    if grid is not None:
        fig, ax = plt.subplots(figsize=(6, 4))
        xs = list(range(len(grid.values)))
        ax.bar(xs, grid.selected_scores)
        ax.set_xticks(xs, [str(v) for v in grid.values])
        ax.set_xlabel(grid.axis)
        ax.set_ylabel("selected success rate")
        ax.set_ylim(0, 1.05)
        fig.tight_layout()
        path = os.path.join(out_dir, f"ablation_{grid.axis}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
