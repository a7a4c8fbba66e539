import json
import os

import numpy as np
import pytest
from conftest import tiny_cfg

from flare import datagen, evaluation
from flare.evaluation import AblationGrid, CheckpointEval, EvalReport


def _evals(means: dict[int, float]) -> list[CheckpointEval]:
    return [CheckpointEval(s, f"ckpt_{s:07d}.npz", {}, m) for s, m in means.items()]


# ------------------------------------------------------------ select_score --


def test_select_score_max_over_tail_latest_tie():
    means = {1: 0.2, 2: 0.95, 3: 0.3, 4: 0.5, 5: 0.9, 6: 0.9, 7: 0.4, 8: 0.1}
    step, score = evaluation.select_score(_evals(means), last_k=5)
    # 0.95 at step 2 falls outside the final five; the 0.9 tie resolves late
    assert (step, score) == (6, 0.9)


def test_select_score_all_tied_picks_latest():
    step, score = evaluation.select_score(_evals({1: 0.5, 2: 0.5, 3: 0.5}), last_k=5)
    assert (step, score) == (3, 0.5)


def test_select_score_ignores_input_order():
    # the 0.8 at step 2 is outside the final two regardless of list order
    evals = _evals({6: 0.1, 2: 0.8, 4: 0.3})
    step, score = evaluation.select_score(list(reversed(evals)), last_k=2)
    assert (step, score) == (4, 0.3)


def test_select_score_empty_rejected():
    with pytest.raises(ValueError):
        evaluation.select_score([], last_k=5)


def test_checkpoint_step_parsing():
    assert evaluation._checkpoint_step("/x/ckpt_0000042.npz") == 42
    with pytest.raises(ValueError):
        evaluation._checkpoint_step("/x/weights.npz")


# -------------------------------------------------------------- protocol --


def test_expert_through_policy_interface_is_perfect():
    world = datagen.WorldConfig()
    suite = datagen.make_task_suite(2, seed=0)

    def factory(task, rng_seed):
        return datagen.expert_chunk_policy(task, world, noise_scale=0.0, seed=rng_seed)

    per_task = evaluation.evaluate_policy(factory, suite, episodes_per_task=3, seed=0, world=world)
    assert set(per_task) == {t.task_id for t in suite}
    assert all(rate == 1.0 for rate in per_task.values())


def test_idle_policy_never_succeeds():
    # initial states keep objects clear of their zones, so doing nothing
    # must score exactly zero
    world = datagen.WorldConfig()
    suite = datagen.make_task_suite(2, seed=0)

    def factory(task, rng_seed):
        return lambda image, tokens, q: np.zeros((world.execute_horizon, 3))

    per_task = evaluation.evaluate_policy(factory, suite, episodes_per_task=2, seed=0, world=world)
    assert all(rate == 0.0 for rate in per_task.values())


def _recording_factory(world, log):
    def factory(task, rng_seed):
        def policy_fn(image, tokens, q):
            return np.zeros((world.execute_horizon, 3))

        def reset(init):
            log.append((task.task_id, init.effector.copy(), init.objects.copy()))

        policy_fn.reset = reset
        return policy_fn

    return factory


def test_episode_worlds_are_shared_across_policies():
    """Initial states depend on (seed, task, episode) only, so two
    different policies are graded on exactly the same worlds."""
    world = datagen.WorldConfig()
    suite = datagen.make_task_suite(2, seed=0)
    log_a, log_b, log_c = [], [], []
    evaluation.evaluate_policy(_recording_factory(world, log_a), suite, 2, seed=0, world=world)
    evaluation.evaluate_policy(_recording_factory(world, log_b), suite, 2, seed=0, world=world)
    evaluation.evaluate_policy(_recording_factory(world, log_c), suite, 2, seed=1, world=world)
    assert len(log_a) == 4
    for (ta, ea, oa), (tb, eb, ob) in zip(log_a, log_b):
        assert ta == tb and np.array_equal(ea, eb) and np.array_equal(oa, ob)
    assert any(not np.array_equal(ea, ec) for (_, ea, _), (_, ec, _) in zip(log_a, log_c))


def test_expert_policy_requires_reset():
    world = datagen.WorldConfig()
    task = datagen.make_task_suite(1, seed=0)[0]
    policy = datagen.expert_chunk_policy(task, world)
    with pytest.raises(RuntimeError, match="reset"):
        policy(None, task.tokens, None)


# ------------------------------------------------------------- checkpoints --


def test_list_checkpoints_orders_and_filters(tiny_run, tmp_path):
    paths = evaluation.list_checkpoints(tiny_run["out"])
    assert [os.path.basename(p) for p in paths] == ["ckpt_0000003.npz", "ckpt_0000006.npz"]
    with pytest.raises(ValueError, match="no checkpoints"):
        evaluation.list_checkpoints(str(tmp_path))


@pytest.fixture(scope="module")
def eval_twice(tiny_run):
    ds = datagen.load_dataset(tiny_run["data"])
    paths = evaluation.list_checkpoints(tiny_run["out"])
    run = lambda: evaluation.evaluate(paths, ds.suite(), episodes_per_task=1, seed=0)
    return run(), run()


def test_evaluate_report_shape(eval_twice, tiny_run):
    report, _ = eval_twice
    assert [e.step for e in report.checkpoints] == [3, 6]
    assert report.selected_step in (3, 6)
    assert 0.0 <= report.selected_score <= 1.0
    for e in report.checkpoints:
        assert set(e.per_task) == {0, 1}
        assert e.mean_success == pytest.approx(np.mean(list(e.per_task.values())))
    json.dumps(report.to_dict())  # must serialize cleanly


def test_evaluate_is_deterministic(eval_twice):
    a, b = eval_twice
    assert a.to_dict() == b.to_dict()


def test_evaluate_rejects_foreign_vocabulary(tiny_run):
    paths = evaluation.list_checkpoints(tiny_run["out"])
    alien = datagen.TaskSpec(0, 0, 0, "pick", np.full(8, 99, dtype=np.int32))
    with pytest.raises(ValueError, match="vocabulary"):
        evaluation.evaluate(paths[:1], [alien], episodes_per_task=1, seed=0)

    with pytest.raises(ValueError, match="episodes_per_task"):
        evaluation.evaluate(paths[:1], [alien], episodes_per_task=0, seed=0)


# --------------------------------------------------------------- ablation --


def test_ablate_validates_axis(tiny_dataset, tmp_path):
    cfg = tiny_cfg(steps=2)
    with pytest.raises(ValueError, match="unknown ablation axis"):
        evaluation.ablate("dropout", [0.1], cfg, tiny_dataset, str(tmp_path), 1, 0)
    with pytest.raises(ValueError, match="no ablation values"):
        evaluation.ablate("lambda", [], cfg, tiny_dataset, str(tmp_path), 1, 0)


def test_ablate_sweeps_one_field(tiny_dataset, tmp_path):
    cfg = tiny_cfg(steps=2, checkpoint_every=2)
    grid = evaluation.ablate(
        "L_tap", ["1", "2"], cfg, tiny_dataset, str(tmp_path), episodes_per_task=1, seed=0
    )
    assert grid.axis == "L_tap" and grid.values == [1, 2]
    assert len(grid.selected_scores) == len(grid.reports) == 2
    out = os.path.join(str(tmp_path), "ablation_L_tap.json")
    with open(out) as f:
        dumped = json.load(f)
    assert dumped["values"] == [1, 2]
    assert dumped["selected_scores"] == grid.selected_scores


# ------------------------------------------------------------------ plots --


def test_emit_plots_writes_files(tmp_path):
    rep = EvalReport(
        checkpoints=[CheckpointEval(3, "a", {0: 0.5}, 0.5), CheckpointEval(6, "b", {0: 1.0}, 1.0)],
        episodes_per_task=2,
        seed=0,
        last_k=5,
        selected_step=6,
        selected_score=1.0,
    )
    grid = AblationGrid("lambda", [0.0, 0.2], [0.4, 0.8], [rep])
    written = evaluation.emit_plots({"aligned": rep, "baseline": rep}, str(tmp_path), grid=grid)
    assert sorted(os.path.basename(p) for p in written) == ["ablation_lambda.png", "eval_curves.png"]
    assert all(os.path.getsize(p) > 0 for p in written)


def test_emit_plots_refuses_empty(tmp_path):
    with pytest.raises(ValueError, match="nothing to plot"):
        evaluation.emit_plots({}, str(tmp_path))
