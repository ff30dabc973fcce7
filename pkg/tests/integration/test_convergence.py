"""
Multi-seed convergence trends on the low-rank recovery task.

These runs take minutes; select them with ``pytest -m slow``.
"""

import pytest

from moelora.bench import ablation_arms, compare_runs, task_for, train_loop
from moelora.config import TrainConfig, desk_scale

SEEDS = range(10)


def trend_config(**updates):
    config = TrainConfig(
        task="lowrank-recover",
        m=64,
        n=64,
        num_experts=20,
        top_k=10,
        rank=4,
        max_steps=500,
        eval_every=50,
    )
    return desk_scale(config).model_copy(update=updates)


def run_all(configs):
    records = []
    for config in configs:
        for seed in SEEDS:
            seeded = config.model_copy(update={"seed": seed})
            record, _ = train_loop(task_for(seeded), seeded)
            records.append(record)
    return records


@pytest.mark.slow
class TestConvergenceTrends:
    """Paired-seed comparisons of the training arms."""

    def test_sqrt_detach_beats_plain_preconditioning(self):
        riemannian = trend_config()
        rescaled = trend_config(mode="sqrt-detach")
        records = run_all([riemannian, rescaled])
        by_seed = {}
        for record in records:
            by_seed.setdefault(record.seed, {})[record.arm] = record

        wins = sum(
            1 for runs in by_seed.values()
            if runs["gRSGD"].final_loss < runs["RSGD"].final_loss
        )
        assert wins >= 8

        early = compare_runs(records, at_step=100, baseline="RSGD")
        assert early.median("gRSGD") < early.median("RSGD")

    def test_rescaling_helps_more_with_preconditioning(self):
        records = run_all(ablation_arms(trend_config()))
        for record in records:
            assert record.aborted is None

        table = compare_runs(records, at_step=500, baseline="SGD")
        preconditioned = table.improvement("RSGD", "gRSGD")
        plain = table.improvement("SGD", "sqrt-SGD")
        assert preconditioned > 5 * plain
