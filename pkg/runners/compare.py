from typing import Dict, List

import numpy as np
from pandas import DataFrame as df

from common.data import TRAIN, load_dataset
from common.encoder import init_params
from common.errors import ConfigError
from common.evaluation import evaluate_registry
from common.heads import TaskSpec
from common.metrics import MetricReport
from common.schedule import (SCHEDULES, FinetuneResult, TaskSampler, build_registry, make_optimizer,
                             matched_epochs, sequential_finetune)
from common.tlog import tlog
from runners.base import Runner, display, prepare_tasks

# largest multitask shortfall still counted as matching the single-task model
BASELINE_GAP = 0.05


def train_size(spec: TaskSpec) -> int:
    if spec.synthetic is not None:
        return spec.synthetic.n_train
    return len(load_dataset(spec, TRAIN))


def schedule_table(specs: List[TaskSpec], sizes: List[int], seed: int) -> df:
    """Per-task updates in one outer loop under both schedules."""
    batches = [-(-size // spec.batch_size) for spec, size in zip(specs, sizes)]
    round_robin = max(batches)
    steps = sum(batches)
    sampler = TaskSampler(sizes, seed)
    simulated = sampler.simulate(steps)
    return df(
        {
            "train_size": sizes,
            "batch_size": [s.batch_size for s in specs],
            "batches_per_epoch": batches,
            "round_robin_updates": [round_robin] * len(specs),
            "proportional_expected": steps * sampler.probabilities,
            "proportional_simulated": simulated,
        },
        index=[s.task_id for s in specs],
    )


def baseline_table(
    specs: List[TaskSpec],
    multitask: Dict[str, MetricReport],
    single: Dict[str, FinetuneResult],
    epochs: Dict[str, int],
) -> df:
    rows = []
    for spec in specs:
        mt, st = multitask[spec.task_id].value, single[spec.task_id]
        rows.append(
            {
                "metric": spec.metric.value,
                "multitask": mt,
                "single_task": st.value,
                "delta": mt - st.value,
                "within_gap": mt - st.value >= -BASELINE_GAP,
                "epochs": epochs[spec.task_id],
                "best_seed": st.seed,
                "best_epoch": st.epoch,
            }
        )
    return df(rows, index=[s.task_id for s in specs])


def multitask_vs_single(cfg, debug: bool = False) -> df:
    """Train the shared model and one fine-tuned model per task on the same
    update budget, then score both on every test split."""
    trainer = cfg.trainer
    if trainer.schedule not in SCHEDULES:
        raise ConfigError(f"baseline comparison needs a multitask schedule, got {trainer.schedule}")
    _, prepared = prepare_tasks(cfg.tasks, cfg.encoder, debug=debug)

    encoder = init_params(cfg.encoder, trainer.seed)
    registry = build_registry(prepared, cfg.encoder, trainer.seed)
    epochs = matched_epochs(registry, trainer)
    SCHEDULES[trainer.schedule](encoder, registry, trainer, make_optimizer(trainer), debug=debug)
    multitask, _ = evaluate_registry(registry, encoder, trainer.eval_workers, trainer.eval_batch_size)

    single = {}
    for spec, train, test in prepared:
        single[spec.task_id] = sequential_finetune(
            spec, train, test, cfg.encoder, trainer, epochs=epochs[spec.task_id], debug=debug
        )
    return baseline_table(cfg.tasks, multitask, single, epochs)


class CompareRunner(Runner):
    """Contrasts the update counts of round-robin and proportional schedules,
    and with `baseline` the shared model against single-task fine-tuning."""

    def __init__(self, data: Dict, debug=False):
        super().__init__("Compare", data, debug)
        if not self.config.tasks:
            raise ConfigError("plan declares no tasks")
        self.baseline = bool(data.get("baseline"))

    async def run(self) -> bool:
        specs = self.config.tasks
        sizes = [train_size(s) for s in specs]
        table = schedule_table(specs, sizes, self.config.trainer.seed)
        display("updates per outer loop", table)

        rr_total = int(table["round_robin_updates"].sum())
        prop_total = int(table["batches_per_epoch"].sum())
        spread = np.ptp(table["proportional_expected"] / table["round_robin_updates"])
        tlog(
            f"round robin runs {rr_total} updates per outer loop, proportional {prop_total}",
            round_robin=rr_total,
            proportional=prop_total,
            relative_spread=float(spread),
        )
        if not self.baseline:
            return True

        report = multitask_vs_single(self.config, self.debug)
        display("multitask vs single-task", report)
        for task_id, row in report.iterrows():
            tlog(
                f"{task_id}: multitask {row.multitask:.4f} single-task {row.single_task:.4f} delta {row.delta:+.4f}",
                task_id=task_id,
                multitask=float(row.multitask),
                single_task=float(row.single_task),
                delta=float(row.delta),
            )
        return True
