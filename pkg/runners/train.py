from pathlib import Path
from typing import Dict, Optional

from common.checkpoint import load, save
from common.encoder import init_params
from common.errors import ConfigError
from common.evaluation import evaluate_registry
from common.metrics import report_frame
from common.optim import optimizer_factory
from common.schedule import (SCHEDULES, TrainerState, TrainLog, build_registry,
                             extend_registry, make_optimizer,
                             sequential_finetune)
from common.tlog import tlog
from runners.base import (Runner, display, make_checkpoint, plan_spec,
                          prepare_tasks, sibling)


class TrainRunner(Runner):
    """Multitask training (round robin or proportional), with pause and
    resume through checkpoints, or per-task sequential fine-tuning."""

    def __init__(self, data: Dict, debug=False):
        super().__init__("Train", data, debug)
        try:
            self.out = Path(data["out"])
            self.resume: Optional[Path] = Path(data["resume"]) if data.get("resume") else None
            self.max_steps: Optional[int] = data.get("max_steps")
            self.train_log: Optional[Path] = Path(data["train_log"]) if data.get("train_log") else None
        except (KeyError, TypeError) as e:
            raise ConfigError("[ERROR] train must receive an output checkpoint path") from e
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError(f"max steps must be non-negative, got {self.max_steps}")

    def _fresh(self):
        cfg = self.config
        seed = cfg.trainer.seed
        vocab, prepared = prepare_tasks(cfg.tasks, cfg.encoder, debug=self.debug)
        encoder = init_params(cfg.encoder, seed)
        registry = build_registry(prepared, cfg.encoder, seed)
        return encoder, registry, vocab, TrainerState(), make_optimizer(cfg.trainer), cfg.trainer

    def _resumed(self):
        ckpt = load(self.resume)
        stored = ckpt.trainer
        try:
            seed = int(stored["seed"])
            schedule = stored["schedule"]
            iterators = stored["iterators"]
            scalars = stored["optimizer"]
            state = TrainerState.from_dict(stored["state"])
        except (KeyError, TypeError) as e:
            raise ConfigError(f"[ERROR] {self.resume} carries no resumable trainer state") from e

        if ckpt.config != self.config.encoder:
            tlog("encoder section of the plan differs from the checkpoint; using the checkpoint's")
        if schedule != self.config.trainer.schedule:
            tlog(f"resuming with the checkpoint's {schedule} schedule")

        known = {s.task_id for s in ckpt.tasks}
        specs = [plan_spec(self.config, s) for s in ckpt.tasks]
        new = [s for s in self.config.tasks if s.task_id not in known]
        vocab, prepared = prepare_tasks(specs + new, ckpt.config, ckpt.vocab, self.debug)

        registry = build_registry(prepared[: len(specs)], ckpt.config, seed, ckpt.heads)
        for entry in registry:
            entry.iterator.restore(iterators[entry.spec.task_id])
        extend_registry(registry, prepared[len(specs):], ckpt.config, seed)

        optimizer = optimizer_factory(
            scalars["kind"],
            scalars["alpha"],
            scalars.get("beta1", 0.9),
            scalars.get("beta2", 0.999),
            scalars.get("eps", 1e-8),
            scalars,
            ckpt.optimizer_arrays,
        )
        trainer = self.config.trainer.model_copy(update={"seed": seed, "schedule": schedule})
        tlog(f"resumed {self.resume} at step {state.step}, outer loop {state.outer_loop}")
        return ckpt.encoder, registry, vocab, state, optimizer, trainer

    def _write_log(self, log: TrainLog) -> None:
        if self.train_log:
            with open(self.train_log, "w", encoding="utf-8") as f:
                log.write(f)

    async def _single_task(self) -> bool:
        cfg = self.config
        vocab, prepared = prepare_tasks(cfg.tasks, cfg.encoder, debug=self.debug)
        for spec, train, test in prepared:
            result = sequential_finetune(spec, train, test, cfg.encoder, cfg.trainer, debug=self.debug)
            display(f"{spec.task_id} {spec.metric.value} by seed and epoch", result.table)
            tlog(
                f"{spec.task_id}: best seed {result.seed} epoch {result.epoch} {spec.metric.value} {result.value:.4f}",
                task_id=spec.task_id,
                seed=result.seed,
                epoch=result.epoch,
                value=result.value,
            )

            registry = build_registry(
                [(spec, train, test)], cfg.encoder, result.seed, {spec.task_id: result.head}
            )
            out = self.out if len(prepared) == 1 else sibling(self.out, spec.task_id)
            save(
                make_checkpoint(
                    result.encoder, registry, vocab, result.seed, "single_task",
                    TrainerState(), make_optimizer(cfg.trainer),
                ),
                out,
            )
            tlog(f"saved {out}")
            if len(prepared) == 1:
                self._write_log(result.logs[result.seed])
        return True

    async def run(self) -> bool:
        if self.resume is None and self.config.trainer.schedule == "single_task":
            return await self._single_task()

        encoder, registry, vocab, state, optimizer, trainer = (
            self._resumed() if self.resume else self._fresh()
        )
        if trainer.schedule not in SCHEDULES:
            raise ConfigError(f"cannot resume a {trainer.schedule} run")
        tlog(f"{trainer.schedule} training over {registry.task_ids}, {trainer.outer_loops} outer loops")

        log = SCHEDULES[trainer.schedule](
            encoder, registry, trainer, optimizer, state, self.max_steps, debug=self.debug
        )

        save(
            make_checkpoint(encoder, registry, vocab, trainer.seed, trainer.schedule, state, optimizer),
            self.out,
        )
        tlog(f"saved {self.out}")
        self._write_log(log)
        if len(log):
            display("updates", log.summary())

        if state.outer_loop >= trainer.outer_loops:
            log.metrics, _ = evaluate_registry(
                registry, encoder, trainer.eval_workers, trainer.eval_batch_size
            )
            display("evaluation", report_frame(log.metrics))
        else:
            tlog(f"paused at step {state.step}", step=state.step)
        return True
