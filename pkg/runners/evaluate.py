import json
from pathlib import Path
from typing import Dict, Optional

from pandas import DataFrame as df

from common.checkpoint import load
from common.errors import ConfigError, IoError
from common.evaluation import evaluate_registry, prediction_records
from common.heads import Metric
from common.metrics import report_frame
from common.schedule import build_registry
from common.tlog import tlog
from runners.base import Runner, display, plan_spec, prepare_tasks


class EvalRunner(Runner):
    """Scores every head of a checkpoint on its task's test split."""

    def __init__(self, data: Dict, debug=False):
        super().__init__("Eval", data, debug)
        try:
            self.checkpoint = Path(data["checkpoint"])
        except (KeyError, TypeError) as e:
            raise ConfigError("[ERROR] eval must receive a checkpoint path") from e
        self.predictions: Optional[Path] = (
            Path(data["predictions"]) if data.get("predictions") else None
        )
        self.tasks = data.get("tasks")

    async def run(self) -> bool:
        ckpt = load(self.checkpoint)
        specs = [plan_spec(self.config, s) for s in ckpt.tasks]
        if self.tasks:
            unknown = [t for t in self.tasks if t not in {s.task_id for s in specs}]
            if unknown:
                raise ConfigError(f"checkpoint has no heads for {unknown}")
            specs = [s for s in specs if s.task_id in self.tasks]

        _, prepared = prepare_tasks(specs, ckpt.config, ckpt.vocab, self.debug)
        registry = build_registry(prepared, ckpt.config, 0, ckpt.heads)
        reports, predictions = evaluate_registry(
            registry,
            ckpt.encoder,
            self.config.trainer.eval_workers,
            self.config.trainer.eval_batch_size,
        )

        display("evaluation", report_frame(reports))
        for task_id, report in reports.items():
            tlog(f"{task_id} report", task_id=task_id, **report.as_record())
            if report.metric == Metric.MICRO_F1 and self.debug:
                display(f"{task_id} by entity type", df.from_dict(report.per_label, orient="index"))

        if self.predictions:
            try:
                with open(self.predictions, "w", encoding="utf-8") as f:
                    for entry in registry:
                        task_id = entry.spec.task_id
                        for record in prediction_records(task_id, entry.spec, predictions[task_id]):
                            f.write(json.dumps(record) + "\n")
            except OSError as e:
                raise IoError(f"cannot write predictions to {self.predictions}: {e}") from e
            tlog(f"predictions written to {self.predictions}")
        return True
