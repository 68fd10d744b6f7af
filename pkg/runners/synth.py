from pathlib import Path
from typing import Dict

import toml

from common.data import TaskDataset, synth_task, write_conll, write_pairs
from common.errors import ConfigError, IoError
from common.heads import HeadKind, TaskSpec
from common.tlog import tlog
from runners.base import Runner


def data_file(out_dir: Path, spec: TaskSpec, split: str) -> Path:
    suffix = "conll" if spec.head_kind == HeadKind.NER else "tsv"
    return out_dir / f"{spec.task_id}.{split}.{suffix}"


def write_dataset(spec: TaskSpec, dataset: TaskDataset, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if spec.head_kind == HeadKind.NER:
            write_conll(dataset.examples, f)
        else:
            write_pairs(dataset.examples, f)


class SynthRunner(Runner):
    """Writes every synthetic task of the plan in the open file formats, plus
    plan.toml binding the same tasks to the written files."""

    def __init__(self, data: Dict, debug=False):
        super().__init__("Synth", data, debug)
        try:
            self.out_dir = Path(data["out"])
        except (KeyError, TypeError) as e:
            raise ConfigError("[ERROR] synth must receive an output directory") from e

    async def run(self) -> bool:
        if not self.config.tasks:
            raise ConfigError("plan declares no tasks")
        synthetic = [t for t in self.config.tasks if t.synthetic is not None]
        for spec in self.config.tasks:
            if spec.synthetic is None:
                tlog(f"{spec.task_id} is file-backed, nothing to generate")

        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            bound = []
            for spec in synthetic:
                p = spec.synthetic
                train, test = synth_task(
                    spec.head_kind, p.seed, p.n_train, p.n_test, p.vocab_size,
                    spec.label_names or None, spec.task_id,
                )
                for split, dataset in (("train", train), ("test", test)):
                    path = data_file(self.out_dir, spec, split)
                    write_dataset(spec, dataset, path)
                    tlog(f"wrote {len(dataset)} {split} examples to {path}")

                entry = spec.model_dump(mode="json", exclude={"synthetic"}, exclude_none=True)
                entry["train_path"] = data_file(Path("."), spec, "train").name
                entry["test_path"] = data_file(Path("."), spec, "test").name
                bound.append(entry)

            plan = self.config.model_dump(
                mode="json", exclude={"tasks", "profile"}, exclude_none=True
            )
            plan["tasks"] = bound
            with open(self.out_dir / "plan.toml", "w", encoding="utf-8") as f:
                toml.dump(plan, f)
        except OSError as e:
            raise IoError(f"cannot write synthetic data to {self.out_dir}: {e}") from e

        tlog(f"{len(synthetic)} synthetic tasks written to {self.out_dir}")
        return True
