"""
Run plans.

A plan is a TOML file with [encoder], [trainer], [[tasks]] and optional
[gradcheck], [bench] and [logging] sections. `profile = "clinical_shape"`
stands in for the task list with the eight-task clinical geometry, every
task backed by a synthetic generator. Relative data paths resolve against
the plan's directory and must exist when the plan is loaded.
"""
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import toml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from common.data import CLINICAL_BATCH_SIZE, CLINICAL_SHAPE, bio_labels
from common.encoder import EncoderConfig
from common.errors import ConfigError
from common.gradcheck import ALL_CHECKS
from common.heads import HeadKind, TaskSpec
from common.schedule import TrainerConfig


class GradcheckConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ops: List[str] = Field(default_factory=lambda: list(ALL_CHECKS))
    seed: int = 0
    tolerance: float = Field(1e-4, gt=0.0)


class BenchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_inputs: int = Field(32, ge=0)
    repetitions: int = Field(5, ge=5)
    warmup: int = Field(2, ge=0)
    batch_size: int = Field(8, ge=1)


class LoggingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cloud: bool = False
    name: str = "mtbert"


def clinical_shape_tasks(seed: int = 0, vocab_size: int = 200) -> List[Dict]:
    tasks = []
    for i, (task_id, kind, n_train, n_test, labels) in enumerate(CLINICAL_SHAPE):
        tasks.append(
            {
                "task_id": task_id,
                "head_kind": kind.value,
                "label_names": bio_labels(labels) if kind == HeadKind.NER else list(labels),
                "batch_size": CLINICAL_BATCH_SIZE[kind],
                "synthetic": {
                    "n_train": n_train,
                    "n_test": n_test,
                    "seed": seed + i,
                    "vocab_size": vocab_size,
                },
            }
        )
    return tasks


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    profile: Optional[Literal["clinical_shape"]] = None
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    tasks: List[TaskSpec] = Field(default_factory=list)
    gradcheck: GradcheckConfig = Field(default_factory=GradcheckConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @model_validator(mode="before")
    @classmethod
    def _expand_profile(cls, data):
        if isinstance(data, dict) and data.get("profile") == "clinical_shape" and not data.get("tasks"):
            data = dict(data)
            data["tasks"] = clinical_shape_tasks(data.get("trainer", {}).get("seed", 0))
        return data

    @model_validator(mode="after")
    def _unique_tasks(self) -> "RunConfig":
        ids = [t.task_id for t in self.tasks]
        dupes = sorted({t for t in ids if ids.count(t) > 1})
        if dupes:
            raise ValueError(f"duplicate task ids {dupes}")
        return self

    @property
    def task_ids(self) -> List[str]:
        return [t.task_id for t in self.tasks]


def _resolve_paths(raw: Dict, base: Path) -> Dict:
    for task in raw.get("tasks", []) or []:
        for key in ("train_path", "test_path"):
            if task.get(key):
                p = Path(task[key])
                task[key] = str(p if p.is_absolute() else base / p)
    return raw


def check_paths(cfg: RunConfig) -> None:
    for spec in cfg.tasks:
        for path in (spec.train_path, spec.test_path):
            if path is not None and not path.exists():
                raise ConfigError(f"{spec.task_id}: data file {path} does not exist")


def parse_run_config(raw: Dict, base: Union[str, Path] = ".") -> RunConfig:
    try:
        cfg = RunConfig(**_resolve_paths(raw, Path(base)))
    except ValidationError as e:
        raise ConfigError(f"[ERROR] invalid plan: {e}") from e
    check_paths(cfg)
    return cfg


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        raw = toml.load(path)
    except toml.TomlDecodeError as e:
        raise ConfigError(f"[ERROR] {path} is not valid TOML: {e}") from e
    except OSError as e:
        raise ConfigError(f"[ERROR] cannot read plan {path}: {e}") from e
    return parse_run_config(raw, path.parent)


def apply_overrides(
    cfg: RunConfig,
    seed: Optional[int] = None,
    schedule: Optional[str] = None,
    outer_loops: Optional[int] = None,
    tasks: Optional[Sequence[str]] = None,
) -> RunConfig:
    """Command-line flags take precedence over the plan."""
    update = {}
    if seed is not None:
        update["seed"] = seed
    if schedule is not None:
        update["schedule"] = schedule
    if outer_loops is not None:
        update["outer_loops"] = outer_loops
    try:
        trainer = TrainerConfig(**{**cfg.trainer.model_dump(), **update})
    except ValidationError as e:
        raise ConfigError(f"[ERROR] invalid override: {e}") from e

    selected = cfg.tasks
    if tasks:
        unknown = [t for t in tasks if t not in cfg.task_ids]
        if unknown:
            raise ConfigError(f"unknown tasks {unknown}; plan has {cfg.task_ids}")
        selected = [t for t in cfg.tasks if t.task_id in tasks]
    return cfg.model_copy(update={"trainer": trainer, "tasks": selected})
