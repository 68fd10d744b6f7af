"""
Multitask training schedules over one shared encoder.

round_robin_train visits every registered head in fixed registry order, one
batch and one update each, until the task with the most batches per epoch
has been traversed once; smaller tasks cycle with reshuffling.
proportional_train draws the task of every step with probability
proportional to its training set size. sequential_finetune is the
single-task baseline with a seed x epoch model search.

Every update touches the encoder and the head that produced the loss, and
nothing else. Losses of different heads are never combined.
"""
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Literal, Optional, Sequence, TextIO, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from common.autodiff import Tape, Tensor
from common.data import BatchIterator, EncodedDataset, make_batch
from common.encoder import EncoderConfig, EncoderParams, encoder_forward, init_params
from common.errors import ConfigError, DataError, NumericError
from common.evaluation import evaluate_task
from common.heads import HeadParams, TaskSpec, init_head, task_loss
from common.metrics import MetricReport
from common.optim import Optimizer, optimizer_factory
from common.tlog import tlog

SAMPLER_STREAM = 0x5A4D


class TrainerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(5e-5, gt=0.0)
    optimizer: Literal["sgd", "adam"] = "sgd"
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    outer_loops: int = Field(1, ge=1)
    seed: int = 0
    schedule: Literal["round_robin", "proportional", "single_task"] = "round_robin"
    seeds: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5], min_length=1)
    epochs: int = Field(20, ge=1)
    eval_workers: int = Field(4, ge=1)
    eval_batch_size: int = Field(64, ge=1)


def make_optimizer(cfg: TrainerConfig) -> Optimizer:
    return optimizer_factory(cfg.optimizer, cfg.alpha, cfg.beta1, cfg.beta2, cfg.eps)


def task_seed(seed: int, position: int, stream: int = 0) -> int:
    """Independent 32-bit seed for the task at `position` of the registry."""
    return int(np.random.SeedSequence([seed, position, stream]).generate_state(1)[0])


@dataclass
class TaskEntry:
    spec: TaskSpec
    head: HeadParams
    train: EncodedDataset
    test: Optional[EncodedDataset]
    iterator: BatchIterator


class TaskRegistry:
    """Ordered task heads. Order is fixed at registration."""

    def __init__(self):
        self.entries: List[TaskEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[TaskEntry]:
        return iter(self.entries)

    def __getitem__(self, key) -> TaskEntry:
        if isinstance(key, int):
            return self.entries[key]
        for entry in self.entries:
            if entry.spec.task_id == key:
                return entry
        raise KeyError(key)

    def __contains__(self, task_id: str) -> bool:
        return any(e.spec.task_id == task_id for e in self.entries)

    @property
    def task_ids(self) -> List[str]:
        return [e.spec.task_id for e in self.entries]

    def register(
        self,
        spec: TaskSpec,
        head: HeadParams,
        train: EncodedDataset,
        test: Optional[EncodedDataset],
        seed: int,
    ) -> TaskEntry:
        if spec.task_id in self:
            raise ConfigError(f"duplicate task id {spec.task_id}")
        if len(train) == 0:
            raise DataError(f"{spec.task_id}: training set is empty")
        iterator = BatchIterator(len(train), spec.batch_size, task_seed(seed, len(self.entries)))
        entry = TaskEntry(spec, head, train, test, iterator)
        self.entries.append(entry)
        return entry

    def head_parameters(self) -> Dict[str, Tensor]:
        out = {}
        for e in self.entries:
            out.update(e.head.named_parameters(e.spec.task_id))
        return out


def new_head(spec: TaskSpec, config: EncoderConfig, seed: int, position: int) -> HeadParams:
    return init_head(spec, config.hidden_dim, config.init_std, task_seed(seed, position, 1))


def build_registry(
    tasks: Sequence[Tuple[TaskSpec, EncodedDataset, Optional[EncodedDataset]]],
    config: EncoderConfig,
    seed: int,
    heads: Optional[Dict[str, HeadParams]] = None,
) -> TaskRegistry:
    """Register tasks in the given order; heads not supplied are initialised."""
    registry = TaskRegistry()
    heads = heads or {}
    for spec, train, test in tasks:
        head = heads.get(spec.task_id) or new_head(spec, config, seed, len(registry))
        registry.register(spec, head, train, test, seed)
    return registry


@dataclass
class TrainRecord:
    outer_loop: int
    iteration: int
    step: int
    task_id: str
    batch_index: int
    loss: float
    # restarts of every task's iterator within this outer loop
    wraps: Dict[str, int]


@dataclass
class TrainLog:
    records: List[TrainRecord] = field(default_factory=list)
    metrics: Dict[str, MetricReport] = field(default_factory=dict)

    def append(self, record: TrainRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    def updates(self) -> Counter:
        return Counter(r.task_id for r in self.records)

    def final_wraps(self) -> Dict[str, int]:
        """Wrap counters of every task over the last outer loop."""
        return dict(self.records[-1].wraps) if self.records else {}

    def loop_wraps(self) -> Dict[int, Dict[str, int]]:
        out: Dict[int, Dict[str, int]] = {}
        for r in self.records:
            out[r.outer_loop] = dict(r.wraps)
        return out

    def write(self, stream: TextIO) -> None:
        """One JSON record per update; loss written with 17 significant digits."""
        for r in self.records:
            fields = asdict(r)
            loss = fields.pop("loss")
            head = json.dumps(fields, sort_keys=True)
            stream.write(f'{head[:-1]}, "loss": {loss:.17g}}}\n')

    def frame(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            row = asdict(r)
            row["wraps"] = r.wraps.get(r.task_id, 0)
            rows.append(row)
        return pd.DataFrame(rows)

    def summary(self) -> pd.DataFrame:
        df = self.frame()
        if df.empty:
            return df
        return df.groupby("task_id", sort=False).agg(
            updates=("loss", "size"),
            mean_loss=("loss", "mean"),
            last_loss=("loss", "last"),
            wraps=("wraps", "last"),
        )


@dataclass
class TrainerState:
    step: int = 0
    outer_loop: int = 0
    iteration: int = 0
    cursor: int = 0
    sampler: Optional[Dict] = None
    wrap_loop: int = -1
    wrap_base: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainerState":
        return cls(**d)


def update_step(
    encoder: EncoderParams,
    head: HeadParams,
    spec: TaskSpec,
    batch,
    optimizer: Optimizer,
    step: int = 0,
    seed: int = 0,
    train_mode: bool = True,
) -> float:
    """Forward, backward and one optimizer update of the encoder and this
    head only. Returns the loss measured before the update."""
    params = {**encoder.named_parameters(), **head.named_parameters(spec.task_id)}
    for p in params.values():
        p.grad = None

    with Tape() as tape:
        hidden = encoder_forward(encoder, batch, train_mode, dropout_key=(seed, step))
        loss, _ = task_loss(spec, hidden, head, batch)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"{spec.task_id}: non-finite loss {value}", step)
        tape.backward(loss)

    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    optimizer.step(params)
    return value


def _check_registry(registry: TaskRegistry) -> None:
    if not len(registry):
        raise ConfigError("no tasks registered")
    for entry in registry:
        if len(entry.train) == 0:
            raise DataError(f"{entry.spec.task_id}: training set is empty")


def _open_loop(registry: TaskRegistry, state: TrainerState) -> None:
    """Snapshot wrap counters when an outer loop starts. An iterator left
    exhausted by the previous loop restarts on its first draw; that restart
    belongs to the loop boundary."""
    if state.wrap_loop == state.outer_loop:
        return
    state.wrap_base = {
        e.spec.task_id: e.iterator.wraps + int(e.iterator.position >= e.iterator.size)
        for e in registry
    }
    state.wrap_loop = state.outer_loop


def loop_wraps(registry: TaskRegistry, state: TrainerState) -> Dict[str, int]:
    return {
        e.spec.task_id: max(0, e.iterator.wraps - state.wrap_base.get(e.spec.task_id, 0))
        for e in registry
    }


def _train_one(
    encoder: EncoderParams,
    registry: TaskRegistry,
    entry: TaskEntry,
    optimizer: Optimizer,
    state: TrainerState,
    cfg: TrainerConfig,
    log: TrainLog,
    debug: bool,
) -> None:
    indices = next(entry.iterator)
    batch = make_batch(entry.train, indices)
    loss = update_step(encoder, entry.head, entry.spec, batch, optimizer, state.step, cfg.seed)
    log.append(
        TrainRecord(
            outer_loop=state.outer_loop,
            iteration=state.iteration,
            step=state.step,
            task_id=entry.spec.task_id,
            batch_index=entry.iterator.draws - 1,
            loss=loss,
            wraps=loop_wraps(registry, state),
        )
    )
    if debug:
        tlog(
            f"step {state.step} loop {state.outer_loop} iter {state.iteration} {entry.spec.task_id} loss {loss:.6f}",
            step=state.step,
            task_id=entry.spec.task_id,
            loss=loss,
        )
    state.step += 1


def _loop_done(log: TrainLog, state: TrainerState, start: int) -> None:
    tail = log.records[start:]
    mean = float(np.mean([r.loss for r in tail])) if tail else float("nan")
    tlog(
        f"outer loop {state.outer_loop} done after step {state.step}, mean loss {mean:.6f}",
        outer_loop=state.outer_loop,
        step=state.step,
        mean_loss=mean,
    )


def round_robin_train(
    encoder: EncoderParams,
    registry: TaskRegistry,
    cfg: TrainerConfig,
    optimizer: Optional[Optimizer] = None,
    state: Optional[TrainerState] = None,
    max_steps: Optional[int] = None,
    log: Optional[TrainLog] = None,
    debug: bool = False,
) -> TrainLog:
    """Round-robin schedule. `max_steps` pauses once `state.step` reaches it;
    calling again with the same state resumes where it paused."""
    _check_registry(registry)
    optimizer = optimizer or make_optimizer(cfg)
    state = state if state is not None else TrainerState()
    log = log if log is not None else TrainLog()
    n_iter = max(e.iterator.batches_per_epoch for e in registry)

    while state.outer_loop < cfg.outer_loops:
        start = len(log)
        _open_loop(registry, state)
        while state.iteration < n_iter:
            while state.cursor < len(registry):
                if max_steps is not None and state.step >= max_steps:
                    return log
                _train_one(encoder, registry, registry[state.cursor], optimizer, state, cfg, log, debug)
                state.cursor += 1
            state.cursor = 0
            state.iteration += 1
        _loop_done(log, state, start)
        state.iteration = 0
        state.outer_loop += 1
    return log


class TaskSampler:
    """Draws task positions with probability proportional to training set size."""

    def __init__(self, sizes: Sequence[int], seed: int, state: Optional[Dict] = None):
        sizes = np.asarray(sizes, dtype=np.float64)
        if sizes.size == 0 or np.any(sizes <= 0):
            raise DataError("proportional sampling needs non-empty task datasets")
        self.probabilities = sizes / sizes.sum()
        self.rng = np.random.default_rng([seed, SAMPLER_STREAM])
        if state is not None:
            self.rng.bit_generator.state = state

    def draw(self) -> int:
        return int(self.rng.choice(len(self.probabilities), p=self.probabilities))

    def state(self) -> Dict:
        return self.rng.bit_generator.state

    def simulate(self, draws: int) -> np.ndarray:
        counts = np.zeros(len(self.probabilities), dtype=np.int64)
        for _ in range(draws):
            counts[self.draw()] += 1
        return counts


def proportional_train(
    encoder: EncoderParams,
    registry: TaskRegistry,
    cfg: TrainerConfig,
    optimizer: Optional[Optimizer] = None,
    state: Optional[TrainerState] = None,
    max_steps: Optional[int] = None,
    log: Optional[TrainLog] = None,
    debug: bool = False,
) -> TrainLog:
    """Size-proportional task sampling; an outer loop has as many steps as
    the tasks have batches per epoch combined."""
    _check_registry(registry)
    optimizer = optimizer or make_optimizer(cfg)
    state = state if state is not None else TrainerState()
    log = log if log is not None else TrainLog()
    sampler = TaskSampler([len(e.train) for e in registry], cfg.seed, state.sampler)
    steps_per_loop = sum(e.iterator.batches_per_epoch for e in registry)

    while state.outer_loop < cfg.outer_loops:
        start = len(log)
        _open_loop(registry, state)
        while state.iteration < steps_per_loop:
            if max_steps is not None and state.step >= max_steps:
                state.sampler = sampler.state()
                return log
            _train_one(encoder, registry, registry[sampler.draw()], optimizer, state, cfg, log, debug)
            state.iteration += 1
        _loop_done(log, state, start)
        state.iteration = 0
        state.outer_loop += 1
    state.sampler = sampler.state()
    return log


SCHEDULES = {"round_robin": round_robin_train, "proportional": proportional_train}


def matched_epochs(registry: TaskRegistry, cfg: TrainerConfig) -> Dict[str, int]:
    """Single-task epochs giving each task at least the updates it receives
    under the multitask schedule (expected updates when proportional)."""
    _check_registry(registry)
    batches = [e.iterator.batches_per_epoch for e in registry]
    if cfg.schedule == "proportional":
        sizes = np.array([len(e.train) for e in registry], dtype=np.float64)
        updates = cfg.outer_loops * sum(batches) * sizes / sizes.sum()
    elif cfg.schedule == "round_robin":
        updates = np.full(len(batches), cfg.outer_loops * max(batches), dtype=np.float64)
    else:
        raise ConfigError(f"no multitask budget for the {cfg.schedule} schedule")
    return {
        e.spec.task_id: max(1, int(np.ceil(u / b - 1e-9)))
        for e, u, b in zip(registry, updates, batches)
    }


@dataclass
class FinetuneResult:
    seed: int
    epoch: int
    value: float
    encoder: EncoderParams
    head: HeadParams
    table: pd.DataFrame = field(default_factory=pd.DataFrame)
    logs: Dict[int, TrainLog] = field(default_factory=dict)


def sequential_finetune(
    spec: TaskSpec,
    train: EncodedDataset,
    test: EncodedDataset,
    encoder_config: EncoderConfig,
    cfg: TrainerConfig,
    seeds: Optional[Sequence[int]] = None,
    epochs: Optional[int] = None,
    debug: bool = False,
) -> FinetuneResult:
    """Fine-tune a fresh encoder and head per seed, scoring the test split
    after every epoch. Returns the best (seed, epoch) model; ties keep the
    lowest pair."""
    seeds = sorted(cfg.seeds if seeds is None else seeds)
    epochs = cfg.epochs if epochs is None else epochs
    if not seeds:
        raise ConfigError("sequential fine-tuning needs at least one seed")
    if epochs < 1:
        raise ConfigError(f"epochs must be at least 1, got {epochs}")

    rows = []
    logs: Dict[int, TrainLog] = {}
    best: Optional[FinetuneResult] = None
    for seed in seeds:
        run_cfg = cfg.model_copy(update={"seed": seed})
        encoder = init_params(encoder_config, seed)
        registry = build_registry([(spec, train, test)], encoder_config, seed)
        entry = registry[0]
        optimizer = make_optimizer(run_cfg)
        state = TrainerState()
        logs[seed] = TrainLog()
        for epoch in range(1, epochs + 1):
            round_robin_train(
                encoder,
                registry,
                run_cfg.model_copy(update={"outer_loops": epoch}),
                optimizer,
                state,
                log=logs[seed],
                debug=debug,
            )
            report = evaluate_task(encoder, spec, entry.head, test, cfg.eval_batch_size)
            rows.append({"seed": seed, "epoch": epoch, spec.metric.value: report.value})
            tlog(
                f"{spec.task_id} seed {seed} epoch {epoch}: {spec.metric.value} {report.value:.4f}",
                task_id=spec.task_id,
                seed=seed,
                epoch=epoch,
                value=report.value,
            )
            if best is None or report.value > best.value:
                best = FinetuneResult(seed, epoch, report.value, encoder.copy(), entry.head.copy())

    best.table = pd.DataFrame(rows).set_index(["seed", "epoch"])
    best.logs = logs
    return best


def extend_registry(
    registry: TaskRegistry,
    tasks: Sequence[Tuple[TaskSpec, EncodedDataset, Optional[EncodedDataset]]],
    config: EncoderConfig,
    seed: int,
) -> List[str]:
    """Append tasks not yet registered, each with a fresh head; registered
    tasks keep their positions. Returns the ids added."""
    added = []
    for spec, train, test in tasks:
        if spec.task_id in registry:
            continue
        head = new_head(spec, config, seed, len(registry))
        registry.register(spec, head, train, test, seed)
        added.append(spec.task_id)
        tlog(f"registered new task {spec.task_id} at position {len(registry) - 1}")
    return added
