from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pandas import DataFrame as df
from tabulate import tabulate

from common.checkpoint import Checkpoint
from common.config import RunConfig
from common.data import EncodedDataset, corpus_texts, encode_dataset, task_datasets
from common.encoder import EncoderConfig, EncoderParams
from common.errors import ConfigError
from common.heads import TaskSpec
from common.optim import Optimizer
from common.schedule import TaskRegistry, TrainerState
from common.tlog import tlog
from common.tokenizer import Vocab, build_vocab

PreparedTask = Tuple[TaskSpec, EncodedDataset, EncodedDataset]


class Runner:
    """A command: built from a validated plan plus flags, executed by run()."""

    def __init__(self, name: str, data: Dict, debug: bool = False):
        self.name = name
        self.debug = debug
        try:
            self.config: RunConfig = data["config"]
        except KeyError as e:
            raise ConfigError(f"[ERROR] {name} must receive a run config") from e
        if self.debug:
            tlog(f"{self.name} running in debug mode")

    async def run(self) -> bool:
        raise NotImplementedError


def display(title: str, table: df) -> None:
    print(f"{title}:\n{tabulate(table, headers='keys', tablefmt='psql')}")


def prepare_tasks(
    specs: Sequence[TaskSpec],
    encoder_config: EncoderConfig,
    vocab: Optional[Vocab] = None,
    debug: bool = False,
) -> Tuple[Vocab, List[PreparedTask]]:
    """Load or generate every task's splits and tokenize them. Without a
    vocabulary one is built from the training texts of all tasks."""
    if not specs:
        raise ConfigError("plan declares no tasks")
    splits = []
    for spec in specs:
        train, test = task_datasets(spec)
        tlog(f"{spec.task_id}: {len(train)} train / {len(test)} test examples")
        splits.append((spec, train, test))

    if vocab is None:
        vocab = build_vocab(corpus_texts(t for _, t, _ in splits), encoder_config.vocab_size)
        tlog(f"vocabulary of {len(vocab)} tokens")
    if len(vocab) > encoder_config.vocab_size:
        raise ConfigError(
            f"vocabulary has {len(vocab)} tokens but the encoder embeds {encoder_config.vocab_size}"
        )

    prepared = []
    for spec, train, test in splits:
        prepared.append(
            (
                spec,
                encode_dataset(train, spec, vocab, encoder_config.max_seq_len),
                encode_dataset(test, spec, vocab, encoder_config.max_seq_len),
            )
        )
        if debug:
            lengths = [e.length for e in prepared[-1][1].encodings]
            tlog(f"{spec.task_id}: mean encoded length {np.mean(lengths):.1f}")
    return vocab, prepared


def make_checkpoint(
    encoder: EncoderParams,
    registry: TaskRegistry,
    vocab: Vocab,
    seed: int,
    schedule: str,
    state: TrainerState,
    optimizer: Optimizer,
) -> Checkpoint:
    scalars, arrays = optimizer.state()
    return Checkpoint(
        config=encoder.config,
        tasks=[e.spec for e in registry],
        vocab=vocab,
        encoder=encoder,
        heads={e.spec.task_id: e.head for e in registry},
        trainer={
            "seed": seed,
            "schedule": schedule,
            "state": state.to_dict(),
            "iterators": {e.spec.task_id: e.iterator.state() for e in registry},
            "optimizer": scalars,
            "order": registry.task_ids,
        },
        optimizer_arrays=arrays,
    )


def plan_spec(cfg: RunConfig, spec: TaskSpec) -> TaskSpec:
    """The plan's binding for a task when it has one, else the stored spec."""
    for s in cfg.tasks:
        if s.task_id == spec.task_id:
            if s.head_kind != spec.head_kind or s.label_names != spec.label_names:
                raise ConfigError(f"{spec.task_id}: plan and checkpoint disagree on the head")
            return s
    return spec


def sibling(path: Path, tag: str) -> Path:
    return path.with_name(f"{path.stem}.{tag}{path.suffix}")
