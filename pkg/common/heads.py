"""
Task identities and the three single-linear-map heads: per-token tagging
(NER), [CLS] regression (STS) and [CLS] classification (NLI).
"""
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from common import autodiff as ad
from common.autodiff import IGNORE_INDEX, Tensor
from common.encoder import truncated_normal
from common.errors import ConfigError, DataError, LabelError
from common.tokenizer import NO_OFFSET, Encoding

if TYPE_CHECKING:
    from common.data import Batch

STS_MIN, STS_MAX = 0.0, 5.0

Span = Tuple[int, int, str]


class HeadKind(str, Enum):
    NER = "NER"
    STS = "STS"
    NLI = "NLI"


class Metric(str, Enum):
    MICRO_F1 = "micro_f1"
    PEARSON = "pearson"
    ACCURACY = "accuracy"


METRIC_FOR_HEAD = {
    HeadKind.NER: Metric.MICRO_F1,
    HeadKind.STS: Metric.PEARSON,
    HeadKind.NLI: Metric.ACCURACY,
}


class SynthProfile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_train: int = Field(ge=1)
    n_test: int = Field(ge=1)
    seed: int = 0
    vocab_size: int = Field(200, ge=8)


def entity_types(label_names: Sequence[str]) -> List[str]:
    """Entity types of a BIO tag set; ConfigError when it is malformed."""
    if "O" not in label_names:
        raise ConfigError("BIO tag set must contain 'O'")
    types: List[str] = []
    for name in label_names:
        if name == "O":
            continue
        prefix, sep, kind = name.partition("-")
        if prefix not in ("B", "I") or not sep or not kind:
            raise ConfigError(f"malformed BIO tag {name!r}")
        if kind not in types:
            types.append(kind)
    for kind in types:
        if f"B-{kind}" not in label_names or f"I-{kind}" not in label_names:
            raise ConfigError(f"entity type {kind} needs both B- and I- tags")
    return types


class TaskSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task_id: str = Field(min_length=1)
    head_kind: HeadKind
    label_names: List[str] = []
    batch_size: int = Field(ge=1)
    metric: Optional[Metric] = None
    train_path: Optional[Path] = None
    test_path: Optional[Path] = None
    synthetic: Optional[SynthProfile] = None

    @model_validator(mode="after")
    def _consistent(self) -> "TaskSpec":
        expected = METRIC_FOR_HEAD[self.head_kind]
        if self.metric is None:
            self.metric = expected
        elif self.metric != expected:
            raise ValueError(
                f"{self.task_id}: {self.head_kind.value} heads are scored with {expected.value}, not {self.metric.value}"
            )

        if self.head_kind == HeadKind.STS and self.label_names:
            raise ValueError(f"{self.task_id}: STS tasks take no label names")
        if self.head_kind == HeadKind.NLI and len(self.label_names) < 2:
            raise ValueError(f"{self.task_id}: NLI tasks need at least two classes")
        if self.head_kind == HeadKind.NER:
            try:
                entity_types(self.label_names)
            except ConfigError as e:
                raise ValueError(f"{self.task_id}: {e}") from e
        if len(set(self.label_names)) != len(self.label_names):
            raise ValueError(f"{self.task_id}: duplicate label names")

        if self.synthetic is None and (self.train_path is None or self.test_path is None):
            raise ValueError(f"{self.task_id}: needs train_path and test_path, or a synthetic profile")
        if self.synthetic is not None and (self.train_path or self.test_path):
            raise ValueError(f"{self.task_id}: data paths and a synthetic profile are exclusive")
        return self

    @property
    def out_dim(self) -> int:
        return 1 if self.head_kind == HeadKind.STS else len(self.label_names)


@dataclass
class HeadParams:
    weight: Tensor
    bias: Tensor

    def named_parameters(self, task_id: str) -> Dict[str, Tensor]:
        return {f"head.{task_id}.bias": self.bias, f"head.{task_id}.weight": self.weight}

    def copy(self) -> "HeadParams":
        return HeadParams(
            Tensor(self.weight.data, requires_grad=True),
            Tensor(self.bias.data, requires_grad=True),
        )


def init_head(spec: TaskSpec, hidden_dim: int, init_std: float, seed: int) -> HeadParams:
    rng = np.random.default_rng(seed)
    return HeadParams(
        weight=Tensor(
            truncated_normal(rng, (hidden_dim, spec.out_dim), init_std), requires_grad=True
        ),
        bias=Tensor(np.zeros(spec.out_dim), requires_grad=True),
    )


def _project(x: Tensor, head: HeadParams) -> Tensor:
    return ad.matmul(x, head.weight) + head.bias


def _cls(hidden: Tensor) -> Tensor:
    return ad.index(hidden, (slice(None), 0, slice(None)))


def ner_loss(hidden: Tensor, head: HeadParams, tags: np.ndarray) -> Tuple[Tensor, Tensor]:
    b, t, h = hidden.shape
    logits = _project(hidden, head)
    flat = ad.reshape(logits, (b * t, logits.shape[-1]))
    loss = ad.cross_entropy(flat, np.asarray(tags).reshape(-1))
    return loss, logits


def sts_predict(hidden: Tensor, head: HeadParams) -> Tuple[Tensor, np.ndarray]:
    """(raw regression output [B], scores clamped to [0, 5])."""
    raw = ad.reshape(_project(_cls(hidden), head), (hidden.shape[0],))
    return raw, np.clip(raw.data, STS_MIN, STS_MAX)


def sts_loss(hidden: Tensor, head: HeadParams, targets: np.ndarray) -> Tuple[Tensor, Tensor]:
    targets = np.asarray(targets, dtype=np.float64)
    if np.any(targets < STS_MIN) or np.any(targets > STS_MAX):
        raise DataError(f"STS targets must lie in [{STS_MIN}, {STS_MAX}]")
    raw, _ = sts_predict(hidden, head)
    return ad.mse(raw, targets), raw


def nli_loss(hidden: Tensor, head: HeadParams, labels: np.ndarray) -> Tuple[Tensor, Tensor]:
    labels = np.asarray(labels, dtype=np.int64)
    c = head.bias.shape[0]
    if np.any(labels < 0) or np.any(labels >= c):
        raise LabelError(f"NLI label outside [0, {c})")
    logits = _project(_cls(hidden), head)
    return ad.cross_entropy(logits, labels), logits


def nli_predict(logits: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(np.asarray(logits), axis=-1)


def align_tags(
    encoding: Encoding, word_tags: Sequence[str], label_names: Sequence[str]
) -> List[int]:
    """Per-piece tag ids: the word's tag on every piece, B-X turning into I-X
    on continuation pieces; special and padding positions are ignored."""
    index = {name: i for i, name in enumerate(label_names)}
    out: List[int] = []
    previous_word = -1
    for offset, word in zip(encoding.offsets, encoding.word_index):
        if offset == NO_OFFSET or word < 0:
            out.append(IGNORE_INDEX)
            previous_word = -1
            continue
        tag = word_tags[word]
        if word == previous_word and tag.startswith("B-"):
            tag = "I-" + tag[2:]
        if tag not in index:
            raise LabelError(f"tag {tag!r} is not in the task's tag set")
        out.append(index[tag])
        previous_word = word
    return out


def bio_spans(tags: Sequence[str], offsets: Sequence[Tuple[int, int]]) -> List[Span]:
    """Lenient BIO decoding to character spans. An I-X that does not continue
    an open X span starts a new one. Positions without offsets close spans."""
    spans: List[Span] = []
    open_type: Optional[str] = None
    start = end = 0

    def close():
        if open_type is not None:
            spans.append((start, end, open_type))

    for tag, (s, e) in zip(tags, offsets):
        if (s, e) == NO_OFFSET or tag == "O":
            close()
            open_type = None
            continue
        prefix, kind = tag[0], tag[2:]
        if prefix == "I" and open_type == kind:
            end = e
            continue
        close()
        open_type, start, end = kind, s, e
    close()
    return spans


def ner_decode(
    tag_logits: np.ndarray, encoding: Encoding, label_names: Sequence[str]
) -> List[Span]:
    entity_types(label_names)
    ids = np.argmax(np.asarray(tag_logits), axis=-1)
    n = min(len(ids), len(encoding.offsets))
    tags = [label_names[int(i)] for i in ids[:n]]
    return bio_spans(tags, encoding.offsets[:n])


def task_loss(
    spec: TaskSpec, hidden: Tensor, head: HeadParams, batch: "Batch"
) -> Tuple[Tensor, Tensor]:
    if spec.head_kind == HeadKind.NER:
        return ner_loss(hidden, head, batch.targets)
    if spec.head_kind == HeadKind.STS:
        return sts_loss(hidden, head, batch.targets)
    return nli_loss(hidden, head, batch.targets)


def predict(
    spec: TaskSpec, hidden: Tensor, head: HeadParams, batch: "Batch"
) -> List:
    """One prediction per batch row: spans, a clamped score or a class name."""
    if spec.head_kind == HeadKind.NER:
        logits = _project(hidden, head).data
        return [
            ner_decode(logits[i], enc, spec.label_names)
            for i, enc in enumerate(batch.encodings)
        ]
    if spec.head_kind == HeadKind.STS:
        _, scores = sts_predict(hidden, head)
        return [float(s) for s in scores]
    logits = _project(_cls(hidden), head).data
    return [spec.label_names[int(i)] for i in nli_predict(logits)]
