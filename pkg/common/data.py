"""
Task data: the two open text formats, the synthetic generators that stand in
for the access-restricted clinical corpora, and per-task batch iteration.

CoNLL-style files carry one "token<TAB>tag" line per word with blank lines
between sentences. Pair files carry "text_a<TAB>text_b<TAB>target" lines with
no header. Both are UTF-8.
"""
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import (Dict, Iterable, List, Optional, Sequence, TextIO, Tuple,
                    Union)

import numpy as np

from common.errors import ConfigError, DataError, IoError, ParseError
from common.heads import (HeadKind, Span, TaskSpec, align_tags, bio_spans,
                          entity_types)
from common.tokenizer import Encoding, Vocab, encode_pair, encode_single

TRAIN, TEST = "train", "test"

NEGATION = "no"
ENTAILMENT, NEUTRAL, CONTRADICTION = "entailment", "neutral", "contradiction"
NOT_ENTAILMENT = "not_entailment"

DEFAULT_NER_LABELS = ["O", "B-PROB", "I-PROB", "B-TEST", "I-TEST", "B-TREAT", "I-TREAT"]
DEFAULT_NLI_LABELS = [ENTAILMENT, NEUTRAL, CONTRADICTION]

# Train/test instance counts of the eight clinical corpora. Only their
# geometry is reproduced; the examples themselves are synthetic.
CLINICAL_SHAPE: List[Tuple[str, HeadKind, int, int, List[str]]] = [
    ("sts_clinical", HeadKind.STS, 1641, 410, []),
    ("mednli", HeadKind.NLI, 12627, 1422, DEFAULT_NLI_LABELS),
    ("medrqe", HeadKind.NLI, 8588, 302, [ENTAILMENT, NOT_ENTAILMENT]),
    ("n2c2_2018", HeadKind.NER, 36384, 23462, ["DRUG", "DOSAGE", "ADE"]),
    ("i2b2_2014", HeadKind.NER, 17310, 11462, ["NAME", "DATE", "LOCATION"]),
    ("i2b2_2012", HeadKind.NER, 16468, 13594, ["PROBLEM", "TEST", "TREATMENT"]),
    ("i2b2_2010", HeadKind.NER, 27837, 45009, ["PROBLEM", "TEST", "TREATMENT"]),
    ("quaero_2014", HeadKind.NER, 2695, 2260, ["DISO", "PROC", "CHEM"]),
]
CLINICAL_BATCH_SIZE = {HeadKind.NER: 25, HeadKind.STS: 40, HeadKind.NLI: 40}


def bio_labels(types: Sequence[str]) -> List[str]:
    out = ["O"]
    for t in types:
        out += [f"B-{t}", f"I-{t}"]
    return out


@dataclass(frozen=True)
class NerExample:
    tokens: Tuple[str, ...]
    tags: Tuple[str, ...]
    offsets: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        if not (len(self.tokens) == len(self.tags) == len(self.offsets)):
            raise DataError("tokens, tags and offsets differ in length")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    @property
    def spans(self) -> List[Span]:
        return bio_spans(self.tags, self.offsets)


@dataclass(frozen=True)
class PairExample:
    text_a: str
    text_b: str
    target: Union[float, str]
    label: Optional[int] = None


Example = Union[NerExample, PairExample]


@dataclass(frozen=True)
class TaskDataset:
    task_id: str
    split: str
    examples: Tuple[Example, ...]

    def __len__(self) -> int:
        return len(self.examples)


def word_offsets(tokens: Sequence[str]) -> Tuple[Tuple[int, int], ...]:
    """Character offsets of `tokens` joined by single spaces."""
    out = []
    pos = 0
    for tok in tokens:
        out.append((pos, pos + len(tok)))
        pos += len(tok) + 1
    return tuple(out)


def _valid_tag(tag: str) -> bool:
    if tag == "O":
        return True
    prefix, sep, kind = tag.partition("-")
    return prefix in ("B", "I") and bool(sep) and bool(kind)


def parse_conll(stream: TextIO) -> List[NerExample]:
    examples: List[NerExample] = []
    tokens: List[str] = []
    tags: List[str] = []

    def flush():
        if tokens:
            examples.append(NerExample(tuple(tokens), tuple(tags), word_offsets(tokens)))
            tokens.clear()
            tags.clear()

    for line_no, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            flush()
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError(f"expected 2 tab-separated fields, got {len(fields)}", line_no)
        token, tag = fields
        if not token or any(ch.isspace() for ch in token):
            raise ParseError(f"token {token!r} is empty or contains whitespace", line_no)
        if not _valid_tag(tag):
            raise ParseError(f"unknown tag prefix in {tag!r}", line_no)
        tokens.append(token)
        tags.append(tag)
    flush()
    return examples


def parse_pairs(
    stream: TextIO, kind: HeadKind, label_names: Optional[Sequence[str]] = None
) -> List[PairExample]:
    if kind == HeadKind.NER:
        raise ConfigError("parse_pairs reads STS or NLI data, not NER")
    index = {name: i for i, name in enumerate(label_names or [])}
    examples: List[PairExample] = []
    for line_no, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(fields)}", line_no)
        a, b, target = fields
        if kind == HeadKind.STS:
            try:
                score = float(target)
            except ValueError as e:
                raise ParseError(f"unparseable score {target!r}", line_no) from e
            if not 0.0 <= score <= 5.0:
                raise ParseError(f"score {score} outside [0, 5]", line_no)
            examples.append(PairExample(a, b, score))
        else:
            if target not in index:
                raise ParseError(f"unknown label {target!r}", line_no)
            examples.append(PairExample(a, b, target, index[target]))
    return examples


def write_conll(examples: Iterable[NerExample], stream: TextIO) -> None:
    for ex in examples:
        for token, tag in zip(ex.tokens, ex.tags):
            stream.write(f"{token}\t{tag}\n")
        stream.write("\n")


def write_pairs(examples: Iterable[PairExample], stream: TextIO) -> None:
    for ex in examples:
        target = repr(float(ex.target)) if isinstance(ex.target, float) else ex.target
        stream.write(f"{ex.text_a}\t{ex.text_b}\t{target}\n")


def load_dataset(spec: TaskSpec, split: str) -> TaskDataset:
    """Read one split of a file-backed task."""
    path = spec.train_path if split == TRAIN else spec.test_path
    if path is None:
        raise ConfigError(f"{spec.task_id}: no {split} path configured")
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        line_no = raw[: e.start].count(b"\n") + 1
        raise ParseError(f"{path}: invalid UTF-8 byte at offset {e.start}", line_no) from e

    with io.StringIO(text, newline=None) as f:
        try:
            if spec.head_kind == HeadKind.NER:
                examples: List = parse_conll(f)
                allowed = set(spec.label_names)
                for ex in examples:
                    for tag in ex.tags:
                        if tag not in allowed:
                            raise DataError(f"{path}: tag {tag} is not in the task's tag set")
            else:
                examples = parse_pairs(f, spec.head_kind, spec.label_names)
        except ParseError as e:
            raise ParseError(f"{path}: {e}") from e
    return TaskDataset(spec.task_id, split, tuple(examples))


# Synthetic generators. Each is a pure function of its arguments.

_KIND_STREAM = {HeadKind.NER: 1, HeadKind.STS: 2, HeadKind.NLI: 3}


def trigger_words(types: Sequence[str]) -> Dict[str, Tuple[str, int]]:
    """trigger word -> (entity type, length of the entity it introduces)"""
    out = {}
    for t in types:
        out[f"@{t.lower()}"] = (t, 1)
        out[f"@@{t.lower()}"] = (t, 2)
    return out


def _ner_sentence(
    rng: np.random.Generator, fillers: List[str], triggers: List[str], table: Dict
) -> NerExample:
    length = int(rng.integers(6, 15))
    tokens: List[str] = []
    tags: List[str] = []
    while len(tokens) < length:
        room = length - len(tokens)
        if room >= 3 and rng.random() < 0.3:
            trig = triggers[int(rng.integers(len(triggers)))]
            kind, k = table[trig]
            tokens.append(trig)
            tags.append("O")
            for j in range(k):
                tokens.append(fillers[int(rng.integers(len(fillers)))])
                tags.append(("B-" if j == 0 else "I-") + kind)
        else:
            tokens.append(fillers[int(rng.integers(len(fillers)))])
            tags.append("O")
    return NerExample(tuple(tokens), tuple(tags), word_offsets(tokens))


def sts_score(a: str, b: str) -> float:
    """5 x Jaccard overlap of the two word multisets, rounded to 0.1."""
    ca, cb = Counter(a.split()), Counter(b.split())
    union = sum((ca | cb).values())
    if union == 0:
        return 0.0
    return round(5.0 * sum((ca & cb).values()) / union, 1)


def _sts_pair(rng: np.random.Generator, fillers: List[str]) -> PairExample:
    a = [fillers[int(i)] for i in rng.integers(len(fillers), size=int(rng.integers(4, 11)))]
    keep = rng.random()
    b = [w if rng.random() < keep else fillers[int(rng.integers(len(fillers)))] for w in a]
    if rng.random() < 0.5 and len(b) > 1:
        b = b[: int(rng.integers(1, len(b) + 1))]
    b = [b[int(i)] for i in rng.permutation(len(b))]
    text_a, text_b = " ".join(a), " ".join(b)
    return PairExample(text_a, text_b, sts_score(text_a, text_b))


def nli_relation(premise: str, hypothesis: str) -> str:
    """entailment if the hypothesis words are a subset of the premise words,
    else contradiction if exactly one side is negated, else neutral."""
    p, h = set(premise.split()), set(hypothesis.split())
    if h <= p:
        return ENTAILMENT
    if (NEGATION in p) != (NEGATION in h):
        return CONTRADICTION
    return NEUTRAL


def _nli_pair(
    rng: np.random.Generator, fillers: List[str], label_names: Sequence[str]
) -> PairExample:
    premise = [fillers[int(i)] for i in rng.integers(len(fillers), size=int(rng.integers(4, 10)))]
    negated = rng.random() < 0.5
    if negated:
        premise.insert(int(rng.integers(len(premise) + 1)), NEGATION)

    words = [w for w in premise if w != NEGATION]
    hyp = [words[int(i)] for i in rng.choice(len(words), size=int(rng.integers(1, len(words) + 1)), replace=False)]
    case = int(rng.integers(3))
    if case == 1:
        # flip negation relative to the premise
        if not negated:
            hyp.append(NEGATION)
        else:
            hyp.append(fillers[int(rng.integers(len(fillers)))])
    elif case == 2:
        hyp.append(fillers[int(rng.integers(len(fillers)))])
        if negated:
            hyp.append(NEGATION)
    hyp = [hyp[int(i)] for i in rng.permutation(len(hyp))]

    text_a, text_b = " ".join(premise), " ".join(hyp)
    relation = nli_relation(text_a, text_b)
    if relation != ENTAILMENT and relation not in label_names:
        relation = NOT_ENTAILMENT
    return PairExample(text_a, text_b, relation, list(label_names).index(relation))


def _check_nli_labels(label_names: Sequence[str]) -> None:
    if set(label_names) not in ({ENTAILMENT, NEUTRAL, CONTRADICTION}, {ENTAILMENT, NOT_ENTAILMENT}):
        raise ConfigError(
            f"synthetic NLI needs {DEFAULT_NLI_LABELS} or {[ENTAILMENT, NOT_ENTAILMENT]}, got {list(label_names)}"
        )


def synth_task(
    kind: HeadKind,
    seed: int,
    n_train: int,
    n_test: int,
    vocab_size: int,
    label_names: Optional[Sequence[str]] = None,
    task_id: Optional[str] = None,
) -> Tuple[TaskDataset, TaskDataset]:
    if n_train < 1 or n_test < 1:
        raise ConfigError(f"synthetic split sizes must be positive, got {n_train}/{n_test}")
    kind = HeadKind(kind)
    task_id = task_id or kind.value.lower()
    rng = np.random.default_rng([seed, _KIND_STREAM[kind]])
    fillers = [f"w{i}" for i in range(vocab_size)]

    if kind == HeadKind.NER:
        label_names = list(label_names or DEFAULT_NER_LABELS)
        table = trigger_words(entity_types(label_names))
        triggers = sorted(table)

        def make() -> Example:
            return _ner_sentence(rng, fillers, triggers, table)

    elif kind == HeadKind.STS:

        def make() -> Example:
            return _sts_pair(rng, fillers)

    else:
        label_names = list(label_names or DEFAULT_NLI_LABELS)
        _check_nli_labels(label_names)

        def make() -> Example:
            return _nli_pair(rng, fillers, label_names)

    train = tuple(make() for _ in range(n_train))
    test = tuple(make() for _ in range(n_test))
    return TaskDataset(task_id, TRAIN, train), TaskDataset(task_id, TEST, test)


def task_datasets(spec: TaskSpec) -> Tuple[TaskDataset, TaskDataset]:
    if spec.synthetic is not None:
        p = spec.synthetic
        return synth_task(
            spec.head_kind, p.seed, p.n_train, p.n_test, p.vocab_size,
            spec.label_names or None, spec.task_id,
        )
    return load_dataset(spec, TRAIN), load_dataset(spec, TEST)


def corpus_texts(datasets: Iterable[TaskDataset]) -> Iterable[str]:
    for ds in datasets:
        for ex in ds.examples:
            if isinstance(ex, NerExample):
                yield ex.text
            else:
                yield ex.text_a
                yield ex.text_b


# Encoding and batching.


@dataclass
class EncodedDataset:
    """A dataset tokenized once at max_len; batches slice it."""

    task_id: str
    head_kind: HeadKind
    encodings: List[Encoding]
    targets: List
    examples: Tuple[Example, ...]

    def __len__(self) -> int:
        return len(self.encodings)


def encode_dataset(
    dataset: TaskDataset, spec: TaskSpec, vocab: Vocab, max_len: int
) -> EncodedDataset:
    encodings: List[Encoding] = []
    targets: List = []
    for ex in dataset.examples:
        if spec.head_kind == HeadKind.NER:
            enc = encode_single(ex.text, vocab, max_len)
            targets.append(align_tags(enc, ex.tags, spec.label_names))
        else:
            enc = encode_pair(ex.text_a, ex.text_b, vocab, max_len)
            if spec.head_kind == HeadKind.STS:
                targets.append(float(ex.target))
            else:
                if ex.label is None:
                    raise DataError(f"{spec.task_id}: NLI example without a class label")
                targets.append(ex.label)
        encodings.append(enc)
    return EncodedDataset(spec.task_id, spec.head_kind, encodings, targets, dataset.examples)


@dataclass
class Batch:
    task_id: str
    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    targets: np.ndarray
    encodings: List[Encoding]
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def make_batch(data: EncodedDataset, indices: Sequence[int]) -> Batch:
    """Stack the selected examples, trimming padding to the longest member."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise DataError(f"{data.task_id}: empty batch")
    encs = [data.encodings[int(i)] for i in indices]
    width = max(e.length for e in encs)
    token_ids = np.array([e.token_ids[:width] for e in encs], dtype=np.int64)
    segment_ids = np.array([e.segment_ids[:width] for e in encs], dtype=np.int64)
    mask = np.array([e.attention_mask[:width] for e in encs], dtype=np.float64)
    if data.head_kind == HeadKind.NER:
        targets = np.array([data.targets[int(i)][:width] for i in indices], dtype=np.int64)
    elif data.head_kind == HeadKind.STS:
        targets = np.array([data.targets[int(i)] for i in indices], dtype=np.float64)
    else:
        targets = np.array([data.targets[int(i)] for i in indices], dtype=np.int64)
    return Batch(data.task_id, token_ids, segment_ids, mask, targets, encs, indices)


@dataclass
class BatchIterator:
    """Mini-batch index stream over one dataset.

    Each epoch is a fresh permutation drawn from default_rng([seed, epoch]).
    The final short batch of an epoch is emitted as is. With cycling on, the
    draw after an exhausted epoch reshuffles and increments `wraps`; with
    cycling off it stops.
    """

    size: int
    batch_size: int
    seed: int
    cycling: bool = True
    epoch: int = 0
    position: int = 0
    wraps: int = 0
    draws: int = 0
    _order: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.size < 1:
            raise DataError("cannot iterate over an empty dataset")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be at least 1, got {self.batch_size}")

    @property
    def batches_per_epoch(self) -> int:
        return -(-self.size // self.batch_size)

    def _permutation(self) -> np.ndarray:
        if self._order is None:
            self._order = np.random.default_rng([self.seed, self.epoch]).permutation(self.size)
        return self._order

    def __iter__(self):
        return self

    def __next__(self) -> np.ndarray:
        if self.position >= self.size:
            if not self.cycling:
                raise StopIteration
            self.epoch += 1
            self.wraps += 1
            self.position = 0
            self._order = None
        order = self._permutation()
        out = order[self.position : self.position + self.batch_size]
        self.position += len(out)
        self.draws += 1
        return out

    def state(self) -> Dict[str, int]:
        return {"epoch": self.epoch, "position": self.position, "wraps": self.wraps, "draws": self.draws}

    def restore(self, state: Dict[str, int]) -> None:
        self.epoch = int(state["epoch"])
        self.position = int(state["position"])
        self.wraps = int(state["wraps"])
        self.draws = int(state["draws"])
        self._order = None


def batch_iter(
    data: EncodedDataset, batch_size: int, seed: int, cycling: bool = False
) -> Iterable[Batch]:
    for indices in BatchIterator(len(data), batch_size, seed, cycling):
        yield make_batch(data, indices)
