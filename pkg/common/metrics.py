"""
Evaluation metrics: exact-match span micro-F1, Pearson rho and accuracy.
"""
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import pearsonr

from common.errors import EvalError, ShapeError
from common.heads import Metric

Triple = Tuple[int, int, str]


class SpanSet(frozenset):
    """Exact-match (char_start, char_end, entity_type) triples of one document."""

    def __new__(cls, spans: Iterable[Triple] = ()):
        spans = [tuple(s) for s in spans]
        for s, e, _ in spans:
            if not s < e:
                raise ShapeError(f"span ({s}, {e}) is empty or reversed")
        return super().__new__(cls, spans)


@dataclass
class MetricReport:
    metric: Metric
    value: float
    support: Dict[str, int]
    per_label: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def as_record(self) -> Dict:
        return {"metric": self.metric.value, "value": self.value, **self.support}


def _prf(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def _counts(pred: Sequence[FrozenSet], gold: Sequence[FrozenSet]) -> Tuple[int, int, int]:
    if len(pred) != len(gold):
        raise ShapeError(f"{len(pred)} predicted documents against {len(gold)} gold")
    tp = fp = fn = 0
    for p, g in zip(pred, gold):
        p, g = SpanSet(p), SpanSet(g)
        hit = len(p & g)
        tp += hit
        fp += len(p) - hit
        fn += len(g) - hit
    return tp, fp, fn


def per_label_f1(pred: Sequence[FrozenSet], gold: Sequence[FrozenSet]) -> Dict[str, Dict[str, float]]:
    """Exact-match precision/recall/F1 per entity type."""
    _counts(pred, gold)
    types = sorted({t for doc in list(pred) + list(gold) for _, _, t in doc})
    out = {}
    for t in types:
        tp, fp, fn = _counts(
            [SpanSet(s for s in doc if s[2] == t) for doc in pred],
            [SpanSet(s for s in doc if s[2] == t) for doc in gold],
        )
        p, r, f = _prf(tp, fp, fn)
        out[t] = {"precision": p, "recall": r, "f1": f, "tp": tp, "fp": fp, "fn": fn}
    return out


def micro_f1(pred: Sequence[FrozenSet], gold: Sequence[FrozenSet]) -> MetricReport:
    tp, fp, fn = _counts(pred, gold)
    p, r, f = _prf(tp, fp, fn)
    return MetricReport(
        Metric.MICRO_F1,
        f,
        {"tp": tp, "fp": fp, "fn": fn},
        per_label_f1(pred, gold),
    )


def precision_recall(pred: Sequence[FrozenSet], gold: Sequence[FrozenSet]) -> Tuple[float, float]:
    p, r, _ = _prf(*_counts(pred, gold))
    return p, r


def pearson(pred: Sequence[float], gold: Sequence[float]) -> MetricReport:
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gold, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"pearson needs equal-length lists, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise EvalError("pearson needs at least two scores")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise EvalError("pearson is undefined when either list has zero variance")
    rho = float(pearsonr(x, y)[0])
    return MetricReport(Metric.PEARSON, float(np.clip(rho, -1.0, 1.0)), {"n": int(x.size)})


def accuracy(pred: Sequence, gold: Sequence) -> MetricReport:
    if len(pred) != len(gold):
        raise ShapeError(f"{len(pred)} predictions against {len(gold)} gold labels")
    if not gold:
        raise ShapeError("accuracy needs at least one example")
    hits = sum(1 for p, g in zip(pred, gold) if p == g)
    return MetricReport(Metric.ACCURACY, hits / len(gold), {"n": len(gold), "correct": hits})


def score(metric: Metric, pred: Sequence, gold: Sequence) -> MetricReport:
    if metric == Metric.MICRO_F1:
        return micro_f1(pred, gold)
    if metric == Metric.PEARSON:
        return pearson(pred, gold)
    return accuracy(pred, gold)


def report_frame(reports: Dict[str, MetricReport]) -> pd.DataFrame:
    """One row per task, in the order given."""
    rows: List[Dict] = []
    for task_id, rep in reports.items():
        row = {"task": task_id}
        row.update(rep.as_record())
        rows.append(row)
    return pd.DataFrame(rows).set_index("task")
