from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Dict, Iterable, List

from common.data import EncodedDataset, NerExample, make_batch
from common.encoder import EncoderParams, encoder_forward
from common.errors import ConfigError
from common.heads import HeadKind, HeadParams, TaskSpec, predict
from common.metrics import MetricReport, SpanSet, score
from common.tlog import tlog


def predict_task(
    encoder: EncoderParams,
    spec: TaskSpec,
    head: HeadParams,
    data: EncodedDataset,
    batch_size: int = 64,
) -> List:
    """Inference over a whole split, in dataset order."""
    out: List = []
    for start in range(0, len(data), batch_size):
        batch = make_batch(data, range(start, min(start + batch_size, len(data))))
        hidden = encoder_forward(encoder, batch)
        out.extend(predict(spec, hidden, head, batch))
    return out


def gold_of(spec: TaskSpec, data: EncodedDataset) -> List:
    if spec.head_kind == HeadKind.NER:
        return [SpanSet(ex.spans) for ex in data.examples if isinstance(ex, NerExample)]
    if spec.head_kind == HeadKind.STS:
        return [float(ex.target) for ex in data.examples]
    return [ex.target for ex in data.examples]


def evaluate_task(
    encoder: EncoderParams,
    spec: TaskSpec,
    head: HeadParams,
    data: EncodedDataset,
    batch_size: int = 64,
) -> MetricReport:
    return _score(spec, predict_task(encoder, spec, head, data, batch_size), data)


def _score(spec: TaskSpec, preds: List, data: EncodedDataset) -> MetricReport:
    if spec.head_kind == HeadKind.NER:
        preds = [SpanSet(p) for p in preds]
    return score(spec.metric, preds, gold_of(spec, data))


def evaluate_registry(registry, encoder: EncoderParams, workers: int = 4, batch_size: int = 64):
    """(reports, predictions) per task in registry order. Tasks are scored
    concurrently against the same read-only encoder."""
    entries = [e for e in registry if e.test is not None]
    if not entries:
        raise ConfigError("no task has a test split to evaluate")

    reports: Dict[str, MetricReport] = {}
    predictions: Dict[str, List] = {}
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {
            executor.submit(_evaluate_entry, encoder, e, batch_size): e.spec.task_id
            for e in entries
        }
        for future in as_completed(futures):
            task_id = futures[future]
            report, preds = future.result()
            reports[task_id] = report
            predictions[task_id] = preds
            tlog(
                f"{task_id}: {report.metric.value} {report.value:.4f}",
                task_id=task_id,
                metric=report.metric.value,
                value=report.value,
            )

    order = [e.spec.task_id for e in entries]
    return {t: reports[t] for t in order}, {t: predictions[t] for t in order}


def _evaluate_entry(encoder, entry, batch_size):
    preds = predict_task(encoder, entry.spec, entry.head, entry.test, batch_size)
    return _score(entry.spec, preds, entry.test), preds


def prediction_records(task_id: str, spec: TaskSpec, preds: Iterable) -> Iterable[Dict]:
    key = {HeadKind.NER: "spans", HeadKind.STS: "score", HeadKind.NLI: "label"}[spec.head_kind]
    for i, p in enumerate(preds):
        value = [list(s) for s in p] if spec.head_kind == HeadKind.NER else p
        yield {"task_id": task_id, "index": i, key: value}
