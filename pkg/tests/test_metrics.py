import math

import numpy as np

import pytest

from common.errors import EvalError, ShapeError
from common.heads import Metric
from common.metrics import (SpanSet, accuracy, micro_f1, pearson, per_label_f1,
                            precision_recall, report_frame, score)


def test_micro_f1_exact_match():
    gold = [{(0, 5, "PROB"), (10, 14, "TEST")}, {(3, 7, "TREAT")}]
    pred = [{(0, 5, "PROB"), (10, 13, "TEST")}, {(3, 7, "TREAT"), (20, 22, "PROB")}]
    rep = micro_f1(pred, gold)
    print(rep)
    # tp 2, fp 2, fn 1
    assert rep.support == {"tp": 2, "fp": 2, "fn": 1}
    assert math.isclose(rep.value, 2 * 0.5 * (2 / 3) / (0.5 + 2 / 3))
    p, r = precision_recall(pred, gold)
    assert math.isclose(p, 0.5) and math.isclose(r, 2 / 3)


def test_micro_f1_degenerate_cases():
    assert micro_f1([set()], [set()]).value == 0.0
    assert micro_f1([{(0, 1, "X")}], [set()]).value == 0.0
    assert micro_f1([{(0, 1, "X")}], [{(0, 1, "X")}]).value == 1.0
    # the type is part of the match
    assert micro_f1([{(0, 1, "Y")}], [{(0, 1, "X")}]).value == 0.0
    with pytest.raises(ShapeError):
        micro_f1([set()], [])


def test_per_label_breakdown():
    labels = per_label_f1([{(0, 1, "A"), (2, 3, "B")}], [{(0, 1, "A")}])
    assert labels["A"]["f1"] == 1.0
    assert labels["B"]["f1"] == 0.0 and labels["B"]["fp"] == 1


def test_span_set_rejects_empty_spans():
    with pytest.raises(ShapeError):
        SpanSet([(3, 3, "A")])
    assert len(SpanSet([(0, 2, "A"), (0, 2, "A")])) == 1


def test_pearson():
    assert math.isclose(pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]).value, 1.0)
    assert math.isclose(pearson([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]).value, -1.0)
    with pytest.raises(EvalError):
        pearson([1.0], [1.0])
    with pytest.raises(EvalError):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ShapeError):
        pearson([1.0, 2.0], [1.0, 2.0, 3.0])


def test_accuracy():
    rep = accuracy(["a", "b", "a", "c"], ["a", "b", "c", "c"])
    assert rep.value == 0.75 and rep.support == {"n": 4, "correct": 3}
    with pytest.raises(ShapeError):
        accuracy([], [])
    with pytest.raises(ShapeError):
        accuracy(["a"], ["a", "b"])


def test_score_dispatch_and_frame():
    reports = {
        "nli": score(Metric.ACCURACY, ["x"], ["x"]),
        "sts": score(Metric.PEARSON, [0.0, 1.0], [0.0, 2.0]),
    }
    frame = report_frame(reports)
    assert list(frame.index) == ["nli", "sts"]
    assert frame.loc["nli", "metric"] == "accuracy"
    assert math.isclose(frame.loc["sts", "value"], 1.0)


def random_docs(rng, n_docs):
    docs = []
    for _ in range(n_docs):
        spans = []
        for _ in range(int(rng.integers(0, 5))):
            start = int(rng.integers(0, 6))
            spans.append((start, start + int(rng.integers(1, 3)), "AB"[int(rng.integers(2))]))
        docs.append(spans)
    return docs


def rescored_f1(pred, gold):
    tp = fp = fn = 0
    for p_doc, g_doc in zip(pred, gold):
        p_unique = []
        for s in p_doc:
            if s not in p_unique:
                p_unique.append(s)
        g_unique = []
        for s in g_doc:
            if s not in g_unique:
                g_unique.append(s)
        for s in p_unique:
            if s in g_unique:
                tp += 1
            else:
                fp += 1
        fn += sum(1 for s in g_unique if s not in p_unique)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def rescored_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_metrics_agree_with_rescoring():
    rng = np.random.default_rng(7)
    for i in range(1000):
        n_docs = int(rng.integers(1, 5))
        pred, gold = random_docs(rng, n_docs), random_docs(rng, n_docs)
        if abs(micro_f1(pred, gold).value - rescored_f1(pred, gold)) > 1e-12:
            raise AssertionError(f"instance {i}: micro-F1 disagrees for {pred} / {gold}")

        n = int(rng.integers(3, 12))
        x, y = list(rng.normal(size=n)), list(rng.normal(size=n))
        if abs(pearson(x, y).value - rescored_pearson(x, y)) > 1e-12:
            raise AssertionError(f"instance {i}: pearson disagrees")

        labels = [str(v) for v in rng.integers(0, 3, size=n)]
        guesses = [str(v) for v in rng.integers(0, 3, size=n)]
        hits = 0
        for a, b in zip(guesses, labels):
            hits += a == b
        if abs(accuracy(guesses, labels).value - hits / n) > 1e-12:
            raise AssertionError(f"instance {i}: accuracy disagrees")


def test_pearson_invariant_under_positive_affine_maps():
    rng = np.random.default_rng(11)
    for _ in range(200):
        x, y = rng.normal(size=8), rng.normal(size=8)
        a, b = float(rng.uniform(0.1, 10.0)), float(rng.uniform(-5.0, 5.0))
        base = pearson(x, y).value
        assert abs(pearson(a * x + b, y).value - base) < 1e-12
        assert abs(pearson(x, a * y + b).value - base) < 1e-12
        assert abs(pearson(-a * x + b, y).value + base) < 1e-12


def test_micro_f1_symmetric_in_pred_and_gold():
    rng = np.random.default_rng(13)
    for _ in range(500):
        n_docs = int(rng.integers(1, 5))
        pred, gold = random_docs(rng, n_docs), random_docs(rng, n_docs)
        forward, backward = micro_f1(pred, gold), micro_f1(gold, pred)
        assert abs(forward.value - backward.value) < 1e-12
        assert forward.support["fp"] == backward.support["fn"]
