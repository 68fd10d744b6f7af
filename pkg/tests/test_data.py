import io

import numpy as np
import pytest

from common.data import (CONTRADICTION, DEFAULT_NER_LABELS, ENTAILMENT, NEUTRAL, NOT_ENTAILMENT,
                         TEST, TRAIN, BatchIterator, NerExample, PairExample, TaskDataset,
                         encode_dataset, load_dataset, make_batch, nli_relation, parse_conll, parse_pairs,
                         sts_score, synth_task, trigger_words, write_conll, write_pairs)
from common.errors import ConfigError, DataError, MtbError, ParseError
from common.heads import HeadKind, TaskSpec
from common.tokenizer import build_vocab


def test_parse_conll():
    text = "chest\tB-PROB\npain\tI-PROB\n\n\nno\tO\n"
    examples = parse_conll(io.StringIO(text))
    assert len(examples) == 2
    assert examples[0].text == "chest pain"
    assert examples[0].spans == [(0, 10, "PROB")]
    assert examples[1].tokens == ("no",)


@pytest.mark.parametrize(
    "text, line",
    [
        ("a\tO\nb\n", 2),
        ("a\tO\tO\n", 1),
        ("a\tO\n\nb c\tO\n", 3),
        ("a\tX-PROB\n", 1),
        ("\tO\n", 1),
    ],
)
def test_parse_conll_errors_name_the_line(text, line):
    with pytest.raises(ParseError) as e:
        parse_conll(io.StringIO(text))
    assert e.value.line_no == line


def test_parse_pairs():
    sts = parse_pairs(io.StringIO("a b\tb c\t2.5\n\nx\ty\t0\n"), HeadKind.STS)
    assert [ex.target for ex in sts] == [2.5, 0.0]
    nli = parse_pairs(io.StringIO("a\tb\tneutral\n"), HeadKind.NLI, [ENTAILMENT, NEUTRAL])
    assert nli[0].label == 1
    with pytest.raises(ParseError):
        parse_pairs(io.StringIO("a\tb\t5.1\n"), HeadKind.STS)
    with pytest.raises(ParseError):
        parse_pairs(io.StringIO("a\tb\tmaybe\n"), HeadKind.NLI, [ENTAILMENT, NEUTRAL])
    with pytest.raises(ParseError):
        parse_pairs(io.StringIO("a\tb\n"), HeadKind.STS)
    with pytest.raises(ConfigError):
        parse_pairs(io.StringIO(""), HeadKind.NER)


def test_written_files_parse_back(tmp_path):
    train, test = synth_task(HeadKind.NER, 4, 5, 2, 30)
    path = tmp_path / "ner.conll"
    with open(path, "w", encoding="utf-8") as f:
        write_conll(train.examples, f)
    with open(path, encoding="utf-8") as f:
        assert tuple(parse_conll(f)) == train.examples

    sts_train, _ = synth_task(HeadKind.STS, 4, 5, 2, 30)
    buf = io.StringIO()
    write_pairs(sts_train.examples, buf)
    buf.seek(0)
    assert [ex.target for ex in parse_pairs(buf, HeadKind.STS)] == [ex.target for ex in sts_train.examples]


def test_load_dataset_checks_tag_set(tmp_path):
    (tmp_path / "train.conll").write_text("a\tB-DRUG\nb\tI-DRUG\n", encoding="utf-8")
    (tmp_path / "test.conll").write_text("a\tO\n", encoding="utf-8")
    spec = TaskSpec(
        task_id="ner", head_kind="NER", label_names=DEFAULT_NER_LABELS, batch_size=2,
        train_path=tmp_path / "train.conll", test_path=tmp_path / "test.conll",
    )
    assert len(load_dataset(spec, TEST)) == 1
    with pytest.raises(DataError):
        load_dataset(spec, TRAIN)


def test_sts_score_and_nli_relation():
    assert sts_score("a b c", "a b c") == 5.0
    assert sts_score("a b", "c d") == 0.0
    # intersection 2 of union 4
    assert sts_score("a a b", "a b c") == 2.5
    assert nli_relation("a b no c", "b c no") == ENTAILMENT
    assert nli_relation("a b c", "a no") == CONTRADICTION
    assert nli_relation("a b c", "a d") == NEUTRAL


def test_synthetic_data_is_deterministic_and_consistent():
    a = synth_task(HeadKind.NER, 7, 20, 5, 40)
    assert a == synth_task(HeadKind.NER, 7, 20, 5, 40)
    assert a != synth_task(HeadKind.NER, 8, 20, 5, 40)

    table = trigger_words(["PROB", "TEST", "TREAT"])
    for ex in a[0].examples:
        for i, tag in enumerate(ex.tags):
            if tag.startswith("B-"):
                kind, k = table[ex.tokens[i - 1]]
                assert tag == "B-" + kind
                assert all(t == "I-" + kind for t in ex.tags[i + 1 : i + k])

    for ex in synth_task(HeadKind.STS, 1, 30, 1, 20)[0].examples:
        assert ex.target == sts_score(ex.text_a, ex.text_b)

    for ex in synth_task(HeadKind.NLI, 1, 30, 1, 20)[0].examples:
        assert ex.target == nli_relation(ex.text_a, ex.text_b)

    two_way = synth_task(HeadKind.NLI, 1, 30, 1, 20, [ENTAILMENT, NOT_ENTAILMENT])[0]
    assert {ex.target for ex in two_way.examples} <= {ENTAILMENT, NOT_ENTAILMENT}


def test_synth_task_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        synth_task(HeadKind.STS, 0, 0, 1, 20)
    with pytest.raises(ConfigError):
        synth_task(HeadKind.NLI, 0, 1, 1, 20, ["yes", "no"])


def test_batch_iterator_epochs_and_restore():
    it = BatchIterator(5, 2, seed=3)
    first = [next(it) for _ in range(3)]
    assert [len(b) for b in first] == [2, 2, 1]
    assert sorted(np.concatenate(first).tolist()) == [0, 1, 2, 3, 4]
    assert it.wraps == 0 and it.batches_per_epoch == 3

    state = it.state()
    ahead = [next(it).tolist() for _ in range(4)]
    assert it.wraps == 2

    again = BatchIterator(5, 2, seed=3)
    again.restore(state)
    assert [next(again).tolist() for _ in range(4)] == ahead

    once = BatchIterator(3, 2, seed=0, cycling=False)
    assert len(list(once)) == 2
    with pytest.raises(DataError):
        BatchIterator(0, 2, seed=0)


def test_make_batch_trims_padding():
    spec = TaskSpec(task_id="sts", head_kind="STS", batch_size=2, synthetic={"n_train": 3, "n_test": 1})
    data = [PairExample("w1 w2", "w2", 1.5), PairExample("w1", "w1", 5.0), PairExample("w3", "w2 w1", 0.0)]
    ds = TaskDataset("sts", TRAIN, tuple(data))
    vocab = build_vocab(["w1 w2 w3"], 15)
    encoded = encode_dataset(ds, spec, vocab, 16)
    batch = make_batch(encoded, [1, 0])
    # [CLS] w1 [SEP] w1 [SEP] vs [CLS] w1 w2 [SEP] w2 [SEP]
    assert batch.token_ids.shape == (2, 6)
    np.testing.assert_allclose(batch.targets, [5.0, 1.5])
    assert batch.attention_mask[0].tolist() == [1, 1, 1, 1, 1, 0]
    with pytest.raises(DataError):
        make_batch(encoded, [])


def test_ner_example_checks_lengths():
    with pytest.raises(DataError):
        NerExample(("a",), ("O", "O"), ((0, 1),))


def test_invalid_utf8_is_a_parse_error(tmp_path):
    (tmp_path / "train.tsv").write_bytes(b"a b\tb\t1.0\r\na\xff b\tc\t2.0\n")
    (tmp_path / "test.tsv").write_bytes(b"a b\tb\t1.0\r\n")
    spec = TaskSpec(
        task_id="sts", head_kind="STS", batch_size=2,
        train_path=tmp_path / "train.tsv", test_path=tmp_path / "test.tsv",
    )
    test = load_dataset(spec, TEST)
    assert test.examples[0].text_b == "b" and test.examples[0].target == 1.0

    with pytest.raises(ParseError) as e:
        load_dataset(spec, TRAIN)
    print(e.value)
    assert e.value.line_no == 2
    assert isinstance(e.value, MtbError) and e.value.exit_code == 3
