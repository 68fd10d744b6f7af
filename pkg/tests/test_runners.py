import json
from copy import deepcopy
from pathlib import Path

import pytest
import toml

from common.checkpoint import load
from common.config import clinical_shape_tasks, load_run_config, parse_run_config
from common.data import TEST, TRAIN, load_dataset, synth_task
from common.errors import ConfigError
from mtbert import main
from runners.bench import BenchRunner
from runners.compare import BASELINE_GAP, CompareRunner, multitask_vs_single, schedule_table
from runners.evaluate import EvalRunner
from runners.synth import SynthRunner
from runners.train import TrainRunner

ROOT = Path(__file__).resolve().parent.parent

PLAN = {
    "encoder": {
        "num_layers": 1, "hidden_dim": 8, "num_heads": 2, "ffn_dim": 16,
        "vocab_size": 200, "max_seq_len": 32,
    },
    "trainer": {"optimizer": "adam", "alpha": 1e-3, "outer_loops": 2, "seed": 3, "seeds": [1], "epochs": 1},
    "tasks": [
        {
            "task_id": "ner", "head_kind": "NER", "label_names": ["O", "B-PROB", "I-PROB"], "batch_size": 4,
            "synthetic": {"n_train": 8, "n_test": 4, "seed": 1, "vocab_size": 15},
        },
        {
            "task_id": "nli", "head_kind": "NLI", "label_names": ["entailment", "not_entailment"], "batch_size": 3,
            "synthetic": {"n_train": 6, "n_test": 4, "seed": 2, "vocab_size": 15},
        },
    ],
    "bench": {"n_inputs": 4, "batch_size": 2, "repetitions": 5, "warmup": 0},
}


def plan(**trainer):
    raw = deepcopy(PLAN)
    raw["trainer"].update(trainer)
    return parse_run_config(raw)


async def test_synth_writes_parseable_files(tmp_path):
    out = tmp_path / "data"
    await SynthRunner({"config": plan(), "out": str(out)}).run()
    for name in ("ner.train.conll", "ner.test.conll", "nli.train.tsv", "nli.test.tsv", "plan.toml"):
        if not (out / name).exists():
            raise AssertionError(f"synth did not write {name}")

    bound = load_run_config(out / "plan.toml")
    print(bound.tasks)
    assert bound.task_ids == ["ner", "nli"]
    for spec, raw in zip(bound.tasks, PLAN["tasks"]):
        assert spec.synthetic is None
        p = raw["synthetic"]
        train, test = synth_task(spec.head_kind, p["seed"], p["n_train"], p["n_test"], p["vocab_size"],
                                 raw["label_names"], spec.task_id)
        assert load_dataset(spec, TRAIN).examples == train.examples
        assert load_dataset(spec, TEST).examples == test.examples
    return True


async def test_train_eval_bench_compare(tmp_path):
    cfg = plan()
    ckpt = tmp_path / "model.ckpt"
    log = tmp_path / "train.ndjson"
    assert await TrainRunner({"config": cfg, "out": str(ckpt), "train_log": str(log)}).run()

    records = [json.loads(line) for line in log.read_text().splitlines()]
    # two outer loops of two round-robin iterations over two heads
    assert len(records) == 8
    assert [r["task_id"] for r in records[:4]] == ["ner", "nli", "ner", "nli"]

    preds = tmp_path / "preds.ndjson"
    assert await EvalRunner({"config": cfg, "checkpoint": str(ckpt), "predictions": str(preds)}).run()
    rows = [json.loads(line) for line in preds.read_text().splitlines()]
    assert len(rows) == 8
    assert {"spans"} <= set(rows[0]) and rows[0]["task_id"] == "ner"
    assert rows[-1]["label"] in ("entailment", "not_entailment")

    bench = BenchRunner({"config": cfg, "checkpoint": str(ckpt)})
    result = bench.measure(load(ckpt))
    print(result)
    assert result["shared_forwards"] == 4 and result["isolated_forwards"] == 8
    assert result["forward_ratio"] == 2.0
    assert result["isolated_parameters"] > result["shared_parameters"]
    assert await bench.run()

    assert await CompareRunner({"config": cfg}).run()
    return True


async def test_paused_run_resumes_to_identical_checkpoint(tmp_path):
    for schedule in ("round_robin", "proportional"):
        cfg = plan(schedule=schedule)
        whole, part, resumed = (tmp_path / f"{schedule}.{n}.ckpt" for n in ("whole", "part", "resumed"))
        await TrainRunner({"config": cfg, "out": str(whole)}).run()
        await TrainRunner({"config": cfg, "out": str(part), "max_steps": 3}).run()
        assert load(part).trainer["state"]["step"] == 3
        await TrainRunner({"config": cfg, "out": str(resumed), "resume": str(part)}).run()
        if whole.read_bytes() != resumed.read_bytes():
            raise AssertionError(f"{schedule}: resumed checkpoint differs from the uninterrupted one")
    return True


async def test_resume_registers_new_tasks_after_existing_heads(tmp_path):
    first = deepcopy(PLAN)
    first["tasks"] = first["tasks"][:1]
    part = tmp_path / "part.ckpt"
    await TrainRunner({"config": parse_run_config(first), "out": str(part), "max_steps": 2}).run()

    out = tmp_path / "grown.ckpt"
    await TrainRunner({"config": plan(), "out": str(out), "resume": str(part)}).run()
    grown = load(out)
    assert [t.task_id for t in grown.tasks] == ["ner", "nli"]
    assert grown.trainer["order"] == ["ner", "nli"]
    return True


async def test_single_task_baseline_writes_one_checkpoint_per_task(tmp_path):
    cfg = plan(schedule="single_task")
    out = tmp_path / "base.ckpt"
    assert await TrainRunner({"config": cfg, "out": str(out)}).run()
    for task in ("ner", "nli"):
        ckpt = load(tmp_path / f"base.{task}.ckpt")
        assert [t.task_id for t in ckpt.tasks] == [task]
        assert ckpt.trainer["schedule"] == "single_task"
    return True


def test_schedule_table():
    cfg = plan()
    table = schedule_table(cfg.tasks, [8, 6], seed=0)
    assert list(table["batches_per_epoch"]) == [2, 2]
    assert list(table["round_robin_updates"]) == [2, 2]
    assert table["proportional_simulated"].sum() == 4


def test_cli_exit_codes(tmp_path):
    plan_file = tmp_path / "plan.toml"
    with open(plan_file, "w", encoding="utf-8") as f:
        toml.dump(PLAN, f)

    assert main(["gradcheck", "--ops", "add,gelu"]) == 0
    assert main(["gradcheck", "--ops", "add", "--corrupt", "add"]) == 4
    assert main(["gradcheck", "--ops", "conv2d"]) == 2
    assert main(["train", "--out", str(tmp_path / "m.ckpt")]) == 2
    assert main(["eval", "--config", str(plan_file), "--checkpoint", str(tmp_path / "absent.ckpt")]) == 5
    assert main(["train", "--config", str(plan_file), "--out", str(tmp_path / "m.ckpt"), "--tasks", "zzz"]) == 2

    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert main(["eval", "--config", str(plan_file), "--checkpoint", str(tmp_path / "junk.ckpt")]) == 5


def test_cli_structured_log(tmp_path):
    log = tmp_path / "run.ndjson"
    assert main(["gradcheck", "--ops", "mse", "--log", str(log)]) == 0
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert any(r.get("check") == "mse" and r.get("passed") for r in records)


@pytest.mark.devtest
async def test_bench_eight_heads_share_one_forward(tmp_path):
    raw = toml.load(ROOT / "clinical_shape.toml")
    raw.pop("profile")
    raw["tasks"] = clinical_shape_tasks(seed=1)
    for task in raw["tasks"]:
        task["synthetic"].update(n_train=6, n_test=2)
    cfg = parse_run_config(raw)
    ckpt = tmp_path / "clinical.ckpt"
    assert await TrainRunner({"config": cfg, "out": str(ckpt), "max_steps": 0}).run()

    result = BenchRunner({"config": cfg, "checkpoint": str(ckpt)}).measure(load(ckpt))
    print(result)
    assert result["heads"] == 8
    assert result["forward_ratio"] == 8.0
    if result["speedup"] < 6.0:
        raise AssertionError(f"shared encoder only {result['speedup']:.2f}x faster than eight forwards")
    return True


async def test_compare_baseline_reports_every_task():
    cfg = plan()
    report = multitask_vs_single(cfg)
    print(report)
    assert list(report.index) == ["ner", "nli"]
    assert list(report.metric) == ["micro_f1", "accuracy"]
    # two outer loops of two batches match two single-task epochs
    assert list(report.epochs) == [2, 2]
    for _, row in report.iterrows():
        assert abs(row.delta - (row.multitask - row.single_task)) < 1e-12
        assert row.within_gap == (row.delta >= -BASELINE_GAP)

    assert await CompareRunner({"config": cfg, "baseline": True}).run()
    with pytest.raises(ConfigError):
        multitask_vs_single(plan(schedule="single_task"))
    return True
