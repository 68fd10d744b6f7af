from pathlib import Path

import numpy as np
import pytest

from common.config import load_run_config
from common.encoder import EncoderConfig, init_params
from common.evaluation import evaluate_registry
from common.heads import TaskSpec
from common.schedule import TrainerConfig, build_registry, round_robin_train
from runners.base import prepare_tasks
from runners.compare import BASELINE_GAP, multitask_vs_single

ROOT = Path(__file__).resolve().parent.parent

# scores the shared model must reach on the desk-scale plan
FLOORS = {"ner": 0.90, "sts": 0.85, "nli": 0.90}


@pytest.mark.devtest
def test_shared_encoder_loss_falls_on_every_task():
    encoder_cfg = EncoderConfig(num_layers=1, hidden_dim=32, num_heads=4, ffn_dim=64,
                                vocab_size=300, max_seq_len=32, dropout_rate=0.0)
    specs = [
        TaskSpec(task_id="ner", head_kind="NER", label_names=["O", "B-PROB", "I-PROB", "B-TEST", "I-TEST"],
                 batch_size=16, synthetic={"n_train": 400, "n_test": 100, "seed": 1, "vocab_size": 40}),
        TaskSpec(task_id="sts", head_kind="STS", batch_size=16,
                 synthetic={"n_train": 400, "n_test": 100, "seed": 2, "vocab_size": 40}),
        TaskSpec(task_id="nli", head_kind="NLI", label_names=["entailment", "neutral", "contradiction"],
                 batch_size=16, synthetic={"n_train": 400, "n_test": 100, "seed": 3, "vocab_size": 40}),
    ]
    _, prepared = prepare_tasks(specs, encoder_cfg)
    cfg = TrainerConfig(optimizer="adam", alpha=2e-3, outer_loops=8, seed=1)
    encoder = init_params(encoder_cfg, 1)
    registry = build_registry(prepared, encoder_cfg, 1)
    log = round_robin_train(encoder, registry, cfg)

    frame = log.frame()
    first = frame[frame.outer_loop == 0].groupby("task_id").loss.mean()
    last = frame[frame.outer_loop == cfg.outer_loops - 1].groupby("task_id").loss.mean()
    print(first, last)
    assert np.all(last < first)

    reports, _ = evaluate_registry(registry, encoder)
    print({k: v.value for k, v in reports.items()})
    assert reports["ner"].value > 0.3
    assert reports["sts"].value > 0.2


@pytest.mark.devtest
def test_multitask_matches_single_task_on_desk_plan():
    cfg = load_run_config(ROOT / "mtplan.toml")
    report = multitask_vs_single(cfg)
    print(report)
    for task_id, floor in FLOORS.items():
        row = report.loc[task_id]
        if row.multitask < floor:
            raise AssertionError(f"{task_id}: multitask {row.metric} {row.multitask:.4f} below {floor}")
        if row.delta < -BASELINE_GAP:
            raise AssertionError(
                f"{task_id}: multitask {row.multitask:.4f} trails single-task {row.single_task:.4f}"
            )
