import json
import struct

import numpy as np
import pytest

from common.checkpoint import Checkpoint, decode, encode, expected_size, load, save
from common.encoder import EncoderConfig, init_params
from common.errors import CorruptError, FormatError, IoError, VersionError
from common.evaluation import predict_task
from common.heads import TaskSpec
from common.schedule import TrainerConfig, TrainerState, build_registry, make_optimizer, round_robin_train
from runners.base import make_checkpoint, prepare_tasks

ENCODER = EncoderConfig(num_layers=1, hidden_dim=8, num_heads=2, ffn_dim=16, vocab_size=100, max_seq_len=24)


def trained():
    specs = [
        TaskSpec(task_id="sts", head_kind="STS", batch_size=2,
                 synthetic={"n_train": 4, "n_test": 3, "seed": 2, "vocab_size": 12}),
        TaskSpec(task_id="nli", head_kind="NLI", label_names=["entailment", "not_entailment"],
                 batch_size=2, synthetic={"n_train": 4, "n_test": 3, "seed": 3, "vocab_size": 12}),
    ]
    vocab, prepared = prepare_tasks(specs, ENCODER)
    cfg = TrainerConfig(optimizer="adam", alpha=1e-3, seed=4)
    encoder = init_params(ENCODER, 4)
    registry = build_registry(prepared, ENCODER, 4)
    optimizer = make_optimizer(cfg)
    state = TrainerState()
    round_robin_train(encoder, registry, cfg, optimizer, state)
    return make_checkpoint(encoder, registry, vocab, 4, "round_robin", state, optimizer), registry


def test_save_load_is_bit_exact(tmp_path):
    ckpt, _ = trained()
    path = tmp_path / "model.ckpt"
    save(ckpt, path)
    blob = path.read_bytes()
    assert blob == encode(ckpt)
    assert len(blob) == expected_size(ckpt)

    loaded = load(path)
    assert encode(loaded) == blob
    assert loaded.config == ckpt.config
    assert [t.task_id for t in loaded.tasks] == ["sts", "nli"]
    assert loaded.trainer["state"]["step"] == ckpt.trainer["state"]["step"]
    assert set(loaded.optimizer_arrays) == set(ckpt.optimizer_arrays)
    for name, data in ckpt.tensors().items():
        assert np.array_equal(loaded.tensors()[name], data), name


def test_loaded_model_predicts_identically(tmp_path):
    ckpt, registry = trained()
    save(ckpt, tmp_path / "m.ckpt")
    loaded = load(tmp_path / "m.ckpt")
    for entry in registry:
        tid = entry.spec.task_id
        assert predict_task(ckpt.encoder, entry.spec, ckpt.heads[tid], entry.test) == predict_task(
            loaded.encoder, loaded.tasks[registry.task_ids.index(tid)], loaded.heads[tid], entry.test
        )


def test_identical_states_give_identical_bytes():
    a, _ = trained()
    b, _ = trained()
    assert encode(a) == encode(b)


def test_decode_rejects_damaged_files():
    ckpt, _ = trained()
    blob = encode(ckpt)

    with pytest.raises(FormatError):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(VersionError):
        decode(blob[:4] + struct.pack("<I", 2) + blob[8:])

    with pytest.raises(CorruptError) as e:
        decode(blob[:-3])
    assert e.value.tensor == sorted(ckpt.tensors())[-1]

    with pytest.raises(CorruptError):
        decode(blob + b"\x00")


def test_stray_and_missing_tensors():
    ckpt, _ = trained()
    extra = Checkpoint(ckpt.config, ckpt.tasks, ckpt.vocab, ckpt.encoder, ckpt.heads,
                       ckpt.trainer, {"bogus": np.zeros(2)})
    with pytest.raises(CorruptError) as e:
        decode(encode(extra))
    assert e.value.tensor == "bogus"

    missing = Checkpoint(ckpt.config, ckpt.tasks[:1], ckpt.vocab, ckpt.encoder, ckpt.heads)
    blob = encode(missing)
    header_len = struct.unpack("<I", blob[8:12])[0]
    header = blob[12 : 12 + header_len]
    # put the dropped task back into the manifest only
    patched = header.replace(b'"tasks":[', b'"tasks":[' + _task_json(ckpt) + b",")
    rebuilt = blob[:8] + struct.pack("<I", len(patched)) + patched + blob[12 + header_len :]
    with pytest.raises(CorruptError) as e:
        decode(rebuilt)
    assert e.value.tensor == "head.nli.weight"


def _task_json(ckpt: Checkpoint) -> bytes:
    spec = ckpt.tasks[1]
    return json.dumps(
        {**spec.model_dump(mode="json"), "out_dim": spec.out_dim}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")


def test_missing_file_is_an_io_error(tmp_path):
    with pytest.raises(IoError):
        load(tmp_path / "absent.ckpt")
    ckpt, _ = trained()
    with pytest.raises(IoError):
        save(ckpt, tmp_path / "no" / "such" / "dir.ckpt")


def test_undecodable_tensor_name_is_corrupt():
    ckpt, _ = trained()
    blob = bytearray(encode(ckpt))
    header_len = struct.unpack("<I", bytes(blob[8:12]))[0]
    first_name = 12 + header_len + 4 + 2
    assert blob[first_name : first_name + 8] == b"encoder."
    blob[first_name] = 0xFF
    with pytest.raises(CorruptError) as e:
        decode(bytes(blob))
    print(e.value)
    assert e.value.exit_code == 5
    assert e.value.tensor.endswith(sorted(ckpt.tensors())[0][1:])
