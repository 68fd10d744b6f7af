"""
Single-file model checkpoint, format version 1.

    magic      4 bytes   b"MTCB"
    version    u32 LE
    header     u32 LE length + UTF-8 JSON (sorted keys, compact separators):
               encoder config, task manifest, vocabulary, trainer state
    count      u32 LE number of tensors
    tensors    in lexicographic name order, each:
                 name length u16 LE, UTF-8 name, dtype u8 (1 = float64),
                 ndim u8, ndim x u64 LE dims, little-endian float64 payload

Identical states serialize to identical bytes. Writes go to a temporary file
in the target directory which is then renamed over the destination.
"""
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from common.autodiff import Tensor
from common.encoder import EncoderConfig, EncoderParams
from common.errors import CorruptError, FormatError, IoError, ShapeError, VersionError
from common.heads import HeadParams, TaskSpec
from common.tokenizer import Vocab

MAGIC = b"MTCB"
VERSION = 1
DTYPE_F64 = 1

_u16 = struct.Struct("<H")
_u32 = struct.Struct("<I")
_u64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    config: EncoderConfig
    tasks: List[TaskSpec]
    vocab: Vocab
    encoder: EncoderParams
    heads: Dict[str, HeadParams]
    trainer: Dict = field(default_factory=dict)
    optimizer_arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.encoder.named_parameters().items()}
        for spec in self.tasks:
            out.update({k: v.data for k, v in self.heads[spec.task_id].named_parameters(spec.task_id).items()})
        out.update(self.optimizer_arrays)
        return dict(sorted(out.items()))

    def header(self) -> Dict:
        return {
            "encoder": self.config.model_dump(mode="json"),
            "tasks": [
                {**spec.model_dump(mode="json"), "out_dim": spec.out_dim} for spec in self.tasks
            ],
            "vocab": list(self.vocab.tokens),
            "trainer": self.trainer,
        }


def encode(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = ckpt.tensors()
    parts = [MAGIC, _u32.pack(VERSION), _u32.pack(len(header)), header, _u32.pack(len(tensors))]
    for name, data in tensors.items():
        raw = name.encode("utf-8")
        data = np.asarray(data, dtype="<f8")
        parts.append(_u16.pack(len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F64, data.ndim))
        parts.extend(_u64.pack(d) for d in data.shape)
        parts.append(np.ascontiguousarray(data).tobytes())
    return b"".join(parts)


def expected_size(ckpt: Checkpoint) -> int:
    """Byte size of the encoded checkpoint, from the layout alone."""
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    size = 4 + 4 + 4 + len(header) + 4
    for name, data in ckpt.tensors().items():
        size += 2 + len(name.encode("utf-8")) + 1 + 1 + 8 * np.ndim(data) + 8 * np.size(data)
    return size


def save(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    path = Path(path)
    blob = encode(ckpt)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(blob)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, tensor: Optional[str] = None) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptError(
                f"truncated: needs {n} bytes at offset {self.pos}, file has {len(self.blob)}",
                tensor,
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct, tensor: Optional[str] = None):
        return fmt.unpack(self.take(fmt.size, tensor))[0]


def decode(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if len(blob) < 4 or r.take(4) != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    version = r.unpack(_u32)
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {VERSION}")
    try:
        header = json.loads(r.take(r.unpack(_u32)).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise CorruptError(f"unreadable header: {e}") from e

    arrays: Dict[str, np.ndarray] = {}
    for i in range(r.unpack(_u32)):
        raw = r.take(r.unpack(_u16))
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptError(f"name of tensor {i} is not valid UTF-8", raw.decode("utf-8", "replace")) from e
        dtype, ndim = struct.unpack("<BB", r.take(2, name))
        if dtype != DTYPE_F64:
            raise CorruptError(f"unsupported dtype code {dtype}", name)
        shape = tuple(r.unpack(_u64, name) for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        payload = r.take(8 * count, name)
        if name in arrays:
            raise CorruptError("tensor stored twice", name)
        arrays[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(blob):
        raise CorruptError(f"{len(blob) - r.pos} trailing bytes after the last tensor")

    return _assemble(header, arrays)


def _assemble(header: Dict, arrays: Dict[str, np.ndarray]) -> Checkpoint:
    try:
        config = EncoderConfig(**header["encoder"])
        tasks = [
            TaskSpec(**{k: v for k, v in t.items() if k != "out_dim"}) for t in header["tasks"]
        ]
        vocab = Vocab(tuple(header["vocab"]))
        trainer = header.get("trainer", {})
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptError(f"inconsistent header: {e}") from e

    prefix = EncoderParams.prefix
    enc = {k[len(prefix):]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith(prefix)}
    try:
        encoder = EncoderParams(config, enc)
    except ShapeError as e:
        raise CorruptError(str(e)) from e

    heads: Dict[str, HeadParams] = {}
    for spec, entry in zip(tasks, header["tasks"]):
        names = (f"head.{spec.task_id}.weight", f"head.{spec.task_id}.bias")
        for name in names:
            if name not in arrays:
                raise CorruptError("missing from tensor section", name)
        weight, bias = arrays[names[0]], arrays[names[1]]
        if weight.shape != (config.hidden_dim, spec.out_dim) or entry.get("out_dim") != spec.out_dim:
            raise CorruptError(f"shape {weight.shape} does not match the manifest", names[0])
        if bias.shape != (spec.out_dim,):
            raise CorruptError(f"shape {bias.shape} does not match the manifest", names[1])
        heads[spec.task_id] = HeadParams(Tensor(weight, requires_grad=True), Tensor(bias, requires_grad=True))

    known = set(encoder.named_parameters())
    for spec in tasks:
        known.update(heads[spec.task_id].named_parameters(spec.task_id))
    optimizer_arrays = {k: v for k, v in arrays.items() if k.startswith("optim.")}
    stray = set(arrays) - known - set(optimizer_arrays)
    if stray:
        raise CorruptError("not described by the manifest", sorted(stray)[0])

    return Checkpoint(config, tasks, vocab, encoder, heads, trainer, optimizer_arrays)


def load(path: Union[str, Path]) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    return decode(blob)
