import time
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np
from pandas import DataFrame as df

from common import autodiff as ad
from common.checkpoint import Checkpoint, load
from common.encoder import EncoderParams, encoder_forward, parameter_count
from common.errors import ConfigError
from common.heads import HeadKind, HeadParams
from common.tlog import tlog
from common.tokenizer import CLS_ID, RESERVED, SEP_ID
from runners.base import Runner, display


class _Inputs:
    def __init__(self, token_ids: np.ndarray):
        self.token_ids = token_ids
        self.segment_ids = np.zeros_like(token_ids)
        self.attention_mask = np.ones(token_ids.shape)


def bench_inputs(ckpt: Checkpoint, n_inputs: int, batch_size: int, seed: int) -> List[_Inputs]:
    """Full-length single-segment sequences of random vocabulary pieces."""
    rng = np.random.default_rng(seed)
    t = ckpt.config.max_seq_len
    ids = rng.integers(len(RESERVED), len(ckpt.vocab), size=(n_inputs, t))
    ids[:, 0] = CLS_ID
    ids[:, -1] = SEP_ID
    return [_Inputs(ids[i : i + batch_size]) for i in range(0, n_inputs, batch_size)]


class ForwardCounter:
    """Counts encoder forwards per input row."""

    def __init__(self, encoder: EncoderParams):
        self.encoder = encoder
        self.count = 0

    def __call__(self, batch) -> ad.Tensor:
        self.count += len(batch.token_ids)
        return encoder_forward(self.encoder, batch)


def apply_head(kind: HeadKind, hidden: ad.Tensor, head: HeadParams) -> np.ndarray:
    x = hidden if kind == HeadKind.NER else ad.index(hidden, (slice(None), 0, slice(None)))
    return (ad.matmul(x, head.weight) + head.bias).data


def shared_pass(forward: ForwardCounter, ckpt: Checkpoint, batches) -> None:
    for batch in batches:
        hidden = forward(batch)
        for spec in ckpt.tasks:
            apply_head(spec.head_kind, hidden, ckpt.heads[spec.task_id])


def isolated_pass(forward: ForwardCounter, ckpt: Checkpoint, batches) -> None:
    for batch in batches:
        for spec in ckpt.tasks:
            apply_head(spec.head_kind, forward(batch), ckpt.heads[spec.task_id])


def median_seconds(fn: Callable[[], None], warmup: int, repetitions: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


class BenchRunner(Runner):
    """Shared-encoder inference against one encoder forward per head."""

    def __init__(self, data: Dict, debug=False):
        super().__init__("Bench", data, debug)
        try:
            self.checkpoint = Path(data["checkpoint"])
        except (KeyError, TypeError) as e:
            raise ConfigError("[ERROR] bench must receive a checkpoint path") from e
        bench = self.config.bench
        self.n_inputs = data.get("n_inputs") if data.get("n_inputs") is not None else bench.n_inputs
        if self.n_inputs < 1:
            raise ConfigError(f"bench needs at least one input, got {self.n_inputs}")

    def measure(self, ckpt: Checkpoint) -> Dict:
        bench = self.config.bench
        n = len(ckpt.tasks)
        if n < 2:
            tlog(f"checkpoint has {n} head; shared and isolated modes coincide")
        batches = bench_inputs(ckpt, self.n_inputs, bench.batch_size, self.config.trainer.seed)

        shared = ForwardCounter(ckpt.encoder)
        shared_pass(shared, ckpt, batches)
        isolated = ForwardCounter(ckpt.encoder)
        isolated_pass(isolated, ckpt, batches)
        forwards = (shared.count, isolated.count)

        shared_s = median_seconds(
            lambda: shared_pass(shared, ckpt, batches), bench.warmup, bench.repetitions
        )
        isolated_s = median_seconds(
            lambda: isolated_pass(isolated, ckpt, batches), bench.warmup, bench.repetitions
        )

        encoder_params = parameter_count(ckpt.config)
        head_params = sum(h.weight.size + h.bias.size for h in ckpt.heads.values())
        return {
            "heads": n,
            "inputs": self.n_inputs,
            "shared_forwards": forwards[0],
            "isolated_forwards": forwards[1],
            "forward_ratio": forwards[1] / forwards[0],
            "shared_seconds": shared_s,
            "isolated_seconds": isolated_s,
            "speedup": isolated_s / shared_s,
            "shared_parameters": encoder_params + head_params,
            "isolated_parameters": n * encoder_params + head_params,
            "parameter_ratio": (n * encoder_params + head_params) / (encoder_params + head_params),
        }

    async def run(self) -> bool:
        ckpt = load(self.checkpoint)
        result = self.measure(ckpt)
        tlog(
            f"shared encoder: {result['forward_ratio']:.0f}x fewer encoder forwards, {result['speedup']:.2f}x faster",
            **result,
        )
        display("inference benchmark", df([result]).T.rename(columns={0: "value"}))
        return True
