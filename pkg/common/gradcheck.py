"""
Backward-vs-central-difference checks for every differentiable primitive and
for the three composed task losses on a tiny one-layer encoder.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from common import autodiff as ad
from common.autodiff import (IGNORE_INDEX, Tensor, corrupted_derivative,
                             finite_diff_check, finite_diff_grads)
from common.encoder import EncoderConfig, encoder_forward, init_params
from common.errors import ConfigError
from common.heads import HeadKind, TaskSpec, init_head, ner_loss, nli_loss, sts_loss
from common.tlog import tlog

TOLERANCE = 1e-4
STEP = 1e-5
# Softmax over keys is invariant to a per-query constant, so the attention
# key bias has an identically zero gradient; it is checked against an
# absolute bound instead of the relative error.
STRUCTURAL_ZERO = ".attention.key.bias"
ZERO_BOUND = 1e-7

PRIMITIVES = (
    "add", "sub", "mul", "scale", "matmul", "sum", "mean", "gelu", "softmax",
    "layer_norm", "cross_entropy", "mse", "embedding", "reshape", "transpose",
    "masked_fill", "index",
)
COMPOSED = ("ner_loss", "sts_loss", "nli_loss")
ALL_CHECKS = PRIMITIVES + COMPOSED


@dataclass
class CheckResult:
    name: str
    error: float
    passed: bool


def _leaf(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted(y: Tensor, w: np.ndarray) -> Tensor:
    # random weights keep every output element in play
    return ad.sum_all(ad.mul(y, Tensor(w)))


def _unary(rng, op, shape=(3, 4)):
    x = _leaf(rng, *shape)
    sample = Tensor(x.data)
    w = rng.normal(size=np.shape(op(sample).data))
    return [x], lambda x: _weighted(op(x), w)


def _binary(rng, op, a_shape, b_shape):
    a, b = _leaf(rng, *a_shape), _leaf(rng, *b_shape)
    w = rng.normal(size=np.shape(op(Tensor(a.data), Tensor(b.data)).data))
    return [a, b], lambda a, b: _weighted(op(a, b), w)


def _primitive(name: str, rng: np.random.Generator):
    if name == "add":
        return _binary(rng, ad.add, (3, 4), (4,))
    if name == "sub":
        return _binary(rng, ad.sub, (3, 4), (3, 4))
    if name == "mul":
        return _binary(rng, ad.mul, (3, 4), (3, 1))
    if name == "scale":
        return _unary(rng, lambda x: ad.scale(x, 0.37))
    if name == "matmul":
        return _binary(rng, ad.matmul, (2, 3, 4), (4, 5))
    if name == "sum":
        x = _leaf(rng, 3, 4)
        return [x], lambda x: ad.sum_all(ad.gelu(x))
    if name == "mean":
        x = _leaf(rng, 3, 4)
        return [x], lambda x: ad.mean_all(ad.gelu(x))
    if name == "gelu":
        return _unary(rng, ad.gelu)
    if name == "softmax":
        return _unary(rng, lambda x: ad.softmax(x, axis=-1), (2, 3, 5))
    if name == "layer_norm":
        x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
        w = rng.normal(size=(3, 6))
        return [x, g, b], lambda x, g, b: _weighted(ad.layer_norm(x, g, b, 1e-12), w)
    if name == "cross_entropy":
        x = _leaf(rng, 5, 4)
        targets = [0, 3, IGNORE_INDEX, 1, 1]
        return [x], lambda x: ad.cross_entropy(x, targets)
    if name == "mse":
        return _binary(rng, lambda p, t: ad.mse(p, t), (6,), (6,))
    if name == "embedding":
        ids = np.array([[0, 2, 2], [4, 1, 0]])
        x = _leaf(rng, 5, 3)
        w = rng.normal(size=(2, 3, 3))
        return [x], lambda x: _weighted(ad.embedding(x, ids), w)
    if name == "reshape":
        return _unary(rng, lambda x: ad.gelu(ad.reshape(x, (4, 3))))
    if name == "transpose":
        return _unary(rng, lambda x: ad.gelu(ad.transpose(x, (2, 0, 1))), (2, 3, 4))
    if name == "masked_fill":
        mask = rng.random((3, 4)) < 0.5
        return _unary(rng, lambda x: ad.gelu(ad.masked_fill(x, mask, -2.0)))
    if name == "index":
        return _unary(rng, lambda x: ad.gelu(ad.index(x, (slice(None), 0, slice(1, 3)))), (2, 3, 4))
    raise ConfigError(f"unknown gradient check {name!r}")


class _Toy:
    """One-layer H=8 encoder with dropout off, plus batch tensors."""

    config = EncoderConfig(
        num_layers=1, hidden_dim=8, num_heads=2, ffn_dim=16, vocab_size=20,
        max_seq_len=8, dropout_rate=0.0, init_std=0.5,
    )

    def __init__(self, rng: np.random.Generator, pair: bool):
        self.encoder = init_params(self.config, int(rng.integers(1 << 31)))
        for p in self.encoder.tensors.values():
            # move norms off their identity initialisation
            p.data = p.data + 0.1 * rng.normal(size=p.shape)
        b, t = (2, 8) if pair else (1, 8)
        self.token_ids = rng.integers(4, self.config.vocab_size, size=(b, t))
        self.segment_ids = np.zeros((b, t), dtype=np.int64)
        if pair:
            self.segment_ids[:, t // 2:] = 1
        self.attention_mask = np.ones((b, t))


def _composed(name: str, rng: np.random.Generator):
    kind = {"ner_loss": HeadKind.NER, "sts_loss": HeadKind.STS, "nli_loss": HeadKind.NLI}[name]
    labels = {
        HeadKind.NER: ["O", "B-X", "I-X"],
        HeadKind.STS: [],
        HeadKind.NLI: ["entailment", "neutral", "contradiction"],
    }[kind]
    spec = TaskSpec(
        task_id=name, head_kind=kind, label_names=labels, batch_size=2,
        synthetic={"n_train": 1, "n_test": 1},
    )
    toy = _Toy(rng, pair=kind != HeadKind.NER)
    head = init_head(spec, toy.config.hidden_dim, 0.5, int(rng.integers(1 << 31)))
    if kind == HeadKind.NER:
        targets = rng.integers(0, 3, size=toy.token_ids.shape)
        targets[0, 0] = IGNORE_INDEX
        loss_fn = ner_loss
    elif kind == HeadKind.STS:
        # targets near the initial outputs keep the loss O(1)
        targets = rng.uniform(0.0, 1.0, size=len(toy.token_ids))
        loss_fn = sts_loss
    else:
        targets = rng.integers(0, 3, size=len(toy.token_ids))
        loss_fn = nli_loss

    def f(*_):
        hidden = encoder_forward(toy.encoder, toy)
        return loss_fn(hidden, head, targets)[0]

    return {**toy.encoder.tensors, **head.named_parameters(name)}, f


def _zero_check(f, x: Tensor, step: float) -> float:
    analytic, numeric = finite_diff_grads(f, x, step)
    worst = float(np.max(np.maximum(np.abs(analytic), np.abs(numeric))))
    return 0.0 if worst < ZERO_BOUND else worst / ZERO_BOUND


def check(name: str, seed: int = 0, step: float = STEP) -> float:
    """Max relative error over every differentiable input of check `name`."""
    rng = np.random.default_rng(seed)
    if name in COMPOSED:
        params, f = _composed(name, rng)
        tensors = list(params.values())
        errors = [
            _zero_check(f, p, step) if key.endswith(STRUCTURAL_ZERO) else finite_diff_check(f, p, step)
            for key, p in params.items()
        ]
    else:
        inputs, fn = _primitive(name, rng)
        tensors = inputs
        errors = []
        for i, x in enumerate(inputs):

            def f(arg, i=i):
                args = list(inputs)
                args[i] = arg
                return fn(*args)

            errors.append(finite_diff_check(f, x, step))
    for t in tensors:
        t.grad = None
    return float(max(errors))


def run_checks(
    names: Sequence[str],
    seed: int = 0,
    tolerance: float = TOLERANCE,
    corrupt: Optional[str] = None,
    debug: bool = False,
) -> List[CheckResult]:
    """Run the named checks; `corrupt` scales the backward of one op kind."""
    if not names:
        raise ConfigError("no gradient checks requested")
    unknown = [n for n in names if n not in ALL_CHECKS]
    if unknown:
        raise ConfigError(f"unknown gradient checks {unknown}")
    if corrupt and corrupt not in PRIMITIVES:
        raise ConfigError(f"cannot corrupt unknown op {corrupt!r}")

    results = []
    for name in names:
        if corrupt:
            with corrupted_derivative(corrupt):
                error = check(name, seed)
        else:
            error = check(name, seed)
        results.append(CheckResult(name, error, error < tolerance))
        if debug:
            tlog(f"gradcheck {name}: {error:.3e}", check=name, error=error)
    return results
