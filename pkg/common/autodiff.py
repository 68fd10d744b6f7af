"""
Reverse-mode automatic differentiation over dense float64 tensors.

Operations executed while a `Tape` is active are recorded in an append-only
node list; `backward` walks that list once, in reverse id order, and
accumulates gradients into every leaf tensor created with
`requires_grad=True`. Outside a tape nothing is recorded and every result is
a plain constant tensor, which is how inference runs.

gelu uses the tanh approximation and its backward is the exact derivative of
that approximation.
"""
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import (Callable, Dict, Iterable, Iterator, List, Optional,
                    Sequence, Tuple, Union)

import numpy as np

from common.errors import (EmptyLossError, LabelError, NumericError,
                           OracleError, PreconditionError, ShapeError,
                           StateError)

IGNORE_INDEX = -100
GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715
# denominator floor of the finite-difference relative error
FD_FLOOR = 1e-8

ArrayLike = Union[np.ndarray, float, int, Sequence]
Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_tapes: List["Tape"] = []
_vjp_faults: Dict[str, float] = {}


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(data, dtype=np.float64)
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        t.tape = None
        return t

    def __repr__(self) -> str:
        return f"<Tensor shape={self.shape} requires_grad={self.requires_grad} node={self.node_id}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __add__(self, other: "Operand") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: "Operand") -> "Tensor":
        return add(other, self)

    def __sub__(self, other: "Operand") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: "Operand") -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: "Operand") -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: "Operand") -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


Operand = Union[Tensor, float, int, np.ndarray]


@dataclass
class Node:
    kind: str
    inputs: Tuple[Optional[int], ...]
    vjp: Optional[Vjp] = None
    leaf: Optional[Tensor] = None


class Tape:
    """Append-only record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._leaf_ids: Dict[int, int] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _input_id(self, t: Tensor) -> Optional[int]:
        if t.tape is self and t.node_id is not None:
            return t.node_id
        if not t.requires_grad:
            return None
        key = id(t)
        if key not in self._leaf_ids:
            self._leaf_ids[key] = self._append(Node("leaf", (), leaf=t))
        return self._leaf_ids[key]

    def record(
        self, kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Vjp
    ) -> Tensor:
        if self.consumed:
            raise StateError("tape already consumed by backward(); start a new forward pass")
        ids = tuple(self._input_id(t) for t in inputs)
        result = Tensor._wrap(out)
        if all(i is None for i in ids):
            return result
        result.node_id = self._append(Node(kind, ids, vjp))
        result.tape = self
        return result

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1 or loss.ndim != 0:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise StateError("loss is not on this tape")
        if self.consumed:
            raise StateError("backward() already ran on this tape")
        self.consumed = True

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.leaf is not None:
                leaf = node.leaf
                leaf.grad = (
                    np.array(g, dtype=np.float64)
                    if leaf.grad is None
                    else leaf.grad + g
                )
                continue

            in_grads = node.vjp(g)  # type: ignore
            factor = _vjp_faults.get(node.kind)
            for in_id, gi in zip(node.inputs, in_grads):
                if in_id is None or gi is None:
                    continue
                if factor is not None:
                    gi = gi * factor
                grads[in_id] = gi if in_id not in grads else grads[in_id] + gi


def active_tape() -> Optional[Tape]:
    return _tapes[-1] if _tapes else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Evaluate without recording, even inside an enclosing tape."""
    saved = list(_tapes)
    _tapes.clear()
    try:
        yield
    finally:
        _tapes.extend(saved)


@contextmanager
def corrupted_derivative(kind: str, factor: float = 1.5) -> Iterator[None]:
    """Fault-injection hook: scales the backward of every `kind` node."""
    _vjp_faults[kind] = factor
    try:
        yield
    finally:
        _vjp_faults.pop(kind, None)


def backward(loss: Tensor) -> None:
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise StateError("loss is not on a tape")
    loss.tape.backward(loss)


def _as_tensor(x: Operand) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Vjp) -> Tensor:
    tape = active_tape()
    if tape is None:
        return Tensor._wrap(out)
    return tape.record(kind, inputs, out, vjp)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e
    return _record(
        "add",
        (a, b),
        out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from e
    return _record(
        "sub",
        (a, b),
        out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e
    return _record(
        "mul",
        (a, b),
        out,
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(x: Tensor, c: float) -> Tensor:
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    return _record(
        "matmul",
        (a, b),
        out,
        lambda g: (
            _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
            _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape),
        ),
    )


def sum_all(x: Tensor) -> Tensor:
    return _record(
        "sum",
        (x,),
        np.asarray(x.data.sum()),
        lambda g: (np.broadcast_to(g, x.shape),),
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _record(
        "mean",
        (x,),
        np.asarray(x.data.sum() / n),
        lambda g: (np.broadcast_to(g / n, x.shape),),
    )


def gelu(x: Tensor) -> Tensor:
    v = x.data
    inner = GELU_C * (v + GELU_K * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def vjp(g: np.ndarray):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (
            1.0 + 3.0 * GELU_K * v * v
        )
        return (g * d,)

    return _record("gelu", (x,), out, vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), y, vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must match last dimension {h}"
        )
    if eps <= 0:
        raise PreconditionError("layer_norm eps must be positive")

    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g: np.ndarray):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", (x, gamma, beta), out, vjp)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not IGNORE_INDEX."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N x C] logits, got {logits.shape}")
    n, c = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for {n} rows")

    keep = t != IGNORE_INDEX
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise EmptyLossError("every target is ignored")
    kept_t = t[keep]
    if np.any(kept_t < 0) or np.any(kept_t >= c):
        bad = int(kept_t[(kept_t < 0) | (kept_t >= c)][0])
        raise LabelError(f"target {bad} outside [0, {c})")

    rows = np.nonzero(keep)[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[rows, kept_t].sum() / n_kept

    def vjp(g: np.ndarray):
        grad = np.exp(log_p)
        grad[rows, kept_t] -= 1.0
        grad[~keep] = 0.0
        return (grad * (g / n_kept),)

    return _record("cross_entropy", (logits,), np.asarray(loss), vjp)


def mse(pred: Tensor, target: Operand) -> Tensor:
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    if pred.size < 1:
        raise ShapeError("mse needs at least one element")
    n = pred.size
    diff = pred.data - target.data
    out = np.asarray((diff * diff).sum() / n)
    return _record(
        "mse",
        (pred, target),
        out,
        lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n),
    )


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table`; ids are integer positions, not differentiable."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise LabelError(f"embedding id outside [0, {rows})")
    out = table.data[ids]

    def vjp(g: np.ndarray):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding", (table,), out, vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from e
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} do not permute rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _record(
        "transpose",
        (x,),
        np.transpose(x.data, axes),
        lambda g: (np.transpose(g, inverse),),
    )


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _record(
        "masked_fill",
        (x,),
        np.where(mask, value, x.data),
        lambda g: (np.where(mask, 0.0, g),),
    )


def index(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing, e.g. x[:, 0, :]."""
    out = x.data[key]

    def vjp(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _record("index", (x,), np.array(out), vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return mul(x, Tensor._wrap(keep))


def sgd_step(params: Union[Dict[str, Tensor], Iterable[Tensor]], alpha: float) -> None:
    """param <- param - alpha * grad, then the gradient is cleared."""
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    for p in tensors:
        if p.grad is None:
            raise StateError("sgd_step: parameter has no gradient")
    for p in tensors:
        p.data = p.data - alpha * p.grad
        p.grad = None


def _evaluate(f: Callable[[Tensor], Tensor], x: Tensor) -> float:
    with no_tape():
        return f(x).item()


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5
) -> float:
    """Max relative error between backward() and central differences of f at x,
    |a - c| / max(|a|, |c|, FD_FLOOR) per element."""
    analytic, numeric = finite_diff_grads(f, x, step)
    if not analytic.size:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FD_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_diff_grads(
    f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5
) -> Tuple[np.ndarray, np.ndarray]:
    """(backward gradient, central-difference gradient) of f at x, flattened."""
    if not step > 0:
        raise PreconditionError(f"finite difference step must be positive, got {step}")
    if not x.requires_grad:
        raise PreconditionError("finite_diff_check needs a leaf tensor with requires_grad")

    x.grad = None
    with Tape():
        y = f(x)
        backward(y)
    analytic = (
        np.zeros_like(x.data) if x.grad is None else np.array(x.grad)
    ).reshape(-1)
    x.grad = None

    base = _evaluate(f, x)
    if _evaluate(f, x) != base:
        raise OracleError("function is not deterministic across repeated calls")

    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = _evaluate(f, x)
        flat[i] = orig - step
        f_minus = _evaluate(f, x)
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * step)
    return analytic, numeric
