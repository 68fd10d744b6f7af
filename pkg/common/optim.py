from typing import Dict, Optional, Tuple

import numpy as np

from common.autodiff import Tensor, sgd_step
from common.errors import StateError


class Optimizer:
    """Applies one update to the parameters it is handed and clears their
    gradients. Only the tensors passed to `step` are touched."""

    kind: str = ""

    def __init__(self, alpha: float):
        self.alpha = alpha

    def step(self, params: Dict[str, Tensor]) -> None:
        raise NotImplementedError

    def state(self) -> Tuple[Dict, Dict[str, np.ndarray]]:
        """(json-able scalars, named arrays) for checkpointing."""
        return {"kind": self.kind, "alpha": self.alpha}, {}

    def restore(self, scalars: Dict, arrays: Dict[str, np.ndarray]) -> None:
        pass


class Sgd(Optimizer):
    kind = "sgd"

    def step(self, params: Dict[str, Tensor]) -> None:
        sgd_step(params, self.alpha)


class Adam(Optimizer):
    kind = "adam"

    def __init__(
        self,
        alpha: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        super().__init__(alpha)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def step(self, params: Dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                raise StateError(f"adam: parameter {name} has no gradient")

        for name, p in params.items():
            g = p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1.0 - self.beta1) * g if m is None else self.beta1 * m + (1.0 - self.beta1) * g
            v = (1.0 - self.beta2) * g * g if v is None else self.beta2 * v + (1.0 - self.beta2) * g * g
            t = self.t.get(name, 0) + 1
            self.m[name], self.v[name], self.t[name] = m, v, t

            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - self.alpha * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None

    def state(self) -> Tuple[Dict, Dict[str, np.ndarray]]:
        scalars = {
            "kind": self.kind,
            "alpha": self.alpha,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": dict(sorted(self.t.items())),
        }
        arrays = {f"optim.m.{k}": v for k, v in self.m.items()}
        arrays.update({f"optim.v.{k}": v for k, v in self.v.items()})
        return scalars, arrays

    def restore(self, scalars: Dict, arrays: Dict[str, np.ndarray]) -> None:
        self.t = {k: int(v) for k, v in scalars.get("t", {}).items()}
        self.m = {
            k[len("optim.m."):]: np.array(v)
            for k, v in arrays.items()
            if k.startswith("optim.m.")
        }
        self.v = {
            k[len("optim.v."):]: np.array(v)
            for k, v in arrays.items()
            if k.startswith("optim.v.")
        }
        missing = set(self.t) ^ set(self.m)
        if missing or set(self.m) != set(self.v):
            raise StateError(f"adam moments inconsistent for {sorted(missing)}")


def optimizer_factory(
    kind: str,
    alpha: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    scalars: Optional[Dict] = None,
    arrays: Optional[Dict[str, np.ndarray]] = None,
) -> Optimizer:
    if kind == Sgd.kind:
        opt: Optimizer = Sgd(alpha)
    elif kind == Adam.kind:
        opt = Adam(alpha, beta1, beta2, eps)
    else:
        raise StateError(f"unknown optimizer {kind}")

    if scalars is not None:
        opt.restore(scalars, arrays or {})
    return opt
