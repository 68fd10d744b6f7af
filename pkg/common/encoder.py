"""
Shared BERT-style transformer feature encoder.

Embeddings (token + learned absolute position + segment) are layer-normed,
then each layer applies multi-head self-attention with an additive -1e9
padding mask, a residual connection and layer norm, followed by a gelu
feed-forward block with its own residual and layer norm. Position 0 of the
output is the [CLS] representation consumed by the pair-level heads.
"""
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import truncnorm

from common import autodiff as ad
from common.autodiff import Tensor
from common.errors import LabelError, ShapeError

MASK_VALUE = -1e9


class EncoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_layers: int = Field(2, ge=0)
    hidden_dim: int = Field(64, ge=1)
    num_heads: int = Field(4, ge=1)
    ffn_dim: int = Field(256, ge=1)
    vocab_size: int = Field(1024, ge=5)
    max_seq_len: int = Field(128, ge=3)
    num_segments: int = Field(2, ge=1)
    dropout_rate: float = Field(0.1, ge=0.0, lt=1.0)
    init_std: float = Field(0.02, ge=0.0)
    layer_norm_eps: float = Field(1e-12, gt=0.0)

    @model_validator(mode="after")
    def _heads_divide_hidden(self) -> "EncoderConfig":
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


def parameter_shapes(config: EncoderConfig) -> Dict[str, Tuple[int, ...]]:
    h, f = config.hidden_dim, config.ffn_dim
    shapes: Dict[str, Tuple[int, ...]] = {
        "embeddings.token": (config.vocab_size, h),
        "embeddings.position": (config.max_seq_len, h),
        "embeddings.segment": (config.num_segments, h),
        "embeddings.norm.gamma": (h,),
        "embeddings.norm.beta": (h,),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}"
        for proj in ("query", "key", "value", "output"):
            shapes[f"{p}.attention.{proj}.weight"] = (h, h)
            shapes[f"{p}.attention.{proj}.bias"] = (h,)
        shapes[f"{p}.attention.norm.gamma"] = (h,)
        shapes[f"{p}.attention.norm.beta"] = (h,)
        shapes[f"{p}.ffn.inner.weight"] = (h, f)
        shapes[f"{p}.ffn.inner.bias"] = (f,)
        shapes[f"{p}.ffn.outer.weight"] = (f, h)
        shapes[f"{p}.ffn.outer.bias"] = (h,)
        shapes[f"{p}.ffn.norm.gamma"] = (h,)
        shapes[f"{p}.ffn.norm.beta"] = (h,)
    return dict(sorted(shapes.items()))


def parameter_count(config: EncoderConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(config).values()))


class EncoderParams:
    """The shared parameter set, keyed by canonical name."""

    prefix = "encoder."

    def __init__(self, config: EncoderConfig, tensors: Dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(tensors) != set(expected):
            raise ShapeError(
                f"encoder parameters differ from config: missing {sorted(set(expected) - set(tensors))}, unexpected {sorted(set(tensors) - set(expected))}"
            )
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name} has shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = dict(sorted(tensors.items()))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def named_parameters(self) -> Dict[str, Tensor]:
        return {self.prefix + k: v for k, v in self.tensors.items()}

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config,
            {k: Tensor(v.data, requires_grad=True) for k, v in self.tensors.items()},
        )


def truncated_normal(
    rng: np.random.Generator, shape: Tuple[int, ...], std: float
) -> np.ndarray:
    """Mean 0, standard deviation `std` before truncation at +-2 sigma."""
    if std == 0.0:
        return np.zeros(shape)
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    rng = np.random.default_rng(seed)
    tensors: Dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith(".bias") or name.endswith(".beta"):
            data = np.zeros(shape)
        else:
            data = truncated_normal(rng, shape, config.init_std)
        tensors[name] = Tensor(data, requires_grad=True)
    return EncoderParams(config, tensors)


class _Dropout:
    """Per-step dropout streams derived from (seed, step, layer, site)."""

    def __init__(self, rate: float, key: Optional[Sequence[int]]):
        self.rate = rate
        self.key = tuple(key) if key is not None else None

    def __call__(self, x: Tensor, layer: int, site: int) -> Tensor:
        if self.key is None or self.rate == 0.0:
            return x
        rng = np.random.default_rng([*self.key, layer + 1, site])
        return ad.dropout(x, self.rate, rng)


def _linear(x: Tensor, params: EncoderParams, name: str) -> Tensor:
    return ad.matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]


def _attention(
    x: Tensor, params: EncoderParams, layer: int, mask_bias: Tensor, drop: _Dropout
) -> Tensor:
    cfg = params.config
    b, t, h = x.shape
    heads, d = cfg.num_heads, cfg.head_dim
    p = f"layers.{layer}.attention"

    def split(y: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(y, (b, t, heads, d)), (0, 2, 1, 3))

    q = split(_linear(x, params, f"{p}.query"))
    k = split(_linear(x, params, f"{p}.key"))
    v = split(_linear(x, params, f"{p}.value"))

    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    probs = drop(ad.softmax(scores + mask_bias, axis=-1), layer, 1)
    context = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, t, h))
    return _linear(context, params, f"{p}.output")


def _layer(
    x: Tensor, params: EncoderParams, layer: int, mask_bias: Tensor, drop: _Dropout
) -> Tensor:
    eps = params.config.layer_norm_eps
    p = f"layers.{layer}"

    attended = drop(_attention(x, params, layer, mask_bias, drop), layer, 2)
    x = ad.layer_norm(
        x + attended, params[f"{p}.attention.norm.gamma"], params[f"{p}.attention.norm.beta"], eps
    )
    inner = ad.gelu(_linear(x, params, f"{p}.ffn.inner"))
    outer = drop(_linear(inner, params, f"{p}.ffn.outer"), layer, 3)
    return ad.layer_norm(
        x + outer, params[f"{p}.ffn.norm.gamma"], params[f"{p}.ffn.norm.beta"], eps
    )


def encoder_forward(
    params: EncoderParams,
    batch,
    train_mode: bool = False,
    dropout_key: Optional[Sequence[int]] = None,
) -> Tensor:
    """Hidden states [B x T x H] for a batch carrying token_ids, segment_ids
    and attention_mask arrays. Dropout runs only in train mode and draws from
    streams keyed by `dropout_key` (typically (seed, step))."""
    cfg = params.config
    token_ids = np.asarray(batch.token_ids, dtype=np.int64)
    segment_ids = np.asarray(batch.segment_ids, dtype=np.int64)
    mask = np.asarray(batch.attention_mask, dtype=np.float64)
    if token_ids.ndim != 2:
        raise ShapeError(f"token ids must be [B x T], got {token_ids.shape}")
    b, t = token_ids.shape
    if t > cfg.max_seq_len:
        raise ShapeError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size):
        raise LabelError(f"token id outside [0, {cfg.vocab_size})")

    drop = _Dropout(cfg.dropout_rate, dropout_key if train_mode else None)
    positions = np.broadcast_to(np.arange(t), (b, t))
    x = (
        ad.embedding(params["embeddings.token"], token_ids)
        + ad.embedding(params["embeddings.position"], positions)
        + ad.embedding(params["embeddings.segment"], segment_ids)
    )
    x = ad.layer_norm(
        x, params["embeddings.norm.gamma"], params["embeddings.norm.beta"], cfg.layer_norm_eps
    )
    x = drop(x, -1, 0)

    mask_bias = Tensor((1.0 - mask)[:, None, None, :] * MASK_VALUE)
    for layer in range(cfg.num_layers):
        x = _layer(x, params, layer, mask_bias, drop)
    return x
