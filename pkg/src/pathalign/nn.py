"""Parameter containers and forward functions shared by the encoders and
the query-token extractor: linear maps, layer norm, multi-head attention,
and the pre-norm transformer block.

Parameters are plain dataclasses of Tensors so they can be walked
generically for optimization and checkpointing (`named_tensors`).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

INIT_STD = 0.02  # embedding tables, positional tables, query tokens


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class AttentionParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    out: LinearParams
    n_heads: int


@dataclass
class MlpParams:
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class BlockParams:
    """Pre-norm transformer block: attention and MLP sublayers."""

    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    mlp: MlpParams


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int,
                std: float | None = None) -> LinearParams:
    # Xavier scaling by default; at desk widths a fixed small std would
    # leave the residual blocks nearly transparent
    if std is None:
        std = math.sqrt(2.0 / (fan_in + fan_out))
    return LinearParams(
        w=Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True),
        b=Tensor(np.zeros(fan_out), requires_grad=True),
    )


def init_layer_norm(width: int) -> LayerNormParams:
    return LayerNormParams(
        gain=Tensor(np.ones(width), requires_grad=True),
        bias=Tensor(np.zeros(width), requires_grad=True),
    )


def init_attention(rng: np.random.Generator, width: int, n_heads: int,
                   std: float | None = None) -> AttentionParams:
    if width % n_heads != 0:
        raise DimensionError(f"width {width} not divisible by {n_heads} heads")
    return AttentionParams(
        q=init_linear(rng, width, width, std),
        k=init_linear(rng, width, width, std),
        v=init_linear(rng, width, width, std),
        out=init_linear(rng, width, width, std),
        n_heads=n_heads,
    )


def init_mlp(rng: np.random.Generator, width: int, hidden: int) -> MlpParams:
    return MlpParams(fc1=init_linear(rng, width, hidden), fc2=init_linear(rng, hidden, width))


def init_block(rng: np.random.Generator, width: int, n_heads: int, mlp_ratio: int = 4) -> BlockParams:
    return BlockParams(
        ln1=init_layer_norm(width),
        attn=init_attention(rng, width, n_heads),
        ln2=init_layer_norm(width),
        mlp=init_mlp(rng, width, mlp_ratio * width),
    )


def linear(x: Tensor, p: LinearParams) -> Tensor:
    return T.matmul(x, p.w) + p.b


def layer_norm(x: Tensor, p: LayerNormParams, eps: float = 1e-5) -> Tensor:
    return T.standardize(x, eps=eps) * p.gain + p.bias


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (..., T, D) -> (..., h, T, D/h)
    *batch, t, d = x.shape
    x = T.reshape(x, (*batch, t, n_heads, d // n_heads))
    return T.swapaxes(x, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., h, T, dh) -> (..., T, D)
    x = T.swapaxes(x, -3, -2)
    *batch, t, h, dh = x.shape
    return T.reshape(x, (*batch, t, h * dh))


def attention(p: AttentionParams, q_in: Tensor, k_in: Tensor, v_in: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes.

    Returns the attended values (..., Tq, D) and the softmax weights
    (..., h, Tq, Tk); weight rows sum to 1.
    """
    dh = q_in.shape[-1] // p.n_heads
    q = _split_heads(linear(q_in, p.q), p.n_heads)
    k = _split_heads(linear(k_in, p.k), p.n_heads)
    v = _split_heads(linear(v_in, p.v), p.n_heads)
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    mixed = _merge_heads(T.matmul(weights, v))
    return linear(mixed, p.out), weights


def mlp(x: Tensor, p: MlpParams) -> Tensor:
    return linear(T.gelu(linear(x, p.fc1)), p.fc2)


def block(x: Tensor, p: BlockParams) -> tuple[Tensor, Tensor]:
    """Pre-norm residual block; also returns the attention weights."""
    h = layer_norm(x, p.ln1)
    attended, weights = attention(p.attn, h, h, h)
    x = x + attended
    x = x + mlp(layer_norm(x, p.ln2), p.mlp)
    return x, weights


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses / lists / dicts of Tensors in declaration order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}")
    elif isinstance(obj, dict):
        for key in obj:
            yield from named_tensors(obj[key], f"{prefix}.{key}" if prefix else str(key))
    # ints, floats, None: not parameters


def trainable(obj) -> list[Tensor]:
    return [t for _, t in named_tensors(obj) if t.requires_grad]
