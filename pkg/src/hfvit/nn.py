"""Differentiable layers used by the HFViT network.

All spatial tensors are channels-last. Functions accept an optional leading
batch axis: ``H x W x C`` and ``N x H x W x C`` are both valid for the
convolutions, ``T x E`` and ``... x T x E`` for attention.
"""

from __future__ import annotations

import math
from collections.abc import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

BN_EPS = 1e-6
LN_EPS = 1e-6
BN_MOMENTUM = 0.1


class Module:
    """Parameter container; parameters are discovered from attributes."""

    training: bool = False

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Every tensor the layer owns, parameters and buffers alike."""
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_tensors(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
            if isinstance(m, BatchNormLayer):
                m.mode = "train" if mode else "infer"
        return self

    def eval(self):
        return self.train(False)


def _param(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _buffer(data) -> Tensor:
    return Tensor(data)


# ----------------------------------------------------------------------------
# convolutions


class Conv2dLayer(Module):
    """Depthwise ``C x k x k`` or pointwise ``Cout x Cin x 1 x 1`` convolution."""

    def __init__(self, kind: str, weight, stride: int = 1, bias=None):
        if kind not in ("depthwise", "pointwise"):
            raise ValueError(f"unknown conv kind {kind!r}")
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.kind = kind
        self.stride = stride
        self.weight = weight if isinstance(weight, Tensor) else _param(weight)
        self.bias = None if bias is None else (bias if isinstance(bias, Tensor) else _param(bias))
        if kind == "pointwise" and (self.weight.ndim != 4 or self.weight.shape[2:] != (1, 1)):
            raise DimensionError(f"pointwise kernel must be Cout x Cin x 1 x 1, got {self.weight.shape}")
        if kind == "depthwise" and self.weight.ndim != 3:
            raise DimensionError(f"depthwise kernel must be C x k x k, got {self.weight.shape}")

    @property
    def padding(self) -> int:
        return (self.weight.shape[-1] - 1) // 2

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "depthwise":
            return depthwise_conv(x, self)
        return pointwise_conv(x, self)


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank - 1:
        return x.reshape((1,) + x.shape), True
    if x.ndim != rank:
        raise DimensionError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return x, False


def depthwise_conv(x: Tensor, layer: Conv2dLayer) -> Tensor:
    if layer.kind != "depthwise":
        raise ContractError("depthwise_conv needs a depthwise layer")
    xb, squeeze = _batched(x, 4)
    if xb.shape[-1] != layer.weight.shape[0]:
        raise DimensionError(f"input has {xb.shape[-1]} channels, kernel expects {layer.weight.shape[0]}")
    out = ad.depthwise_conv2d(xb, layer.weight, layer.stride)
    if layer.bias is not None:
        out = out + layer.bias
    return out.reshape(out.shape[1:]) if squeeze else out


def pointwise_conv(x: Tensor, layer: Conv2dLayer) -> Tensor:
    if layer.kind != "pointwise":
        raise ContractError("pointwise_conv needs a pointwise layer")
    cout, cin = layer.weight.shape[:2]
    if x.shape[-1] != cin:
        raise DimensionError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    kernel = layer.weight.reshape((cout, cin)).transpose()
    out = ad.matmul(x, kernel)
    if layer.bias is not None:
        out = out + layer.bias
    return out


# ----------------------------------------------------------------------------
# normalization


class BatchNormLayer(Module):
    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.running_mean = _buffer(np.zeros(channels))
        self.running_var = _buffer(np.ones(channels))
        self.eps = eps
        self.momentum = momentum
        self.mode = "infer"

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self)


def batch_norm(x: Tensor, layer: BatchNormLayer) -> Tensor:
    """Normalize over every axis but the last (channel) one.

    In train mode the batch statistics are used and the running statistics
    are updated in place with the layer's momentum.
    """
    if x.shape[-1] != layer.channels:
        raise DimensionError(f"input has {x.shape[-1]} channels, layer has {layer.channels}")
    if layer.mode == "infer":
        inv_std = 1.0 / np.sqrt(layer.running_var.data + layer.eps)
        xhat = (x - layer.running_mean.data) * inv_std.astype(x.dtype)
        return xhat * layer.gamma + layer.beta
    if x.size == 0:
        raise ContractError("batch_norm in train mode needs a non-empty batch")
    axes = tuple(range(x.ndim - 1))
    mu = ad.mean(x, axis=axes, keepdims=True)
    centred = x - mu
    var = ad.mean(centred * centred, axis=axes, keepdims=True)
    xhat = centred / ad.sqrt(var + layer.eps)
    m = layer.momentum
    layer.running_mean.data = ((1 - m) * layer.running_mean.data + m * mu.data.reshape(-1)).astype(
        layer.running_mean.dtype)
    layer.running_var.data = ((1 - m) * layer.running_var.data + m * var.data.reshape(-1)).astype(
        layer.running_var.dtype)
    return xhat * layer.gamma + layer.beta


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = LN_EPS):
        self.gamma = _param(np.ones(width))
        self.beta = _param(np.zeros(width))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self)


def layer_norm(x: Tensor, layer: LayerNorm, affine: bool = True) -> Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    centred = x - mu
    var = ad.mean(centred * centred, axis=-1, keepdims=True)
    xhat = centred / ad.sqrt(var + layer.eps)
    if not affine:
        return xhat
    return xhat * layer.gamma + layer.beta


# ----------------------------------------------------------------------------
# dense layers and activations


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored ``out x in``."""

    def __init__(self, weight, bias=None):
        self.weight = weight if isinstance(weight, Tensor) else _param(weight)
        self.bias = None if bias is None else (bias if isinstance(bias, Tensor) else _param(bias))

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self)


def linear(x: Tensor, layer: Linear) -> Tensor:
    if x.shape[-1] != layer.in_features:
        raise DimensionError(f"input width {x.shape[-1]} != layer in_features {layer.in_features}")
    out = ad.matmul(x, layer.weight.transpose())
    if layer.bias is not None:
        out = out + layer.bias
    return out


gelu = ad.gelu
relu = ad.relu
sigmoid = ad.sigmoid


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = rng.random(x.shape) >= p
    return x * (keep / (1.0 - p)).astype(x.dtype)


def philox(seed: int, *counter: int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and a position tuple."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, _mix(counter)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _mix(values) -> int:
    h = 0x9E3779B97F4A7C15
    for v in values:
        h = (h ^ (int(v) & 0xFFFFFFFFFFFFFFFF)) * 0xBF58476D1CE4E5B9 & 0xFFFFFFFFFFFFFFFF
    return h


# ----------------------------------------------------------------------------
# attention and pooling


class AttentionLayer(Module):
    """Multi-head self-attention with optional learned additive logit bias.

    ``rel_bias`` has shape ``heads x T x T`` (per-head tables) or
    ``1 x T x T`` (one table shared by all heads), or is ``None``.
    """

    def __init__(self, wq: Linear, wk: Linear, wv: Linear, wo: Linear, heads: int, rel_bias=None):
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.heads = heads
        self.rel_bias = None if rel_bias is None else (
            rel_bias if isinstance(rel_bias, Tensor) else _param(rel_bias))
        width = wq.out_features
        if width % heads:
            raise DimensionError(f"width {width} not divisible by {heads} heads")

    @property
    def width(self) -> int:
        return self.wq.out_features

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def __call__(self, tokens: Tensor, use_bias_B: bool = True) -> Tensor:
        return multi_head_attention(tokens, self, use_bias_B)


def multi_head_attention(tokens: Tensor, layer: AttentionLayer, use_bias_B: bool = True,
                         weights_out: list | None = None) -> Tensor:
    """``softmax(Q K^T / sqrt(d_h) [+ B]) V`` per head, concatenated, then ``W_o``.

    Pre-normalization is the caller's job. When ``weights_out`` is a list the
    attention matrices are appended to it.
    """
    t, e = tokens.shape[-2:]
    if e != layer.width:
        raise DimensionError(f"token width {e} != attention width {layer.width}")
    if use_bias_B and layer.rel_bias is not None and layer.rel_bias.shape[-1] != t:
        raise DimensionError(f"{t} tokens but relative bias is {layer.rel_bias.shape[-1]} x "
                             f"{layer.rel_bias.shape[-1]}")
    lead = tokens.shape[:-2]
    h, dh = layer.heads, layer.head_dim

    def split(x: Tensor) -> Tensor:
        x = x.reshape(lead + (t, h, dh))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return x.transpose(axes)

    q = split(linear(tokens, layer.wq))
    k = split(linear(tokens, layer.wk))
    v = split(linear(tokens, layer.wv))
    kt = k.transpose(tuple(range(len(lead) + 1)) + (len(lead) + 2, len(lead) + 1))
    logits = ad.matmul(q, kt) * (1.0 / math.sqrt(dh))
    if use_bias_B and layer.rel_bias is not None:
        logits = logits + layer.rel_bias
    attn = ad.softmax(logits, axis=-1)
    if weights_out is not None:
        weights_out.append(attn.data)
    ctx = ad.matmul(attn, v)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    ctx = ctx.transpose(axes).reshape(lead + (t, e))
    return linear(ctx, layer.wo)


def adaptive_avg_pool(window: Tensor) -> Tensor:
    """Pool a ``2 x 2 x C`` window (optionally batched) to one ``1 x C`` token."""
    if window.ndim < 3 or window.shape[-3:-1] != (2, 2):
        raise DimensionError(f"adaptive_avg_pool expects ... x 2 x 2 x C, got {window.shape}")
    lead = window.shape[:-3]
    flat = window.reshape(lead + (4, window.shape[-1]))
    return ad.mean(flat, axis=-2, keepdims=True)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes of ``[N x] H x W x C``."""
    return ad.mean(x, axis=(-3, -2))
