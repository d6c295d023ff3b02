"""Fold inference-mode batch norm into the preceding conv / linear layer."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import nn
from .autodiff import Tape, Tensor
from .errors import ContractError, DimensionError
from .model import CTU_SIZE, MAX_QP, HfvitModel


@dataclass
class FusionReport:
    layers_fused: int
    max_abs_output_delta: float
    op_count_before: int
    op_count_after: int


def _fold(weight: np.ndarray, bias: np.ndarray | None, bn: nn.BatchNormLayer):
    if bn.mode != "infer":
        raise ContractError("only inference-mode batch norm can be fused")
    cout = weight.shape[0]
    if cout != bn.channels:
        raise DimensionError(f"layer has {cout} output channels, BN has {bn.channels}")
    # fold in float64, store in the layer's precision
    scale = bn.gamma.data.astype(np.float64) / np.sqrt(bn.running_var.data.astype(np.float64) + bn.eps)
    b = np.zeros(cout) if bias is None else bias.astype(np.float64)
    w_hat = weight.astype(np.float64) * scale.reshape((cout,) + (1,) * (weight.ndim - 1))
    b_hat = scale * (b - bn.running_mean.data) + bn.beta.data
    return w_hat.astype(weight.dtype), b_hat.astype(weight.dtype)


def fuse_conv_bn(conv: nn.Conv2dLayer, bn: nn.BatchNormLayer) -> nn.Conv2dLayer:
    bias = None if conv.bias is None else conv.bias.data
    w, b = _fold(conv.weight.data, bias, bn)
    return nn.Conv2dLayer(conv.kind, Tensor(w, requires_grad=True, dtype=w.dtype), conv.stride,
                          Tensor(b, requires_grad=True, dtype=b.dtype))


def fuse_linear_bn(layer: nn.Linear, bn: nn.BatchNormLayer) -> nn.Linear:
    bias = None if layer.bias is None else layer.bias.data
    w, b = _fold(layer.weight.data, bias, bn)
    return nn.Linear(Tensor(w, requires_grad=True, dtype=w.dtype), Tensor(b, requires_grad=True, dtype=b.dtype))


def probe_set(n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    x = rng.random((n, CTU_SIZE, CTU_SIZE, 1))
    qp = rng.integers(0, MAX_QP + 1, size=n)
    return x, qp


def count_ops(model: HfvitModel) -> int:
    """Primitive operations recorded for one CTU forward pass."""
    x, qp = probe_set(1, seed=0)
    with Tape() as tape:
        model(Tensor(x, dtype=model.pos_embed.dtype), qp)
    return len(tape)


def fuse_model(model: HfvitModel, n_probes: int = 100, seed: int = 0) -> tuple[HfvitModel, FusionReport]:
    """Return a fused copy of ``model`` plus a report measured on random probes."""
    if model.config.fused:
        raise ContractError("model is already fused")
    source = copy.deepcopy(model).eval()
    fused = copy.deepcopy(source)
    layers = 0
    for unit in fused.sep_units():
        if unit.bn is not None:
            unit.pw = fuse_conv_bn(unit.pw, unit.bn)
            unit.bn = None
            layers += 1
    for head in (fused.head1, fused.head2):
        if head.bn is not None:
            head.fc = fuse_linear_bn(head.fc, head.bn)
            head.bn = None
            layers += 1
    fused.config = fused.config.replace(fused=True)

    x, qp = probe_set(n_probes, seed)
    x = Tensor(x, dtype=model.pos_embed.dtype)
    delta = float(np.max(np.abs(source(x, qp).data - fused(x, qp).data)))
    report = FusionReport(layers, delta, count_ops(source), count_ops(fused))
    return fused, report
