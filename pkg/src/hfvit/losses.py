"""Hierarchical masked BCE and per-level partition accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .partition import LEVEL_SLICES, NUM_BITS, PartitionLabel, derive_masks

CLAMP = 1e-7


@dataclass
class LossBreakdown:
    l1: Tensor
    l2: Tensor
    l3: Tensor
    total: Tensor
    valid_counts: tuple[int, int, int]


def _label_array(label) -> np.ndarray:
    if isinstance(label, PartitionLabel):
        return label.array()
    return np.asarray(label, dtype=np.uint8)


def _per_sample_levels(yhat: Tensor, labels: np.ndarray):
    """Per-level masked-mean BCE, each of shape ``N``."""
    masks = derive_masks(labels).astype(yhat.dtype)
    y = labels.astype(yhat.dtype)
    p = ad.clip(yhat, CLAMP, 1 - CLAMP)
    bce = -(ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y))
    bce = bce * masks
    levels = []
    for sl in LEVEL_SLICES:
        count = masks[:, sl].sum(axis=1)
        # a fully masked level contributes exactly 0
        levels.append(bce[:, sl].sum(axis=1) * (1.0 / np.maximum(count, 1.0)))
    return levels, masks


def hierarchical_bce(yhat: Tensor, label) -> LossBreakdown:
    """Equal-weight sum of level-wise BCE, each averaged over valid positions."""
    labels = _label_array(label).reshape(1, NUM_BITS)
    yhat = yhat.reshape((1, NUM_BITS))
    (l1, l2, l3), masks = _per_sample_levels(yhat, labels)
    counts = tuple(int(masks[0, sl].sum()) for sl in LEVEL_SLICES)
    l1, l2, l3 = (t.reshape(()) for t in (l1, l2, l3))
    return LossBreakdown(l1, l2, l3, l1 + l2 + l3, counts)


def batch_loss(yhat: Tensor, labels) -> Tensor:
    """Mean over the batch of per-sample hierarchical losses (``yhat`` is ``N x 21``)."""
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, NUM_BITS)
    if labels.shape[0] == 0:
        raise ContractError("batch_loss needs a non-empty batch")
    yhat = yhat.reshape((labels.shape[0], NUM_BITS))
    (l1, l2, l3), _ = _per_sample_levels(yhat, labels)
    return ad.mean(l1 + l2 + l3)


@dataclass
class AccuracyReport:
    l1: float | None
    l2: float | None
    l3: float | None
    overall: float | None
    correct: tuple[int, int, int]
    valid: tuple[int, int, int]

    def as_row(self) -> list[str]:
        return ["n/a" if v is None else f"{v:.2f}" for v in (self.l1, self.l2, self.l3, self.overall)]


def level_accuracy(predictions, truths) -> AccuracyReport:
    """Percent correct per level over positions valid under the ground truth.

    Overall pools correct and valid counts across levels. A level with no
    valid positions is reported as ``None`` and contributes nothing.
    """
    pred = np.asarray(predictions, dtype=np.uint8).reshape(-1, NUM_BITS)
    truth = np.asarray(truths, dtype=np.uint8).reshape(-1, NUM_BITS)
    if pred.shape != truth.shape:
        raise ContractError(f"{pred.shape[0]} predictions vs {truth.shape[0]} truths")
    mask = derive_masks(truth).astype(bool)
    hits = (pred == truth) & mask
    correct = tuple(int(hits[:, sl].sum()) for sl in LEVEL_SLICES)
    valid = tuple(int(mask[:, sl].sum()) for sl in LEVEL_SLICES)
    pct = [100.0 * c / v if v else None for c, v in zip(correct, valid)]
    total_valid = sum(valid)
    overall = 100.0 * sum(correct) / total_valid if total_valid else None
    return AccuracyReport(*pct, overall, correct, valid)
