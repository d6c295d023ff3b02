"""Desk-scale supervised training on oracle-labelled CTUs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import DIHEDRAL_PERMS, Dataset, STATE_MAGIC, atomic_write, encode_records, save_weights
from .errors import ContractError, NumericError
from .losses import batch_loss, level_accuracy
from .model import GRADCHECK_CONFIG, HfvitModel
from .nn import philox

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    optimizer: str = "adamw"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "cosine"
    augment: bool = True  # random rotations/mirrors; oracle labels are invariant up to permutation

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
               lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One AdamW update in place: decoupled decay, bias-corrected moments."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        data = p.data * p.dtype.type(1 - lr * weight_decay)
        data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        p.data = data
    return state


def sgd_step(params, grads, lr: float, weight_decay: float) -> None:
    for name, p in params.items():
        g = grads.get(name)
        data = p.data * p.dtype.type(1 - lr * weight_decay)
        if g is not None:
            data -= (lr * g).astype(p.dtype)
        p.data = data


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.schedule == "constant" or total_steps <= 0:
        return config.learning_rate
    return config.learning_rate * 0.5 * (1 + math.cos(math.pi * step / total_steps))


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: tuple[float | None, float | None, float | None, float | None]
    learning_rate: float


def loss_and_grads(model: HfvitModel, x: np.ndarray, qp: np.ndarray, labels: np.ndarray,
                   rng: np.random.Generator | None = None):
    params = dict(model.named_parameters())
    with Tape() as tape:
        yhat = model(Tensor(x, dtype=model.pos_embed.dtype), qp, rng=rng)
        loss = batch_loss(yhat, labels)
    grads = ad.backward(tape, loss)
    return loss.item(), {name: grads[p] for name, p in params.items() if p in grads}, yhat.data


def augment_batch(x: np.ndarray, labels: np.ndarray, rng: np.random.Generator):
    """Apply an independent random dihedral transform to every CTU (N x 64 x 64 x 1)."""
    ks = rng.integers(0, 8, size=len(x))
    x = x.copy()
    labels = labels.copy()
    for i, k in enumerate(ks):
        img = np.rot90(x[i], k % 4, axes=(0, 1))
        x[i] = img[:, ::-1] if k >= 4 else img
        labels[i] = labels[i, DIHEDRAL_PERMS[k]]
    return x, labels


def predict_dataset(model: HfvitModel, ds: Dataset, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(ds), batch_size):
        idx = slice(start, start + batch_size)
        out.append(model(Tensor(ds.inputs(idx), dtype=model.pos_embed.dtype), ds.qp[idx]).data)
    return np.concatenate(out) if out else np.empty((0, 21))


def verify_gradients(seed: int = 0, n_params: int = 3):
    """Spot-check tape gradients on a small float64 model (a few entries of a
    few sampled parameters)."""
    with ad.precision(np.float64):
        micro = HfvitModel(GRADCHECK_CONFIG.replace(seed=seed)).astype(np.float64).eval()
        rng = np.random.default_rng(seed)
        x = rng.random((2, 64, 64, 1))
        qp = rng.integers(0, 52, size=2)
        labels = rng.integers(0, 2, size=(2, 21)).astype(np.uint8)
        labels[:, 0] = 1
        named = dict(micro.named_parameters())
        picks = sorted(rng.choice(sorted(named), size=n_params, replace=False))
        report = ad.grad_check(lambda: batch_loss(micro(Tensor(x), qp), labels),
                               {k: named[k] for k in picks}, max_entries=4, seed=seed)
    if not report.passed:
        raise NumericError(f"gradient spot-check failed: max relative error {report.max_rel_error:.2e}")
    return report


def save_checkpoint(model: HfvitModel, state: AdamState, epoch: int, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"epoch_{epoch:04d}.hfvt"
    save_weights(model, path)
    tensors = {}
    for name in sorted(state.m):
        tensors[f"m.{name}"] = state.m[name]
        tensors[f"v.{name}"] = state.v[name]
    atomic_write(directory / f"epoch_{epoch:04d}.state",
                 encode_records(STATE_MAGIC, {"epoch": epoch, "step": state.step}, tensors))
    return path


def train(model: HfvitModel, dataset: Dataset, config: TrainConfig, checkpoint_dir=None,
          verify: bool = True, eval_set: Dataset | None = None) -> tuple[HfvitModel, list[EpochLog]]:
    """Minibatch training on the hierarchical loss; mutates and returns ``model``."""
    if len(dataset) == 0:
        raise ContractError("training needs a non-empty dataset")
    if verify:
        verify_gradients(config.seed)
    params = dict(model.named_parameters())
    state = AdamState()
    shuffle_rng = np.random.default_rng(config.seed)
    steps_per_epoch = -(-len(dataset) // config.batch_size)
    total = steps_per_epoch * config.epochs
    history = []
    step = 0
    for epoch in range(config.epochs):
        model.train()
        order = shuffle_rng.permutation(len(dataset))
        losses = []
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * config.batch_size:(b + 1) * config.batch_size])
            lr = lr_at(config, step, total)
            x, labels = dataset.inputs(idx), dataset.labels[idx]
            if config.augment:
                x, labels = augment_batch(x, labels, philox(config.seed, epoch, b, 1))
            loss, grads, _ = loss_and_grads(model, x, dataset.qp[idx], labels, rng=philox(config.seed, epoch, b))
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            if config.optimizer == "adamw":
                adamw_step(params, grads, state, lr, config.weight_decay, config.betas, config.eps)
            else:
                sgd_step(params, grads, lr, config.weight_decay)
            losses.append(loss)
            step += 1
        probe = eval_set if eval_set is not None else dataset
        preds = (predict_dataset(model, probe) >= 0.5).astype(np.uint8)
        acc = level_accuracy(preds, probe.labels)
        entry = EpochLog(epoch, float(np.mean(losses)), (acc.l1, acc.l2, acc.l3, acc.overall), lr)
        history.append(entry)
        log.info("epoch %d loss %.5f overall %.2f%%", epoch, entry.loss, acc.overall or float("nan"))
        if checkpoint_dir is not None:
            save_checkpoint(model, state, epoch, checkpoint_dir)
    model.eval()
    return model, history
