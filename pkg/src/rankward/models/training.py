"""Minibatch AdamW training with exact gradients.

The objective is ``task + reg_weight * reg``: ``task`` is the weighted mean of
the per-record loss (weights sum to one per utterance for prefix data), and
``reg`` is the mean squared marginal score of one uniformly drawn token per
valid prefix position.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import PrefixDataset
from .losses import TASK_LOSSES

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-2
    epochs: int = 100
    batch_size: int = 100
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-12
    weight_decay: float = 0.02
    reg_weight: float = 0.1
    loss: str = "sq"
    seed: int = 0
    early_stop_rel: float | None = None
    lr_decay: float = 1.0  # multiplicative per epoch


@dataclass
class OptimizerState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimizerState":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place decoupled-weight-decay Adam update of every parameter with a gradient."""
        self.step += 1
        bc1 = 1.0 - self.beta1**self.step
        bc2 = 1.0 - self.beta2**self.step
        for name in sorted(grads):
            g = grads[name]
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p
            p -= self.lr * update


@dataclass
class TrainResult:
    model: object
    loss_trace: list[float]
    mse_trace: list[float]
    epochs_run: int


def batch_objective(model, batch: PrefixDataset, loss: str, reg_weight: float, reg_tokens=None, need_grad=True):
    """Objective, task MSE, and parameter gradients on one batch."""
    loss_fn, grad_fn = TASK_LOSSES[loss]
    pred, cache = model.forward_train(batch.tokens)
    w = batch.weights[..., None]
    wsum = max(float(batch.weights.sum()), 1e-300)
    task = float(loss_fn(pred, batch.targets, w).sum()) / wsum
    mse = float((w * (pred - batch.targets) ** 2).sum()) / wsum
    total = task
    d_reg = None
    use_reg = reg_weight > 0 and reg_tokens is not None and hasattr(model, "reg_forward")
    if use_reg:
        n_valid = max(int(batch.valid.sum()), 1)
        delta = model.reg_forward(cache, reg_tokens)
        vmask = batch.valid[..., None]
        total += reg_weight * float((vmask * delta**2).sum()) / n_valid
        d_reg = reg_weight * 2.0 * vmask * delta / n_valid
    grads = None
    if need_grad:
        d_pred = grad_fn(pred, batch.targets, w) / wsum
        grads = model.backward_train(cache, d_pred, d_reg)
    return total, mse, grads


def train(model, data: PrefixDataset, cfg: TrainConfig, opt: OptimizerState | None = None) -> TrainResult:
    """Train ``model`` in place; returns per-epoch mean objective and task MSE.

    Shuffling and regularizer token draws come from ``cfg.seed``, so runs are
    reproducible. Parameters listed in ``model.frozen`` never change.
    """
    if cfg.reg_weight < 0:
        raise ValueError("reg_weight must be non-negative")
    if cfg.loss not in TASK_LOSSES:
        raise ValueError(f"unknown loss {cfg.loss!r}")
    rng = np.random.default_rng(cfg.seed)
    opt = opt or OptimizerState.from_config(cfg)
    params = model.parameters()
    vocab = model.vocab_size
    n = len(data)
    loss_trace: list[float] = []
    mse_trace: list[float] = []
    epochs_run = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        tot = 0.0
        mse_tot = 0.0
        w_tot = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = data.subset(order[start : start + cfg.batch_size])
            reg_tokens = None
            if cfg.reg_weight > 0 and hasattr(model, "reg_forward"):
                reg_tokens = rng.integers(0, vocab, size=batch.weights.shape)
            obj, mse, grads = batch_objective(model, batch, cfg.loss, cfg.reg_weight, reg_tokens)
            if not math.isfinite(obj):
                raise TrainingDiverged(f"objective {obj} at epoch {epoch}, batch starting {start}")
            opt.apply(params, grads)
            bw = float(batch.weights.sum())
            tot += obj * bw
            mse_tot += mse * bw
            w_tot += bw
        loss_trace.append(tot / max(w_tot, 1e-300))
        mse_trace.append(mse_tot / max(w_tot, 1e-300))
        epochs_run = epoch + 1
        opt.lr *= cfg.lr_decay
        if cfg.early_stop_rel is not None and epoch > 0:
            prev, cur = loss_trace[-2], loss_trace[-1]
            if abs(prev - cur) <= cfg.early_stop_rel * abs(prev):
                break
    log.debug("trained %d epochs, final loss %.3g", epochs_run, loss_trace[-1] if loss_trace else float("nan"))
    return TrainResult(model, loss_trace, mse_trace, epochs_run)


def dataset_mse(model, data: PrefixDataset, batch_size: int = 1000) -> float:
    """Weighted mean squared error of ``model`` over ``data`` (no regularizer)."""
    sse = 0.0
    wsum = 0.0
    for start in range(0, len(data), batch_size):
        batch = data.subset(slice(start, start + batch_size))
        pred, _ = model.forward_train(batch.tokens)
        w = batch.weights[..., None]
        sse += float((w * (pred - batch.targets) ** 2).sum())
        wsum += float(batch.weights.sum())
    return sse / max(wsum, 1e-300)


def teacher_targets(teacher, data: PrefixDataset, batch_size: int = 1000) -> np.ndarray:
    """Frozen teacher scores at every position of ``data`` (forward only)."""
    out = []
    for start in range(0, len(data), batch_size):
        pred, _ = teacher.forward_train(data.tokens[start : start + batch_size])
        out.append(pred)
    return np.concatenate(out, axis=0)


def distill_dataset(teacher, data: PrefixDataset) -> PrefixDataset:
    """Replace the responses by teacher scores with unit weight at valid positions."""
    return data.with_targets(teacher_targets(teacher, data))
