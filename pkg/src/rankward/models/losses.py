"""Per-example training losses and their derivatives w.r.t. the prediction."""
from __future__ import annotations

import numpy as np

from .heads import QHead, sigmoid


def loss_weighted_sq(pred, target, weight=1.0):
    """``weight * (pred - target)**2``."""
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    return weight * (pred - target) ** 2


def grad_weighted_sq(pred, target, weight=1.0):
    return 2.0 * weight * (np.asarray(pred, dtype=float) - target)


def loss_distill(student_pred, teacher_pred):
    """Squared gap to a frozen teacher's score; the teacher receives no gradient."""
    return loss_weighted_sq(student_pred, teacher_pred, 1.0)


def grad_distill(student_pred, teacher_pred):
    return grad_weighted_sq(student_pred, teacher_pred, 1.0)


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def loss_bce(pred, target, weight=1.0):
    """Weighted binary cross-entropy on ``sigmoid(pred)``, non-negative.

    Uses ``softplus(p) - y p``, which equals
    ``-(y log s(p) + (1 - y) log(1 - s(p)))`` without overflow.
    """
    pred = np.asarray(pred, dtype=float)
    return weight * (softplus(pred) - target * pred)


def grad_bce(pred, target, weight=1.0):
    return weight * (sigmoid(np.asarray(pred, dtype=float)) - target)


def loss_reg(head: QHead, h, sampled_token, channel: int | None = None):
    """Squared marginal score ``(<h, W e(v')>)**2`` of a uniformly drawn token.

    Summed over channels unless ``channel`` is given.
    """
    h = np.atleast_2d(np.asarray(h, dtype=float))
    tokens = np.atleast_1d(np.asarray(sampled_token, dtype=np.int64))
    delta, _ = head.delta_at(h, tokens)
    sq = delta**2
    out = sq[:, channel] if channel is not None else sq.sum(axis=1)
    return out if out.size > 1 else float(out[0])


TASK_LOSSES = {
    "sq": (loss_weighted_sq, grad_weighted_sq),
    "bce": (loss_bce, grad_bce),
}
