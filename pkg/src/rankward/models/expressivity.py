"""Triangular fitting task separating the two parametrizations.

A Q-style head's reward rows are ``h(x) (w 1^T + W E)``, so its matrix over
contexts has rank at most ``d`` and cannot fit an instance of minimal rank
``k > d``. A V-style head has no such bound.
"""
from __future__ import annotations

from dataclasses import dataclass

from ..matcore import PartialMatrix, best_of_restarts, build_triangular_instance, observed_mse
from ..tasks import triangular_pairs
from .data import PrefixDataset
from .reward import QRewardModel, VRewardModel
from .training import TrainConfig, dataset_mse, train


@dataclass(frozen=True)
class ExpressivityConfig:
    epochs: int = 3000
    lr: float = 5e-2
    lr_decay: float = 0.998
    batch_size: int = 100
    weight_decay: float = 0.0
    early_stop_rel: float | None = 1e-9


@dataclass(frozen=True)
class ExpressivityResult:
    k: int
    d: int
    v_mse: float
    q_mse: float
    floor: float  # soft-impute error of the best rank-d factorization found


def triangular_dataset(k: int) -> tuple[PrefixDataset, int]:
    contexts, cands, targets, vocab = triangular_pairs(k)
    return PrefixDataset.from_pairs(contexts, cands, targets), vocab


def rank_floor(k: int, d: int, restarts: int = 3, seed: int = 0) -> float:
    """Observed MSE of soft-impute at rank ``d`` on the ``k x k`` triangular instance."""
    m: PartialMatrix = build_triangular_instance(k)
    if d >= k:
        return 0.0
    return observed_mse(m, best_of_restarts(m, d, restarts=restarts, seed=seed))


def train_triangular(kind: str, k: int, d: int, seed: int, cfg: ExpressivityConfig | None = None):
    """Train one head on the triangular pairs; returns ``(model, observed_mse)``."""
    cfg = cfg or ExpressivityConfig()
    data, vocab = triangular_dataset(k)
    if kind == "v":
        model = VRewardModel.init(vocab, d, seed=seed)
    elif kind == "q":
        model = QRewardModel.init(vocab, d, seed=seed)
    else:
        raise ValueError(f"unknown head kind {kind!r}")
    tc = TrainConfig(
        lr=cfg.lr,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        weight_decay=cfg.weight_decay,
        reg_weight=0.0,
        seed=seed,
        early_stop_rel=cfg.early_stop_rel,
        lr_decay=cfg.lr_decay,
    )
    train(model, data, tc)
    return model, dataset_mse(model, data)


def fit_triangular(kind: str, k: int, d: int, seed: int, cfg: ExpressivityConfig | None = None) -> float:
    return train_triangular(kind, k, d, seed, cfg)[1]


def expressivity_experiment(k: int, d: int, seed: int = 0, cfg: ExpressivityConfig | None = None, floor: bool = True) -> ExpressivityResult:
    """Both heads at dimension ``d`` on the size-``k`` instance."""
    v = fit_triangular("v", k, d, seed, cfg)
    q = fit_triangular("q", k, d, seed, cfg)
    return ExpressivityResult(k, d, v, q, rank_floor(k, d, seed=seed) if floor else float("nan"))
