from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..rewarddata import Utterance, expand_prefixes
from .reward import BOS


@dataclass(frozen=True)
class PrefixDataset:
    """Padded teacher-forcing batch form of the expanded prefix records.

    ``tokens[i] = [BOS, u_1, ..., u_l, pad...]``; position ``t-1`` of
    ``targets``, ``weights`` and ``valid`` belongs to the record
    ``(u_{1:t-1}, u_t)``.
    """

    tokens: np.ndarray  # (n, T) int
    targets: np.ndarray  # (n, T-1, C)
    weights: np.ndarray  # (n, T-1)
    valid: np.ndarray  # (n, T-1) bool

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.targets.shape[2]

    def subset(self, idx) -> "PrefixDataset":
        return PrefixDataset(self.tokens[idx], self.targets[idx], self.weights[idx], self.valid[idx])

    @classmethod
    def from_utterances(cls, utterances: list[Utterance], labels: np.ndarray | None = None) -> "PrefixDataset":
        """Weights follow the prefix-length discount ``t / Z_u``.

        ``labels`` optionally overrides the utterance labels with ``(n, C)``
        per-channel responses.
        """
        n = len(utterances)
        if labels is None:
            labels = np.array([[u.label] for u in utterances], dtype=float)
        labels = np.asarray(labels, dtype=float).reshape(n, -1)
        t_max = max(len(u.tokens) for u in utterances)
        tokens = np.full((n, t_max + 1), BOS, dtype=np.int64)
        targets = np.zeros((n, t_max, labels.shape[1]))
        weights = np.zeros((n, t_max))
        valid = np.zeros((n, t_max), dtype=bool)
        for i, u in enumerate(utterances):
            recs = expand_prefixes([u])
            tokens[i, 1 : len(u.tokens) + 1] = u.tokens
            for t, rec in enumerate(recs):
                weights[i, t] = rec.weight
                targets[i, t] = labels[i]
            valid[i, : len(u.tokens)] = True
        return cls(tokens, targets, weights, valid)

    @classmethod
    def from_pairs(cls, contexts, candidates, targets) -> "PrefixDataset":
        """One supervised record per row: ``(context, candidate) -> target``, weight 1.

        Earlier positions of each row stay valid (so they receive the
        regularizer) but carry no task weight.
        """
        n = len(contexts)
        lens = [len(c) + 1 for c in contexts]
        t_max = max(lens)
        tokens = np.full((n, t_max + 1), BOS, dtype=np.int64)
        tgt = np.zeros((n, t_max, 1))
        weights = np.zeros((n, t_max))
        valid = np.zeros((n, t_max), dtype=bool)
        for i, (ctx, cand, y) in enumerate(zip(contexts, candidates, targets)):
            seq = list(ctx) + [int(cand)]
            tokens[i, 1 : len(seq) + 1] = seq
            tgt[i, len(seq) - 1, 0] = y
            weights[i, len(seq) - 1] = 1.0
            valid[i, : len(seq)] = True
        return cls(tokens, tgt, weights, valid)

    def with_targets(self, targets: np.ndarray, weights: np.ndarray | None = None) -> "PrefixDataset":
        weights = self.valid.astype(float) if weights is None else weights
        return PrefixDataset(self.tokens, np.asarray(targets, dtype=float).reshape(self.targets.shape[:2] + (-1,)), weights, self.valid)
