"""Encoder + head pairs in the two parametrizations.

Sequences fed to the encoder always start with ``BOS`` (token 0, shared with
end-of-sequence), so the empty context has a learnable representation.
For an utterance ``u`` the batch row is ``[BOS, u_1, ..., u_l]`` and
position ``t`` (1-based) is the record ``(u_{1:t-1}, u_t)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import CausalEncoder
from .heads import QHead, VHead

BOS = 0


def _prefixed(context) -> np.ndarray:
    ctx = np.asarray(context, dtype=np.int64).ravel()
    return np.concatenate([[BOS], ctx])


@dataclass
class QRewardModel:
    encoder: CausalEncoder
    head: QHead
    kind: str = "q"

    @classmethod
    def init(
        cls,
        vocab_size: int,
        dim: int,
        seed: int = 0,
        channels: int = 1,
        use_baseline: bool = True,
        mlp_width: int | None = None,
        output_embeddings: np.ndarray | None = None,
    ) -> "QRewardModel":
        """``output_embeddings`` (d, |V|) replaces the random frozen ``E`` when given."""
        rng = np.random.default_rng(seed)
        enc = CausalEncoder.init(vocab_size, dim, rng)
        head = QHead.init(dim, vocab_size, rng, channels, use_baseline, mlp_width, output_embeddings)
        return cls(enc, head)

    @property
    def vocab_size(self) -> int:
        return self.encoder.vocab_size

    @property
    def dim(self) -> int:
        return self.encoder.dim

    @property
    def channels(self) -> int:
        return self.head.channels

    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.encoder.parameters(), **self.head.parameters()}

    @property
    def frozen(self) -> tuple[str, ...]:
        return self.head.frozen

    def context_state(self, context) -> np.ndarray:
        return self.encoder.encode(_prefixed(context))[-1]

    def score_all(self, context) -> np.ndarray:
        """Rewards ``(C, |V|)`` for every candidate after ``context``: one encoder pass."""
        return self.head.score_all(self.context_state(context))

    def score(self, context, candidate: int, channel: int = 0) -> float:
        return float(self.score_all(context)[channel, candidate])

    # teacher-forced training path
    def forward_train(self, tokens: np.ndarray):
        states = self.encoder.encode_batch(tokens)
        b, t_len = tokens.shape
        h = states[:, 1:t_len].reshape(-1, self.dim)
        nxt = tokens[:, 1:].reshape(-1)
        base = self.head.baseline(h) if self.head.use_baseline else np.zeros((h.shape[0], self.channels))
        delta, dcache = self.head.delta_at(h, nxt)
        pred = (base + delta).reshape(b, t_len - 1, self.channels)
        return pred, {"tokens": tokens, "states": states, "h": h, "dcache": dcache}

    def reg_forward(self, cache, reg_tokens: np.ndarray):
        delta, rcache = self.head.delta_at(cache["h"], reg_tokens.reshape(-1))
        cache["rcache"] = rcache
        return delta.reshape(*reg_tokens.shape, self.channels)

    def backward_train(self, cache, d_pred: np.ndarray, d_reg: np.ndarray | None = None):
        grads = {k: np.zeros_like(v) for k, v in self.parameters().items()}
        tokens, states, h = cache["tokens"], cache["states"], cache["h"]
        g = d_pred.reshape(-1, self.channels)
        dh = self.head.backward_baseline(h, g, grads)
        dh += self.head.backward_delta(cache["dcache"], g, grads)
        if d_reg is not None:
            dh += self.head.backward_delta(cache["rcache"], d_reg.reshape(-1, self.channels), grads)
        b, t_len = tokens.shape
        d_states = np.zeros_like(states)
        d_states[:, 1:t_len] = dh.reshape(b, t_len - 1, self.dim)
        grads.update(self.encoder.backward_batch(tokens, states, d_states))
        for name in self.frozen:
            grads.pop(name, None)
        return grads

    def start(self, prompt):
        """Decoding state: cached representation of ``[BOS] + prompt[:-1]``.

        The last prompt token is left for the first :meth:`advance`, so each
        decoding step processes exactly one token.
        """
        prompt = np.asarray(prompt, dtype=np.int64).ravel()
        return self.encoder.encode(_prefixed(prompt[:-1]))[-1], int(prompt[-1])


@dataclass
class VRewardModel:
    encoder: CausalEncoder
    head: VHead
    kind: str = "v"

    @classmethod
    def init(cls, vocab_size: int, dim: int, seed: int = 0, channels: int = 1) -> "VRewardModel":
        rng = np.random.default_rng(seed)
        enc = CausalEncoder.init(vocab_size, dim, rng)
        return cls(enc, VHead.init(dim, rng, channels))

    @property
    def vocab_size(self) -> int:
        return self.encoder.vocab_size

    @property
    def dim(self) -> int:
        return self.encoder.dim

    @property
    def channels(self) -> int:
        return self.head.channels

    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.encoder.parameters(), **self.head.parameters()}

    @property
    def frozen(self) -> tuple[str, ...]:
        return self.head.frozen

    def context_state(self, context) -> np.ndarray:
        return self.encoder.encode(_prefixed(context))[-1]

    def score(self, context, candidate: int, channel: int = 0) -> float:
        """Reward of ``[context, candidate]`` from a full re-encode."""
        seq = np.concatenate([np.asarray(context, dtype=np.int64).ravel(), [candidate]])
        return float(self.head.score(self.context_state(seq))[channel])

    def score_candidates(self, h_prefix: np.ndarray, candidates, batched: bool = True):
        """States and rewards ``(k, C)`` for each candidate from a cached prefix state.

        ``batched=False`` runs one encoder step per candidate, i.e. ``k``
        separate forward passes over the cached prefix.
        """
        candidates = np.asarray(candidates, dtype=np.int64)
        if batched:
            states = self.encoder.step(np.broadcast_to(h_prefix, (candidates.size, self.dim)), candidates)
        else:
            states = np.empty((candidates.size, self.dim))
            for i, tok in enumerate(candidates):
                states[i] = self.encoder.step(h_prefix, tok)
        return states, self.head.score(states)

    def score_row(self, context, channel: int = 0) -> np.ndarray:
        """Rewards for every vocabulary item after ``context`` (``|V|`` forward passes)."""
        h = self.context_state(context)
        _, scores = self.score_candidates(h, np.arange(self.vocab_size))
        return scores[:, channel]

    def forward_train(self, tokens: np.ndarray):
        states = self.encoder.encode_batch(tokens)
        h = states[:, 2:]
        pred = h @ self.head.readout.T
        return pred, {"tokens": tokens, "states": states, "h": h}

    def backward_train(self, cache, d_pred: np.ndarray, d_reg=None):
        if d_reg is not None:
            raise ValueError("the V parametrization has no marginal term to regularize")
        tokens, states, h = cache["tokens"], cache["states"], cache["h"]
        grads = {"readout": np.einsum("btc,btd->cd", d_pred, h)}
        d_states = np.zeros_like(states)
        d_states[:, 2:] = d_pred @ self.head.readout
        grads.update(self.encoder.backward_batch(tokens, states, d_states))
        return grads

    def start(self, prompt):
        prompt = np.asarray(prompt, dtype=np.int64).ravel()
        return self.encoder.encode(_prefixed(prompt))[-1]


def assemble_q_reward_matrix(model: QRewardModel, contexts, channel: int = 0) -> np.ndarray:
    """Stack ``score_all`` rows for each context: ``H (w 1^T + W E)``."""
    return np.vstack([model.score_all(ctx)[channel] for ctx in contexts])


def context_matrix(model, contexts) -> np.ndarray:
    """Stacked context representations ``H``, one row per context."""
    return np.vstack([model.context_state(ctx) for ctx in contexts])


def q_score_all(head: QHead, h: np.ndarray, channel: int = 0) -> np.ndarray:
    return head.score_all(h)[channel]


def v_score(model: VRewardModel, context, candidate: int, channel: int = 0) -> float:
    """Cached-prefix score of ``[context, candidate]``: one encoder step beyond the prefix."""
    h = model.context_state(context)
    _, s = model.score_candidates(h, [candidate])
    return float(s[0, channel])
