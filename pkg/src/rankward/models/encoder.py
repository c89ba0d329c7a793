from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CausalEncoder:
    """Single-layer tanh recurrence ``h_t = tanh(U h_{t-1} + X[v_t] + b)``, ``h_0 = 0``."""

    input_embeddings: np.ndarray  # (|V|, d)
    recurrence: np.ndarray  # (d, d)
    bias: np.ndarray  # (d,)

    @classmethod
    def init(cls, vocab_size: int, dim: int, rng: np.random.Generator) -> "CausalEncoder":
        scale = 1.0 / np.sqrt(dim)
        return cls(
            input_embeddings=rng.standard_normal((vocab_size, dim)) * scale,
            recurrence=rng.standard_normal((dim, dim)) * scale,
            bias=np.zeros(dim),
        )

    @property
    def vocab_size(self) -> int:
        return self.input_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.input_embeddings.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "input_embeddings": self.input_embeddings,
            "recurrence": self.recurrence,
            "bias": self.bias,
        }

    def step(self, h_prev: np.ndarray, tokens) -> np.ndarray:
        """Advance one token; ``h_prev`` is ``(d,)`` or ``(B, d)`` with matching tokens."""
        return np.tanh(h_prev @ self.recurrence.T + self.input_embeddings[tokens] + self.bias)

    def encode(self, tokens) -> np.ndarray:
        """All prefix states, shape ``(len(tokens) + 1, d)``; row ``t`` has seen ``tokens[:t]``."""
        tokens = np.asarray(tokens, dtype=np.int64).ravel()
        states = np.zeros((tokens.size + 1, self.dim))
        for t, tok in enumerate(tokens):
            states[t + 1] = self.step(states[t], tok)
        return states

    def encode_batch(self, tokens: np.ndarray) -> np.ndarray:
        """Teacher-forced states ``(B, T + 1, d)`` for a padded ``(B, T)`` batch."""
        b, t_len = tokens.shape
        states = np.zeros((b, t_len + 1, self.dim))
        emb = self.input_embeddings[tokens] + self.bias
        u_t = self.recurrence.T
        for t in range(t_len):
            states[:, t + 1] = np.tanh(states[:, t] @ u_t + emb[:, t])
        return states

    def backward_batch(self, tokens: np.ndarray, states: np.ndarray, d_states: np.ndarray) -> dict[str, np.ndarray]:
        """Backpropagate ``dL/d states`` through time."""
        b, t_len = tokens.shape
        d_emb = np.zeros_like(self.input_embeddings)
        d_rec = np.zeros_like(self.recurrence)
        d_bias = np.zeros_like(self.bias)
        carry = np.zeros((b, self.dim))
        for t in range(t_len, 0, -1):
            g = carry + d_states[:, t]
            h = states[:, t]
            pre = g * (1.0 - h * h)
            d_rec += pre.T @ states[:, t - 1]
            np.add.at(d_emb, tokens[:, t - 1], pre)
            d_bias += pre.sum(axis=0)
            carry = pre @ self.recurrence
        return {"input_embeddings": d_emb, "recurrence": d_rec, "bias": d_bias}
