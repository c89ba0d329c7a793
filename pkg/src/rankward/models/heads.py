"""Reward heads on top of a context representation ``h``.

All heads carry a leading channel axis ``C`` (independent attribute
predictors sharing one encoder); decoding reads channel 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class MlpHead:
    """Non-linear marginal term ``W1 sigmoid(W2 s)`` applied to the linear scores ``s = E^T W^T h``."""

    w1: np.ndarray  # (C, |V|, m)
    w2: np.ndarray  # (C, m, |V|)

    @classmethod
    def init(cls, channels: int, vocab_size: int, width: int, rng: np.random.Generator) -> "MlpHead":
        # w1 = 0 so the untrained head predicts no marginal change
        return cls(
            w1=np.zeros((channels, vocab_size, width)),
            w2=rng.standard_normal((channels, width, vocab_size)) / np.sqrt(vocab_size),
        )


@dataclass
class QHead:
    """Baseline plus marginal reward for every vocabulary item from one context vector.

    ``r(v | h) = <h, w> + <h, W e(v)>`` with ``e(v)`` the columns of the frozen
    output embeddings ``E``.
    """

    baseline_weights: np.ndarray  # (C, d)
    interaction: np.ndarray  # (C, d, d)
    output_embeddings: np.ndarray  # (d, |V|), frozen
    use_baseline: bool = True
    mlp: MlpHead | None = None

    frozen: tuple[str, ...] = field(default=("output_embeddings",), init=False, repr=False)

    @classmethod
    def init(
        cls,
        dim: int,
        vocab_size: int,
        rng: np.random.Generator,
        channels: int = 1,
        use_baseline: bool = True,
        mlp_width: int | None = None,
        output_embeddings: np.ndarray | None = None,
    ) -> "QHead":
        if output_embeddings is None:
            output_embeddings = rng.standard_normal((dim, vocab_size)) / np.sqrt(dim)
        elif np.shape(output_embeddings) != (dim, vocab_size):
            raise ValueError(f"output embeddings must have shape {(dim, vocab_size)}, got {np.shape(output_embeddings)}")
        w = rng.standard_normal((channels, dim)) / np.sqrt(dim)
        if not use_baseline:
            w = np.zeros_like(w)
        mlp = MlpHead.init(channels, vocab_size, mlp_width, rng) if mlp_width else None
        return cls(
            baseline_weights=w,
            interaction=np.zeros((channels, dim, dim)),
            output_embeddings=np.array(output_embeddings, dtype=np.float64),
            use_baseline=use_baseline,
            mlp=mlp,
        )

    @property
    def channels(self) -> int:
        return self.baseline_weights.shape[0]

    @property
    def dim(self) -> int:
        return self.output_embeddings.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.output_embeddings.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"interaction": self.interaction, "output_embeddings": self.output_embeddings}
        if self.use_baseline:
            params["baseline_weights"] = self.baseline_weights
        if self.mlp is not None:
            params["mlp_w1"] = self.mlp.w1
            params["mlp_w2"] = self.mlp.w2
        return params

    def token_matrix(self) -> np.ndarray:
        """``W E`` per channel, shape ``(C, d, |V|)``."""
        return self.interaction @ self.output_embeddings

    def score_matrix(self) -> np.ndarray:
        """``w 1^T + W E`` per channel; only valid for the linear head."""
        if self.mlp is not None:
            raise ValueError("the MLP head has no single score matrix")
        return self.baseline_weights[:, :, None] + self.token_matrix()

    def baseline(self, h: np.ndarray) -> np.ndarray:
        """``<h, w>`` per channel; ``h`` is ``(d,)`` or ``(N, d)``."""
        return h @ self.baseline_weights.T

    def delta_all(self, h: np.ndarray) -> np.ndarray:
        """Marginal scores for the whole vocabulary, ``(..., C, |V|)``."""
        lin = np.einsum("...d,cdv->...cv", h, self.token_matrix())
        if self.mlp is None:
            return lin
        z = sigmoid(np.einsum("...cv,cmv->...cm", lin, self.mlp.w2))
        return np.einsum("...cm,cvm->...cv", z, self.mlp.w1)

    def score_all(self, h: np.ndarray) -> np.ndarray:
        """Rewards for every next token, ``(..., C, |V|)``."""
        if self.mlp is None:
            return np.einsum("...d,cdv->...cv", h, self.score_matrix())
        return self.baseline(h)[..., None] + self.delta_all(h)

    # -- training path -----------------------------------------------------

    def delta_at(self, h: np.ndarray, tokens: np.ndarray):
        """Marginal score of one token per row; returns ``(N, C)`` and a cache."""
        if self.mlp is None:
            e = self.output_embeddings[:, tokens].T  # (N, d)
            we = np.einsum("cde,ne->ncd", self.interaction, e)
            return np.einsum("nd,ncd->nc", h, we), ("lin", h, tokens, e, we)
        lin = np.einsum("nd,cdv->ncv", h, self.token_matrix())
        z = sigmoid(np.einsum("ncv,cmv->ncm", lin, self.mlp.w2))
        w1_tok = self.mlp.w1[:, tokens, :].transpose(1, 0, 2)  # (N, C, m)
        delta = np.einsum("ncm,ncm->nc", z, w1_tok)
        return delta, ("mlp", h, tokens, lin, z, w1_tok)

    def backward_delta(self, cache, g: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        """Accumulate parameter grads for ``sum(g * delta)``; returns ``dL/dh``."""
        kind = cache[0]
        if kind == "lin":
            _, h, tokens, e, we = cache
            grads["interaction"] += np.einsum("nc,nd,ne->cde", g, h, e)
            return np.einsum("nc,ncd->nd", g, we)
        _, h, tokens, lin, z, w1_tok = cache
        c_idx = np.arange(self.channels)
        d_w1 = grads["mlp_w1"]
        for n, tok in enumerate(tokens):
            d_w1[c_idx, tok, :] += g[n][:, None] * z[n]
        dz = g[:, :, None] * w1_tok
        da = dz * z * (1.0 - z)
        grads["mlp_w2"] += np.einsum("ncm,ncv->cmv", da, lin)
        d_lin = np.einsum("ncm,cmv->ncv", da, self.mlp.w2)
        d_we = np.einsum("ncv,dv->ncd", d_lin, self.output_embeddings)  # dL/d(W^T h) per channel
        grads["interaction"] += np.einsum("nd,nce->cde", h, d_we)
        return np.einsum("nce,cde->nd", d_we, self.interaction)

    def backward_baseline(self, h: np.ndarray, g: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        if not self.use_baseline:
            return np.zeros_like(h)
        grads["baseline_weights"] += g.T @ h
        return g @ self.baseline_weights


@dataclass
class VHead:
    """Scalar readout of the state after ``[context, candidate]``."""

    readout: np.ndarray  # (C, d)

    frozen: tuple[str, ...] = field(default=(), init=False, repr=False)

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, channels: int = 1) -> "VHead":
        return cls(readout=rng.standard_normal((channels, dim)) / np.sqrt(dim))

    @property
    def channels(self) -> int:
        return self.readout.shape[0]

    @property
    def dim(self) -> int:
        return self.readout.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"readout": self.readout}

    def score(self, h: np.ndarray) -> np.ndarray:
        return h @ self.readout.T
