"""Synthetic corpora with known attribute oracles and the reward matrix they induce."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .matcore import PartialMatrix

EOS = 0


@dataclass(frozen=True)
class Utterance:
    tokens: tuple[int, ...]
    label: float

    def __post_init__(self):
        tokens = tuple(int(t) for t in self.tokens)
        if not tokens:
            raise ValueError("utterance must be non-empty")
        if min(tokens) < 0:
            raise ValueError("token ids must be non-negative")
        if not 0.0 <= self.label <= 1.0:
            raise ValueError(f"label {self.label} outside [0, 1]")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "label", float(self.label))


@dataclass(frozen=True)
class PrefixRecord:
    context: tuple[int, ...]
    next: int
    target: float
    weight: float


def expand_prefixes(dataset: Iterable[Utterance]) -> list[PrefixRecord]:
    """Split each utterance at every position with weight ``t / Z_u``, ``Z_u = sum_t t``."""
    out = []
    for u in dataset:
        n = len(u.tokens)
        z = n * (n + 1) / 2
        for t in range(1, n + 1):
            out.append(PrefixRecord(u.tokens[: t - 1], u.tokens[t - 1], u.label, t / z))
    return out


def compress_targets(records: Iterable[PrefixRecord]) -> dict[tuple[tuple[int, ...], int], tuple[float, float]]:
    """Weighted mean target and total weight per ``(context, next)`` key.

    The weighted mean is the minimizer of ``sum lambda (r - y)^2`` over the group.
    """
    num: dict = {}
    den: dict = {}
    for r in records:
        key = (r.context, r.next)
        num[key] = num.get(key, 0.0) + r.weight * r.target
        den[key] = den.get(key, 0.0) + r.weight
    return {k: (num[k] / den[k], den[k]) for k in num}


class ContextIndex:
    """Bijection between distinct contexts (exact token tuples) and matrix rows."""

    def __init__(self, contexts: Iterable[Sequence[int]] = ()):
        self._contexts: list[tuple[int, ...]] = []
        self._rows: dict[tuple[int, ...], int] = {}
        for c in contexts:
            self.add(c)

    @classmethod
    def from_compressed(cls, compressed) -> "ContextIndex":
        return cls(ctx for ctx, _ in compressed)

    def add(self, context: Sequence[int]) -> int:
        key = tuple(int(t) for t in context)
        if key not in self._rows:
            self._rows[key] = len(self._contexts)
            self._contexts.append(key)
        return self._rows[key]

    def row(self, context: Sequence[int]) -> int:
        return self._rows[tuple(context)]

    def context(self, row: int) -> tuple[int, ...]:
        return self._contexts[row]

    def __contains__(self, context) -> bool:
        return tuple(context) in self._rows

    def __len__(self) -> int:
        return len(self._contexts)

    def __iter__(self):
        return iter(self._contexts)


def build_reward_matrix(compressed, index: ContextIndex, vocab_size: int) -> PartialMatrix:
    """Rows are contexts, columns next tokens; observed exactly at the compressed keys."""
    values = np.zeros((len(index), vocab_size))
    observed = np.zeros((len(index), vocab_size), dtype=bool)
    for (ctx, v), (target, _) in compressed.items():
        if not 0 <= v < vocab_size:
            raise ValueError(f"token {v} outside vocabulary of size {vocab_size}")
        if ctx not in index:
            raise KeyError(f"context {ctx} missing from index")
        i = index.row(ctx)
        values[i, v] = target
        observed[i, v] = True
    return PartialMatrix(values, observed)


# -- oracles -------------------------------------------------------------------


@dataclass(frozen=True)
class AttributeOracle:
    """Deterministic utterance-level reward in [0, 1].

    Kinds:

    * ``token_partition``: reward 0 if any token of ``bad_tokens`` occurs, else 1.
    * ``name_pair``: tokens ``1..k`` are first names, ``k+1..2k`` last names;
      a first name ``i`` followed by last name ``j`` scores 0 for ``j < i``,
      1 for ``j == i``; ``j > i`` is unlabeled (``None``).
    * ``smooth``: reward ``exp(-sum_t badness[u_t])``.

    :meth:`attribute` is the undesired attribute (``1 - reward``), the
    quantity evaluation reports.
    """

    kind: str
    bad_tokens: frozenset[int] = frozenset()
    k: int = 0
    badness: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("token_partition", "name_pair", "smooth"):
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        object.__setattr__(self, "bad_tokens", frozenset(int(t) for t in self.bad_tokens))
        object.__setattr__(self, "badness", tuple(float(b) for b in self.badness))
        if self.kind == "smooth" and any(b < 0 for b in self.badness):
            raise ValueError("badness must be non-negative")

    @classmethod
    def token_partition(cls, bad_tokens) -> "AttributeOracle":
        return cls("token_partition", bad_tokens=frozenset(bad_tokens))

    @classmethod
    def name_pair(cls, k: int) -> "AttributeOracle":
        return cls("name_pair", k=k)

    @classmethod
    def smooth(cls, badness) -> "AttributeOracle":
        return cls("smooth", badness=tuple(badness))

    def first_name(self, i: int) -> int:
        return i

    def last_name(self, j: int) -> int:
        return self.k + j

    def reward(self, tokens: Sequence[int]) -> float | None:
        tokens = [int(t) for t in tokens]
        if self.kind == "token_partition":
            return 0.0 if any(t in self.bad_tokens for t in tokens) else 1.0
        if self.kind == "smooth":
            table = self.badness
            return float(np.exp(-sum(table[t] for t in tokens)))
        for a, b in zip(tokens, tokens[1:]):
            if 1 <= a <= self.k and self.k < b <= 2 * self.k:
                i, j = a, b - self.k
                if j < i:
                    return 0.0
                if j == i:
                    return 1.0
                return None
        return None

    def attribute(self, tokens: Sequence[int]) -> float:
        r = self.reward(tokens)
        if r is None:
            raise ValueError("utterance is unlabeled under this oracle")
        return 1.0 - r


# -- base process and corpus -----------------------------------------------------


@dataclass(frozen=True)
class BigramProcess:
    """First-order Markov source; row ``EOS`` is the start distribution."""

    table: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError("transition table must be square")
        if np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("transition rows must be probability distributions")
        t = np.array(t)
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @classmethod
    def random(
        cls,
        vocab_size: int,
        seed: int,
        concentration: float = 0.3,
        eos_prob: float = 0.0,
    ) -> "BigramProcess":
        """Dirichlet rows over non-EOS tokens, with fixed probability of ending."""
        rng = np.random.default_rng(seed)
        rows = rng.dirichlet(np.full(vocab_size - 1, concentration), size=vocab_size)
        table = np.zeros((vocab_size, vocab_size))
        table[:, 1:] = rows * (1.0 - eos_prob)
        table[1:, EOS] = eos_prob
        table[EOS, 1:] = rows[0]
        return cls(table)

    def sample(self, length: int, rng: np.random.Generator, prev: int = EOS, exclude=()) -> list[int]:
        """``length`` tokens without EOS (and without ``exclude``), renormalized."""
        banned = np.zeros(self.vocab_size, dtype=bool)
        banned[EOS] = True
        banned[list(exclude)] = True
        out = []
        for _ in range(length):
            p = np.where(banned, 0.0, self.table[prev])
            total = p.sum()
            if total <= 0:
                p = np.where(banned, 0.0, 1.0)
                total = p.sum()
            prev = int(np.searchsorted(np.cumsum(p), rng.random() * total, side="right"))
            prev = min(prev, self.vocab_size - 1)
            out.append(prev)
        return out


def make_corpus(
    oracle: AttributeOracle,
    base_process: BigramProcess,
    n_utterances: int,
    length_range: tuple[int, int],
    seed: int,
    bad_fraction: float = 0.5,
) -> list[Utterance]:
    """Sample utterances from the bigram process and label them with the oracle.

    Lengths are uniform on ``length_range`` inclusive. For the name-pair
    oracle each utterance opens with one ``(first, last)`` pair with
    ``j <= i`` followed by filler that avoids name tokens. For the token
    partition each utterance is drawn wholly from the bad tokens (with
    probability ``bad_fraction``) or wholly from the rest, so every token
    occurs under a single label and rewards do not depend on context.
    """
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad length range {length_range}")
    rng = np.random.default_rng(seed)
    out = []
    if oracle.kind == "name_pair":
        if 2 * oracle.k >= base_process.vocab_size:
            raise ValueError("vocabulary too small for the name tokens")
        names = range(1, 2 * oracle.k + 1)
        for _ in range(n_utterances):
            i = int(rng.integers(1, oracle.k + 1))
            j = int(rng.integers(1, i + 1))
            length = max(int(rng.integers(lo, hi + 1)), 2)
            last = oracle.last_name(j)
            tokens = [oracle.first_name(i), last] + base_process.sample(length - 2, rng, prev=last, exclude=names)
            out.append(Utterance(tuple(tokens), oracle.reward(tokens)))
        return out
    if oracle.kind == "token_partition":
        bad = sorted(oracle.bad_tokens)
        if not bad or max(bad) >= base_process.vocab_size or EOS in oracle.bad_tokens:
            raise ValueError("bad tokens must be non-EOS ids inside the vocabulary")
        good = [t for t in range(1, base_process.vocab_size) if t not in oracle.bad_tokens]
        if not good:
            raise ValueError("every token is bad")
        for _ in range(n_utterances):
            length = int(rng.integers(lo, hi + 1))
            exclude = good if rng.random() < bad_fraction else bad
            tokens = base_process.sample(length, rng, exclude=exclude)
            out.append(Utterance(tuple(tokens), oracle.reward(tokens)))
        return out
    for _ in range(n_utterances):
        length = int(rng.integers(lo, hi + 1))
        tokens = base_process.sample(length, rng)
        out.append(Utterance(tuple(tokens), oracle.reward(tokens)))
    return out


def write_corpus(path, utterances: Iterable[Utterance]) -> None:
    lines = [" ".join(map(str, u.tokens)) + "\t" + repr(u.label) for u in utterances]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path) -> list[Utterance]:
    out = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if not ln.strip():
            continue
        toks, label = ln.split("\t")
        out.append(Utterance(tuple(int(t) for t in toks.split()), float(label)))
    return out


def corpus_reward_matrix(utterances: Sequence[Utterance], vocab_size: int) -> tuple[PartialMatrix, ContextIndex]:
    """Expand, compress and assemble in one go."""
    for u in utterances:
        if max(u.tokens) >= vocab_size:
            raise ValueError(f"token {max(u.tokens)} outside vocabulary of size {vocab_size}")
    compressed = compress_targets(expand_prefixes(utterances))
    index = ContextIndex.from_compressed(compressed)
    return build_reward_matrix(compressed, index, vocab_size), index
