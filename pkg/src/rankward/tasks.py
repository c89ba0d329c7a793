"""Synthetic task presets shared by the experiments.

The detox-style world attaches a per-token toxicity feature to a bigram
source. Token embeddings carry that feature in their first coordinate, the
way pretrained embeddings carry semantic attributes, and Q-style heads use
them as their frozen output embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rewarddata import EOS, AttributeOracle, BigramProcess, Utterance, make_corpus


@dataclass(frozen=True)
class DetoxTaskConfig:
    vocab_size: int = 64
    dim: int = 16
    world_seed: int = 1000
    concentration: float = 0.3
    n_bad: int = 6
    bad_rank_start: int = 20  # bad tokens are taken from this rank of stationary frequency on
    bad_strength: float = 0.8  # per-token toxicity of bad tokens is uniform on [strength/2, strength]
    background: float = 0.02  # toxicity of every other token is uniform on [0, background]
    bad_damping: float = 0.25  # transition mass into bad tokens is scaled by this factor
    n_train: int = 4000
    n_heldout: int = 1000
    length_range: tuple[int, int] = (4, 24)
    n_prompts: int = 30
    prompt_length: int = 2


@dataclass(frozen=True)
class DetoxWorld:
    process: BigramProcess
    oracle: AttributeOracle
    toxicity: np.ndarray = field(repr=False)  # per-token probability of an offence
    embeddings: np.ndarray = field(repr=False)  # (d, |V|), row 0 is the toxicity feature
    bad_tokens: tuple[int, ...]


def stationary_distribution(process: BigramProcess, iters: int = 500) -> np.ndarray:
    p = np.full(process.vocab_size, 1.0 / process.vocab_size)
    for _ in range(iters):
        p = p @ process.table
    return p


def build_detox_world(cfg: DetoxTaskConfig) -> DetoxWorld:
    """A fixed world: depends on ``cfg.world_seed`` only, never on the run seed.

    The utterance reward is ``prod_t (1 - tox[u_t])``, so the undesired
    attribute is the probability that at least one token offends.
    """
    v, d = cfg.vocab_size, cfg.dim
    rng = np.random.default_rng(cfg.world_seed)
    proc = BigramProcess.random(v, seed=cfg.world_seed, concentration=cfg.concentration)
    freq = stationary_distribution(proc)
    by_freq = np.argsort(-freq[1:], kind="stable") + 1
    bad = by_freq[cfg.bad_rank_start : cfg.bad_rank_start + cfg.n_bad]
    if len(bad) != cfg.n_bad:
        raise ValueError("not enough tokens for the requested bad set")
    table = proc.table.copy()
    table[:, bad] *= cfg.bad_damping
    table /= table.sum(axis=1, keepdims=True)
    proc = BigramProcess(table)
    tox = rng.uniform(0.0, cfg.background, v)
    tox[EOS] = 0.0
    tox[bad] = rng.uniform(0.5 * cfg.bad_strength, cfg.bad_strength, cfg.n_bad)
    emb = rng.standard_normal((d, v)) / np.sqrt(d)
    emb[0] = tox
    oracle = AttributeOracle.smooth(-np.log1p(-tox))
    return DetoxWorld(proc, oracle, tox, emb, tuple(int(t) for t in sorted(bad)))


def detox_corpora(world: DetoxWorld, cfg: DetoxTaskConfig, seed: int) -> tuple[list[Utterance], list[Utterance]]:
    """Training corpus and a disjointly seeded held-out corpus."""
    train = make_corpus(world.oracle, world.process, cfg.n_train, cfg.length_range, seed)
    held = make_corpus(world.oracle, world.process, cfg.n_heldout, cfg.length_range, seed + 10_000)
    return train, held


@dataclass(frozen=True)
class PromptSet:
    prompts: tuple[tuple[int, ...], ...]
    groups: tuple[str, ...]  # "high" / "neutral" / "low" attribute third

    def __len__(self) -> int:
        return len(self.prompts)

    def select(self, group: str) -> list[tuple[int, ...]]:
        return [p for p, g in zip(self.prompts, self.groups) if g == group]


def make_prompts(process: BigramProcess, oracle: AttributeOracle, n: int, length: int, seed: int) -> PromptSet:
    """Prefixes sampled from the source, split into thirds by their own attribute score."""
    rng = np.random.default_rng(seed)
    prompts = [tuple(process.sample(length, rng)) for _ in range(n)]
    scores = np.array([oracle.attribute(p) for p in prompts])
    order = np.argsort(-scores, kind="stable")
    groups = [""] * n
    for rank, i in enumerate(order):
        groups[i] = ("high", "neutral", "low")[min(3 * rank // max(n, 1), 2)]
    return PromptSet(tuple(prompts), tuple(groups))


# -- matrix-completion corpora -------------------------------------------------------


def _shift(utts: list[Utterance], offset: int) -> list[Utterance]:
    return [Utterance(tuple(t + offset for t in u.tokens), u.label) for u in utts]


def mixed_rank_corpus(seed: int, n_each: int = 400, k_names: int = 8, sub_vocab: int = 24) -> tuple[list[Utterance], int]:
    """Three sub-corpora over disjoint token ranges: context-independent
    partition (rank 1), name pairs (rank ``k_names``) and a smooth bigram
    source (no low-rank structure). Returns the corpus and its vocabulary size.
    """
    rng = np.random.default_rng(seed)
    s1, s2, s3 = (int(x) for x in rng.integers(0, 2**31, size=3))
    part_proc = BigramProcess.random(sub_vocab, seed=s1)
    bad = range(1, sub_vocab // 3 + 1)
    part = make_corpus(AttributeOracle.token_partition(bad), part_proc, n_each, (2, 6), s1)
    name_vocab = max(2 * k_names + 4, sub_vocab)
    names = make_corpus(AttributeOracle.name_pair(k_names), BigramProcess.random(name_vocab, seed=s2), n_each, (2, 5), s2)
    smooth_proc = BigramProcess.random(sub_vocab, seed=s3)
    badness = np.random.default_rng(s3).uniform(0.0, 0.3, sub_vocab)
    smooth = make_corpus(AttributeOracle.smooth(badness), smooth_proc, n_each, (2, 6), s3)
    # token 0 stays EOS; each block occupies its own id range
    out = part + _shift(names, sub_vocab - 1) + _shift(smooth, sub_vocab - 1 + name_vocab - 1)
    vocab = sub_vocab + (name_vocab - 1) + (sub_vocab - 1)
    order = rng.permutation(len(out))
    return [out[i] for i in order], vocab


def context_independent_corpus(seed: int, vocab_size: int = 16, n: int = 300, n_bad: int = 5) -> tuple[list[Utterance], AttributeOracle, BigramProcess]:
    """Every token occurs under one label only, so the reward is a function of the next token."""
    proc = BigramProcess.random(vocab_size, seed=seed)
    oracle = AttributeOracle.token_partition(range(1, n_bad + 1))
    return make_corpus(oracle, proc, n, (2, 6), seed), oracle, proc


def triangular_pairs(k: int) -> tuple[list[tuple[int]], list[int], list[float], int]:
    """Token form of the triangular instance.

    Context ``(i,)`` is first name ``i`` (token ``i``) and the candidate is
    last name ``j`` (token ``k + j``); pairs with ``j <= i`` are observed with
    target 1 on the diagonal and 0 below. Returns contexts, candidates,
    targets and the vocabulary size ``2k + 1``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    contexts, cands, targets = [], [], []
    for i in range(1, k + 1):
        for j in range(1, i + 1):
            contexts.append((i,))
            cands.append(k + j)
            targets.append(1.0 if i == j else 0.0)
    return contexts, cands, targets, 2 * k + 1
