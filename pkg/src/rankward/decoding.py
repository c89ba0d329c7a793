"""Reward-guided top-k sampling over a base LM, with token accounting and metrics."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .models.heads import sigmoid
from .models.reward import QRewardModel, VRewardModel
from .rewarddata import EOS, AttributeOracle, BigramProcess, Utterance


class BaseLm(Protocol):
    vocab_size: int

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray: ...


@dataclass(frozen=True)
class BigramLm:
    """Base or evaluator LM given by a row-stochastic bigram table."""

    log_probs: np.ndarray = field(repr=False)

    @classmethod
    def from_process(cls, process: BigramProcess) -> "BigramLm":
        with np.errstate(divide="ignore"):
            return cls(np.log(process.table))

    @classmethod
    def estimate(cls, utterances: Iterable[Utterance], vocab_size: int, alpha: float = 0.1) -> "BigramLm":
        """Add-``alpha`` smoothed counts; utterances start after EOS."""
        counts = np.full((vocab_size, vocab_size), float(alpha))
        for u in utterances:
            prev = EOS
            for t in u.tokens:
                counts[prev, t] += 1.0
                prev = t
        return cls(np.log(counts / counts.sum(axis=1, keepdims=True)))

    @property
    def vocab_size(self) -> int:
        return self.log_probs.shape[0]

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        prev = int(prefix[-1]) if len(prefix) else EOS
        return self.log_probs[prev]

    def sequence_logprob(self, prompt: Sequence[int], continuation: Sequence[int]) -> np.ndarray:
        """Per-token log-probabilities of ``continuation`` given ``prompt``."""
        prev = int(prompt[-1]) if len(prompt) else EOS
        out = np.empty(len(continuation))
        for i, t in enumerate(continuation):
            out[i] = self.log_probs[prev, t]
            prev = int(t)
        return out


@dataclass(frozen=True)
class GuidanceConfig:
    beta: float = 0.0
    top_k: int = 20
    max_new_tokens: int = 20
    n_samples: int = 25
    seed: int = 0
    stop_on_eos: bool = True
    squash: bool = False  # sigmoid on reward scores (BCE-trained heads)
    channel: int = 0
    separate_passes: bool = False  # V-head: one encoder call per candidate

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.top_k < 1 or self.max_new_tokens < 0 or self.n_samples < 1:
            raise ValueError("top_k, n_samples must be >= 1 and max_new_tokens >= 0")


@dataclass
class GenerationRecord:
    prompt: tuple[int, ...]
    tokens: list[int] = field(default_factory=list)
    probs: list[float] = field(default_factory=list)
    reward_tokens_processed: int = 0
    base_tokens_processed: int = 0
    wall_time: float = 0.0


def topk_candidates(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest logits, ordered by logit then lowest id."""
    logits = np.asarray(logits, dtype=np.float64)
    if k < 1 or k > logits.size:
        raise ValueError(f"k={k} outside 1..{logits.size}")
    order = np.lexsort((np.arange(logits.size), -logits))
    return order[:k]


def augment_logits(z_lm: np.ndarray, rewards: np.ndarray | None, beta: float, candidates) -> np.ndarray:
    """``z_lm + beta * r`` on the candidates, ``-inf`` elsewhere."""
    z = np.full(z_lm.shape, -np.inf)
    cand = np.asarray(candidates)
    z[cand] = z_lm[cand]
    if rewards is not None and beta != 0.0:
        z[cand] = z[cand] + beta * np.asarray(rewards, dtype=np.float64)[cand]
    return z


def masked_softmax(z: np.ndarray) -> np.ndarray:
    """Softmax treating ``-inf`` as exactly zero mass."""
    finite = np.isfinite(z)
    p = np.zeros(z.shape)
    if not finite.any():
        raise ValueError("no finite logits")
    zf = z[finite]
    e = np.exp(zf - zf.max())
    p[finite] = e / e.sum()
    return p


def sample_index(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    idx = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    idx = min(idx, p.size - 1)
    while p[idx] == 0.0:  # guard against landing on a masked tail entry
        idx -= 1
    return idx


class _NoGuide:
    vocab_size = None

    def __init__(self, prompt):
        pass

    def rewards(self, candidates, record):
        return None

    def advance(self, token, record):
        pass


class _QGuide:
    def __init__(self, model: QRewardModel, prompt, cfg: GuidanceConfig):
        self.model = model
        self.h, self.pending = model.start(prompt)
        self.channel = cfg.channel
        self.squash = cfg.squash
        head = model.head
        self.matrix = head.score_matrix()[self.channel] if head.mlp is None else None

    def rewards(self, candidates, record):
        # one token (the latest) enters the encoder; the output layer scores every candidate
        self.h = self.model.encoder.step(self.h, self.pending)
        record.reward_tokens_processed += 1
        if self.matrix is not None:
            r = self.h @ self.matrix
        else:
            r = self.model.head.score_all(self.h)[self.channel]
        return sigmoid(r) if self.squash else r

    def advance(self, token, record):
        self.pending = int(token)


class _VGuide:
    def __init__(self, model: VRewardModel, prompt, cfg: GuidanceConfig):
        self.model = model
        self.h = model.start(prompt)
        self.channel = cfg.channel
        self.squash = cfg.squash
        self.batched = not cfg.separate_passes
        self._cand_states = None

    def rewards(self, candidates, record):
        states, scores = self.model.score_candidates(self.h, candidates, batched=self.batched)
        record.reward_tokens_processed += len(candidates)
        self._cand_states = dict(zip((int(c) for c in candidates), states))
        r = np.zeros(self.model.vocab_size)
        s = scores[:, self.channel]
        r[np.asarray(candidates)] = sigmoid(s) if self.squash else s
        return r

    def advance(self, token, record):
        # the chosen candidate's state was already computed while scoring
        self.h = self._cand_states[int(token)]


def _guide(reward, prompt, cfg):
    if reward is None:
        return _NoGuide(prompt)
    if isinstance(reward, QRewardModel):
        return _QGuide(reward, prompt, cfg)
    if isinstance(reward, VRewardModel):
        return _VGuide(reward, prompt, cfg)
    raise TypeError(f"unsupported reward model {type(reward).__name__}")


def generate(
    base: BaseLm,
    reward,
    cfg: GuidanceConfig,
    prompt: Sequence[int],
    rng: np.random.Generator | None = None,
) -> GenerationRecord:
    """One guided continuation of ``prompt``.

    Each step: base logits, top-k, reward scores for the candidates, ``z +
    beta r``, sample. A Q-style reward processes one token per step, a
    V-style reward ``k`` tokens. Stops after ``max_new_tokens`` or on EOS.
    """
    prompt = tuple(int(t) for t in prompt)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if reward is not None and reward.vocab_size != base.vocab_size:
        raise ValueError(f"reward vocabulary {reward.vocab_size} != base vocabulary {base.vocab_size}")
    if cfg.top_k > base.vocab_size:
        raise ValueError("top_k exceeds vocabulary")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    rec = GenerationRecord(prompt)
    t0 = time.perf_counter()
    guide = _guide(reward, prompt, cfg)
    seq = list(prompt)
    for _ in range(cfg.max_new_tokens):
        z_lm = np.asarray(base.next_logits(seq), dtype=np.float64)
        rec.base_tokens_processed += 1
        cand = topk_candidates(z_lm, cfg.top_k)
        r = guide.rewards(cand, rec)
        p = masked_softmax(augment_logits(z_lm, r, cfg.beta, cand))
        tok = sample_index(p, rng)
        rec.tokens.append(tok)
        rec.probs.append(float(p[tok]))
        seq.append(tok)
        if cfg.stop_on_eos and tok == EOS:
            break
        guide.advance(tok, rec)
    rec.wall_time = time.perf_counter() - t0
    return rec


def prompt_rng(seed: int, prompt_index: int) -> np.random.Generator:
    """Independent stream per prompt, derived from ``(seed, prompt_index)``."""
    return np.random.default_rng(np.random.SeedSequence([seed, prompt_index]))


def generate_samples(base: BaseLm, reward, cfg: GuidanceConfig, prompts: Sequence[Sequence[int]]) -> list[list[GenerationRecord]]:
    """``cfg.n_samples`` continuations per prompt, grouped by prompt."""
    out = []
    for pi, prompt in enumerate(prompts):
        rng = prompt_rng(cfg.seed, pi)
        out.append([generate(base, reward, cfg, prompt, rng) for _ in range(cfg.n_samples)])
    return out


# -- metrics ---------------------------------------------------------------------


def distinct_n(sequences: Iterable[Sequence[int]], n: int) -> float:
    """Distinct n-grams over total n-grams across ``sequences``."""
    grams = []
    for s in sequences:
        s = list(s)
        grams += [tuple(s[i : i + n]) for i in range(len(s) - n + 1)]
    return len(set(grams)) / len(grams) if grams else 0.0


@dataclass(frozen=True)
class Metrics:
    avg_max_attribute: float
    exceed_rate: float
    perplexity: float
    log_perplexity: float
    dist2: float
    dist3: float
    n_prompts: int


def continuation_tokens(rec: GenerationRecord) -> list[int]:
    toks = list(rec.tokens)
    if toks and toks[-1] == EOS:
        toks = toks[:-1]
    return toks


def evaluate(
    records: Sequence[Sequence[GenerationRecord]],
    oracle: AttributeOracle,
    evaluator: BigramLm,
    threshold: float = 0.5,
) -> Metrics:
    """Attribute control, fluency and diversity over prompts' sample groups.

    ``avg_max_attribute`` is the per-prompt maximum attribute over samples,
    averaged over prompts; ``exceed_rate`` the fraction of prompts with any
    sample above ``threshold``. Perplexity is per continuation under the
    evaluator LM (EOS included when generated), averaged over continuations.
    Distinct-n is computed within each prompt's samples, then averaged.
    """
    if not records or any(len(g) == 0 for g in records):
        raise ValueError("need at least one sample per prompt")
    maxes, exceeds, ppls, lppls, d2, d3 = [], [], [], [], [], []
    for group in records:
        scores = [oracle.attribute(continuation_tokens(r)) for r in group]
        maxes.append(max(scores))
        exceeds.append(float(max(scores) > threshold))
        for r in group:
            if r.tokens:
                lp = evaluator.sequence_logprob(r.prompt, r.tokens)
                lppls.append(-float(lp.mean()))
                ppls.append(float(np.exp(-lp.mean())))
        conts = [continuation_tokens(r) for r in group]
        d2.append(distinct_n(conts, 2))
        d3.append(distinct_n(conts, 3))
    return Metrics(
        avg_max_attribute=float(np.mean(maxes)),
        exceed_rate=float(np.mean(exceeds)),
        perplexity=float(np.mean(ppls)) if ppls else float("nan"),
        log_perplexity=float(np.mean(lppls)) if lppls else float("nan"),
        dist2=float(np.mean(d2)),
        dist3=float(np.mean(d3)),
        n_prompts=len(records),
    )


# -- generation dump ---------------------------------------------------------------

DUMP_COLUMNS = ("prompt_id", "sample_id", "beta", "k", "tokens", "oracle_score", "log_perplexity")


def write_generation_dump(path, rows) -> None:
    """Tab-separated rows of :data:`DUMP_COLUMNS`; tokens space-separated."""
    lines = ["\t".join(DUMP_COLUMNS)]
    for r in rows:
        lines.append(
            "\t".join(
                [
                    str(r["prompt_id"]),
                    str(r["sample_id"]),
                    repr(float(r["beta"])),
                    str(r["k"]),
                    " ".join(map(str, r["tokens"])),
                    repr(float(r["oracle_score"])),
                    repr(float(r["log_perplexity"])),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_generation_dump(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    if tuple(header) != DUMP_COLUMNS:
        raise ValueError(f"unexpected dump header {header}")
    out = []
    for ln in lines[1:]:
        f = ln.split("\t")
        out.append(
            {
                "prompt_id": int(f[0]),
                "sample_id": int(f[1]),
                "beta": float(f[2]),
                "k": int(f[3]),
                "tokens": [int(t) for t in f[4].split()],
                "oracle_score": float(f[5]),
                "log_perplexity": float(f[6]),
            }
        )
    return out


def dump_rows(records, oracle: AttributeOracle, evaluator: BigramLm, beta: float, k: int) -> list[dict]:
    rows = []
    for pi, group in enumerate(records):
        for si, r in enumerate(group):
            lp = evaluator.sequence_logprob(r.prompt, r.tokens) if r.tokens else np.zeros(1)
            rows.append(
                {
                    "prompt_id": pi,
                    "sample_id": si,
                    "beta": beta,
                    "k": k,
                    "tokens": r.tokens,
                    "oracle_score": oracle.attribute(continuation_tokens(r)),
                    "log_perplexity": -float(lp.mean()),
                }
            )
    return rows


# -- efficiency ----------------------------------------------------------------------


@dataclass(frozen=True)
class BenchRow:
    head: str
    k: int
    reward_tokens: int
    base_tokens: int
    generated_tokens: int
    median_time_per_token: float


def bench(
    base: BaseLm,
    q_model: QRewardModel,
    v_model: VRewardModel,
    k_grid: Sequence[int],
    max_new_tokens: int = 20,
    repetitions: int = 30,
    prompt: Sequence[int] = (1,),
    seed: int = 0,
    timer: Callable[[], float] = time.perf_counter,
) -> list[BenchRow]:
    """Time per generated token and exact token counters for both heads over ``k_grid``.

    The V head scores each candidate with its own encoder pass over the
    cached prefix. Counters come from one continuation per ``(head, k)``;
    timings are medians over ``repetitions`` continuations. Repetitions are
    interleaved across all ``(head, k)`` cells after one untimed warm-up
    round, so slow drift in machine load affects every cell alike.
    """
    if q_model.dim != v_model.dim:
        raise ValueError("heads must share the encoder dimension")
    heads = (("q", q_model), ("v", v_model))
    cells = [(k, name, model) for k in k_grid for name, model in heads]
    cfgs = {
        k: GuidanceConfig(beta=1.0, top_k=k, max_new_tokens=max_new_tokens, seed=seed, stop_on_eos=False, separate_passes=True)
        for k in k_grid
    }
    times: dict = {(k, name): [] for k, name, _ in cells}
    last: dict = {}
    for rep in range(-1, repetitions):
        for k, name, model in cells:
            rng = np.random.default_rng(np.random.SeedSequence([seed, k, max(rep, 0)]))
            t0 = timer()
            rec = generate(base, model, cfgs[k], prompt, rng)
            elapsed = timer() - t0
            if rep >= 0:
                times[(k, name)].append(elapsed / max(len(rec.tokens), 1))
                last[(k, name)] = rec
    rows = []
    for k, name, _ in cells:
        rec = last.get((k, name)) or generate(base, dict(heads)[name], cfgs[k], prompt, np.random.default_rng(seed))
        med = float(np.median(times[(k, name)])) if times[(k, name)] else float("nan")
        rows.append(BenchRow(name, k, rec.reward_tokens_processed, rec.base_tokens_processed, len(rec.tokens), med))
    return rows
