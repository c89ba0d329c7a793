"""Experiment configuration: a YAML tree mapped onto nested dataclasses.

Unknown keys are rejected so a typo cannot silently fall back to a default.
The config hash covers everything that can change numeric output; the output
directory and thread count are excluded.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..tasks import DetoxTaskConfig

KINDS = (
    "gen-data",
    "build-matrix",
    "complete-table",
    "rank-study",
    "verify-lemmas",
    "train",
    "distill",
    "tradeoff",
    "ablation",
    "bench",
    "expressivity",
)


@dataclass
class DataSection:
    task: str = "detox"  # detox | partition | name_pair | mixed
    corpus: str | None = None  # existing corpus file; generated when None
    heldout: str | None = None
    n_utterances: int = 400
    vocab_size: int = 16
    k_names: int = 8
    length_range: tuple[int, int] = (2, 6)


@dataclass
class TrainSection:
    head: str = "q"  # q | v
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 100
    weight_decay: float = 0.02
    reg_weight: float = 0.01
    loss: str = "sq"
    use_baseline: bool = True
    mlp_width: int | None = None
    teacher_epochs: int = 30
    teacher_checkpoint: str | None = None
    checkpoint: str | None = None  # model for rank-study / bench; trained when None
    sequential_corpora: list[str] = field(default_factory=list)  # extra corpora, fine-tuned in order


@dataclass
class DecodeSection:
    betas: list[float] = field(default_factory=lambda: [0.0, 10.0, 50.0, 100.0])
    top_ks: list[int] = field(default_factory=lambda: [20])
    n_samples: int = 25
    max_new_tokens: int = 20


@dataclass
class CompletionSection:
    dim: int = 16
    ranks: list[int] | None = None  # default {0, d/4, d/2, d-1}
    n_each: int = 400
    restarts: int = 2
    trace_penalty: float = 1e-4
    max_iters: int = 1000


@dataclass
class LemmaSection:
    sizes: list[int] = field(default_factory=lambda: [2, 3, 4, 5, 6])
    seeds: int = 100
    grid_sizes: list[int] = field(default_factory=lambda: [2, 3])


@dataclass
class RankStudySection:
    sizes: list[int] = field(default_factory=lambda: [4, 8, 16, 32, 64, 128])


@dataclass
class AblationSection:
    reg_weights: list[float] = field(default_factory=lambda: [0.0, 0.1, 1.0, 10.0])
    no_baseline: bool = True
    beta: float = 50.0
    n_contexts: int = 160
    collapse_weight: float = 10.0
    collapse_tol: float = 1e-3


@dataclass
class BenchSection:
    k_grid: list[int] = field(default_factory=lambda: [1, 5, 20, 40])
    max_new_tokens: int = 20
    repetitions: int = 30
    dim: int = 16
    vocab_size: int = 64


@dataclass
class ExpressivitySection:
    k: int = 64
    dim: int = 16
    epochs: int = 3000
    lr: float = 5e-2
    lr_decay: float = 0.998


@dataclass
class ExperimentConfig:
    kind: str
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    data: DataSection = field(default_factory=DataSection)
    detox: DetoxTaskConfig = field(default_factory=DetoxTaskConfig)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    completion: CompletionSection = field(default_factory=CompletionSection)
    lemmas: LemmaSection = field(default_factory=LemmaSection)
    rank_study: RankStudySection = field(default_factory=RankStudySection)
    ablation: AblationSection = field(default_factory=AblationSection)
    bench: BenchSection = field(default_factory=BenchSection)
    expressivity: ExpressivitySection = field(default_factory=ExpressivitySection)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)

    def to_yaml(self) -> str:
        return yaml.safe_dump(_plain(self.to_dict()), sort_keys=False)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ValueError(f"{where}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for name, value in raw.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else fields[name].default
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value or {}, f"{where}.{name}")
        elif isinstance(default, tuple):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    return cls(**kw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if "kind" not in raw:
        raise ValueError("config needs a 'kind'")
    return _build(ExperimentConfig, raw, "config")


def load_config(path) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    return config_from_dict(raw)
