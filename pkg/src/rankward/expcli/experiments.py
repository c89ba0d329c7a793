"""One function per subcommand.

Each returns an :class:`Outcome` with result tables, plots and checks. Hard
checks that fail make the CLI exit nonzero; soft checks are only reported.
Multi-seed statistical checks become hard once at least five seeds are run.
"""
from __future__ import annotations

import itertools
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import matcore as mc
from ..decoding import BigramLm, GuidanceConfig, bench, dump_rows, evaluate, generate_samples, write_generation_dump
from ..models import (
    ExpressivityConfig,
    PrefixDataset,
    QRewardModel,
    TrainConfig,
    VRewardModel,
    assemble_q_reward_matrix,
    context_matrix,
    dataset_mse,
    distill_dataset,
    expressivity_experiment,
    load_checkpoint,
    parameter_digest,
    save_checkpoint,
    train,
)
from ..rewarddata import (
    AttributeOracle,
    BigramProcess,
    corpus_reward_matrix,
    make_corpus,
    read_corpus,
    write_corpus,
)
from ..tasks import (
    DetoxWorld,
    build_detox_world,
    context_independent_corpus,
    detox_corpora,
    make_prompts,
    mixed_rank_corpus,
)
from .config import ExperimentConfig
from .svgplot import Plot
from .tables import ResultTable

log = logging.getLogger(__name__)

MIN_STAT_SEEDS = 5


@dataclass
class Check:
    name: str
    passed: bool
    hard: bool
    detail: str = ""


@dataclass
class Outcome:
    tables: dict[str, ResultTable] = field(default_factory=dict)
    plots: dict[str, Plot] = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)
    values: dict = field(default_factory=dict)  # headline numbers for callers

    def check(self, name: str, passed: bool, hard: bool, detail: str = "") -> bool:
        self.checks.append(Check(name, bool(passed), hard, detail))
        return bool(passed)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if c.hard and not c.passed]

    def check_table(self) -> ResultTable:
        t = ResultTable("checks", ("check", "status", "hard", "detail"))
        for c in self.checks:
            t.add(c.name, "PASS" if c.passed else "FAIL", c.hard, c.detail)
        return t


# -- shared pipeline pieces ----------------------------------------------------------


def _train_cfg(cfg: ExperimentConfig, seed: int, epochs: int, reg_weight: float) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        lr=t.lr,
        epochs=epochs,
        batch_size=t.batch_size,
        weight_decay=t.weight_decay,
        reg_weight=reg_weight,
        loss=t.loss,
        seed=seed,
    )


def new_student(world: DetoxWorld, cfg: ExperimentConfig, seed: int, use_baseline: bool = True) -> QRewardModel:
    return QRewardModel.init(
        cfg.detox.vocab_size,
        cfg.detox.dim,
        seed=seed,
        use_baseline=use_baseline,
        mlp_width=cfg.train.mlp_width,
        output_embeddings=world.embeddings,
    )


@dataclass
class DetoxRun:
    """World, corpora and the three reward heads of one seed."""

    world: DetoxWorld
    train_corpus: list
    held_corpus: list
    data: PrefixDataset
    teacher: VRewardModel | None = None
    student: QRewardModel | None = None
    responses: QRewardModel | None = None
    distill_data: PrefixDataset | None = None


def detox_run(cfg: ExperimentConfig, seed: int, heads=("v", "qd", "qr")) -> DetoxRun:
    world = build_detox_world(cfg.detox)
    tr, held = detox_corpora(world, cfg.detox, seed)
    run = DetoxRun(world, tr, held, PrefixDataset.from_utterances(tr))
    d, v = cfg.detox.dim, cfg.detox.vocab_size
    if "v" in heads or "qd" in heads:
        run.teacher = VRewardModel.init(v, d, seed=seed)
        train(run.teacher, run.data, _train_cfg(cfg, seed, cfg.train.teacher_epochs, 0.0))
        run.distill_data = distill_dataset(run.teacher, run.data)
    if "qd" in heads:
        run.student = new_student(world, cfg, seed + 1)
        train(run.student, run.distill_data, _train_cfg(cfg, seed, cfg.train.epochs, cfg.train.reg_weight))
    if "qr" in heads:
        run.responses = new_student(world, cfg, seed + 2)
        train(run.responses, run.data, _train_cfg(cfg, seed, cfg.train.epochs, cfg.train.reg_weight))
    return run


def distinct_contexts(corpus, n: int, seed: int) -> list[tuple[int, ...]]:
    pool = list(dict.fromkeys(u.tokens[:t] for u in corpus for t in range(len(u.tokens))))
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(pool))[:n]
    return [pool[i] for i in idx]


METRIC_COLUMNS = ("avg_max_attribute", "exceed_rate", "perplexity", "log_perplexity", "dist2", "dist3")


# -- gen-data / build-matrix ------------------------------------------------------------


def _generate_corpus(cfg: ExperimentConfig, seed: int):
    """Training corpus, optional held-out corpus, vocabulary size, oracle."""
    dcfg = cfg.data
    if dcfg.task == "detox":
        world = build_detox_world(cfg.detox)
        tr, held = detox_corpora(world, cfg.detox, seed)
        return tr, held, cfg.detox.vocab_size, world.oracle
    if dcfg.task == "partition":
        corpus, oracle, _ = context_independent_corpus(seed, dcfg.vocab_size, dcfg.n_utterances)
        return corpus, None, dcfg.vocab_size, oracle
    if dcfg.task == "name_pair":
        vocab = max(2 * dcfg.k_names + 4, dcfg.vocab_size)
        oracle = AttributeOracle.name_pair(dcfg.k_names)
        corpus = make_corpus(oracle, BigramProcess.random(vocab, seed=seed), dcfg.n_utterances, tuple(dcfg.length_range), seed)
        return corpus, None, vocab, oracle
    if dcfg.task == "mixed":
        corpus, vocab = mixed_rank_corpus(seed, n_each=cfg.completion.n_each)
        return corpus, None, vocab, None
    raise ValueError(f"unknown task {dcfg.task!r}")


def _load_or_generate(cfg: ExperimentConfig):
    if cfg.data.corpus:
        corpus = read_corpus(cfg.data.corpus)
        held = read_corpus(cfg.data.heldout) if cfg.data.heldout else None
        vocab = cfg.detox.vocab_size if cfg.data.task == "detox" else max(max(u.tokens) for u in corpus) + 1
        return corpus, held, vocab, None
    return _generate_corpus(cfg, cfg.seed)


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> Outcome:
    res = Outcome()
    corpus, held, vocab, _ = _generate_corpus(cfg, cfg.seed)
    write_corpus(out / "corpus.tsv", corpus)
    res.files.append(out / "corpus.tsv")
    if held is not None:
        write_corpus(out / "heldout.tsv", held)
        res.files.append(out / "heldout.tsv")
    t = ResultTable("corpus_summary", ("split", "n_utterances", "vocab_size", "mean_label", "mean_length"))
    for name, c in (("train", corpus), ("heldout", held)):
        if c is not None:
            t.add(name, len(c), vocab, float(np.mean([u.label for u in c])), float(np.mean([len(u.tokens) for u in c])))
    res.tables["corpus_summary"] = t
    res.check("labels_in_unit_interval", all(0.0 <= u.label <= 1.0 for u in corpus), True)
    return res


def cmd_build_matrix(cfg: ExperimentConfig, out: Path) -> Outcome:
    res = Outcome()
    corpus, _, vocab, oracle = _load_or_generate(cfg)
    m, index = corpus_reward_matrix(corpus, vocab)
    m.save(out / "matrix.txt")
    (out / "contexts.txt").write_text(
        "".join(f"{i}\t{' '.join(map(str, c))}\n" for i, c in enumerate(index)), encoding="utf-8"
    )
    res.files += [out / "matrix.txt", out / "contexts.txt"]
    singles, multi = mc.single_occurrence_rows(m)
    t = ResultTable("matrix_summary", ("rows", "cols", "observed", "single_rows", "multi_rows", "density"))
    t.add(m.n_rows, m.n_cols, m.n_observed, singles.size, multi.size, m.n_observed / (m.n_rows * m.n_cols))
    res.tables["matrix_summary"] = t
    if oracle is not None and oracle.kind == "name_pair":
        k = oracle.k
        rows = [index.row((i,)) if (i,) in index else None for i in range(1, k + 1)]
        sub = np.zeros((k, k), dtype=bool)
        for a, r in enumerate(rows):
            if r is not None:
                sub[a] = m.observed[r, k + 1 : 2 * k + 1]
        upper_clear = not np.any(np.triu(sub, 1))
        coverage = float(sub[np.tril_indices(k)].mean())
        res.check("name_pair_triangular_pattern", upper_clear, True, f"lower-triangle coverage {coverage:.3f}")
    return res


# -- matrix completion ------------------------------------------------------------------


def completion_rank_grid(d: int) -> list[int]:
    return sorted({0, d // 4, d // 2, d - 1})


def cmd_complete_table(cfg: ExperimentConfig, out: Path) -> Outcome:
    res = Outcome()
    cc = cfg.completion
    if cfg.data.corpus:
        corpus = read_corpus(cfg.data.corpus)
        vocab = max(max(u.tokens) for u in corpus) + 1
    else:
        corpus, vocab = mixed_rank_corpus(cfg.seed, n_each=cc.n_each)
    m, _ = corpus_reward_matrix(corpus, vocab)
    _, multi_block = mc.split_single_occurrence_rows(m)
    sub, _, _ = multi_block.drop_empty()
    ranks = cc.ranks if cc.ranks is not None else completion_rank_grid(cc.dim)
    obs = sub.values[sub.observed]
    direct_rank0 = math.fsum(float(x) * float(x) for x in obs) / obs.size
    t = ResultTable("completion", ("rank", "observed_mse", "observed_mse_full", "multi_rows", "multi_cols", "multi_observed", "iterations"))
    prev_fit = None
    mses = []
    rng = np.random.default_rng(cfg.seed)
    for r in ranks:
        r_eff = min(r, min(sub.shape))
        if r_eff == 0:
            mse, iters = mc.observed_mse(sub, np.zeros(sub.shape)), 0
        else:
            fits = [
                mc.soft_impute_als(sub, r_eff, cc.trace_penalty, cc.max_iters, seed=cfg.seed + s)
                for s in range(cc.restarts)
            ]
            if prev_fit is not None:
                # warm start at the previous rank's optimum, new directions small
                extra = r_eff - prev_fit.rank_budget
                left = np.hstack([prev_fit.left, 1e-3 * rng.standard_normal((sub.n_rows, extra))])
                right = np.hstack([prev_fit.right, 1e-3 * rng.standard_normal((sub.n_cols, extra))])
                warm = mc.Factorization(left, right, r_eff)
                fits.append(mc.soft_impute_als(sub, r_eff, cc.trace_penalty, cc.max_iters, init=warm))
            best = min(fits, key=lambda f: mc.observed_mse(sub, f))
            mse, iters = mc.observed_mse(sub, best), best.iterations
            prev_fit = best
        mses.append(mse)
        t.add(r, mse, mse * sub.n_observed / m.n_observed, sub.n_rows, sub.n_cols, sub.n_observed, iters)
    res.tables["completion"] = t
    res.values.update(ranks=list(ranks), mses=mses, rank0_direct=direct_rank0)
    if 0 in ranks:
        got = mses[ranks.index(0)]
        res.check("rank0_equals_mean_square", abs(got - direct_rank0) <= 1e-12, True, f"{got!r} vs {direct_rank0!r}")
    worst = max((b - a for a, b in zip(mses, mses[1:])), default=0.0)
    res.check("mse_non_increasing_in_rank", worst <= 1e-9, True, f"largest increase {worst:.3g}")
    p = Plot("Soft-impute error by rank", "rank", "observed MSE (multi-occurrence block)")
    p.add("observed MSE", ranks, mses)
    res.plots["completion"] = p
    return res


def _random_with_hole(rng: np.random.Generator, k: int) -> mc.PartialMatrix:
    while True:
        a = rng.standard_normal((k, k))
        i, j = (int(x) for x in rng.integers(0, k, size=2))
        scale = np.abs(a).max()
        minor = np.delete(np.delete(a, i, 0), j, 1)
        if abs(np.linalg.det(minor)) > 1e-3 * scale ** (k - 1):
            observed = np.ones((k, k), dtype=bool)
            observed[i, j] = False
            return mc.PartialMatrix(np.where(observed, a, 0.0), observed)


def _sparse_one_per_row(rng: np.random.Generator, n: int, m: int) -> mc.PartialMatrix:
    observed = np.zeros((n, m), dtype=bool)
    values = np.zeros((n, m))
    for i in range(n):
        if rng.random() < 0.8:
            j = int(rng.integers(0, m))
            observed[i, j] = True
            values[i, j] = rng.standard_normal()
    return mc.PartialMatrix(values, observed)


def grid_completion_ranks(m: mc.PartialMatrix, grid=(-1.0, 0.0, 1.0)) -> list[int]:
    """Rank of every completion with hidden entries drawn from ``grid``."""
    holes = np.argwhere(~m.observed)
    out = []
    for combo in itertools.product(grid, repeat=len(holes)):
        a = m.projected()
        for (i, j), val in zip(holes, combo):
            a[i, j] = val
        out.append(mc.matrix_rank(a))
    return out


def cmd_verify_lemmas(cfg: ExperimentConfig, out: Path) -> Outcome:
    res = Outcome()
    lc = cfg.lemmas
    t = ResultTable("lemmas", ("case", "k", "seed", "status", "detail"))
    n_fail = 0

    def record(case, k, seed, ok, detail, expected_fail=False):
        nonlocal n_fail
        if expected_fail:
            status = "expected-fail" if not ok else "unexpected-pass"
            ok = not ok
        else:
            status = "pass" if ok else "fail"
        n_fail += 0 if ok else 1
        t.add(case, k, seed, status, detail)

    for k in lc.sizes:
        for s in range(lc.seeds):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, k, s]))
            m = _random_with_hole(rng, k)
            x = mc.complete_one_missing(m)
            a = mc.fill_hole(m, x)
            scale = float(np.abs(a).max())
            det = abs(float(np.linalg.det(a)))
            record("single_missing", k, s, det < 1e-9 * scale**k, f"|det|={det:.3g}")
            sp = _sparse_one_per_row(rng, k + 2, k)
            fill = mc.rank_one_complete(sp)
            exact = bool(np.all(fill[sp.observed] == sp.values[sp.observed]))
            record("one_per_row_rank1", k, s, exact and mc.matrix_rank(fill) <= 1, f"rank={mc.matrix_rank(fill)}")
    for k in lc.grid_sizes:
        ranks = grid_completion_ranks(mc.build_triangular_instance(k))
        record("triangular_grid", k, 0, all(r == k for r in ranks), f"{len(ranks)} completions, min rank {min(ranks)}")
        bad = mc.build_triangular_instance(k)
        vals = bad.projected()
        vals[k - 1, k - 1] = 0.0
        corrupted = mc.PartialMatrix(vals, bad.observed)
        ranks = grid_completion_ranks(corrupted)
        record("triangular_grid_corrupted", k, 0, all(r == k for r in ranks), f"min rank {min(ranks)}", expected_fail=True)
    ex1 = mc.PartialMatrix.from_entries(3, 3, {(0, 0): 1.0, (1, 1): 4.0, (2, 2): 3.0})
    fill = mc.rank_one_complete(ex1)
    record("one_per_row_example", 3, 0, mc.matrix_rank(fill) == 1 and fill[1, 0] == 4.0, "rows filled with their value")
    res.tables["lemmas"] = t
    res.values["n_cases"] = len(t)
    res.values["n_fail"] = n_fail
    res.check("all_lemma_cases_pass", n_fail == 0, True, f"{n_fail} of {len(t)} failed")
    return res


# -- models ----------------------------------------------------------------------------


def _trained_head(cfg: ExperimentConfig, kind: str, run: DetoxRun, seed: int):
    if kind == "v":
        model = VRewardModel.init(cfg.detox.vocab_size, cfg.detox.dim, seed=seed)
        reg = 0.0
        epochs = cfg.train.teacher_epochs
    elif kind == "q":
        model = new_student(run.world, cfg, seed, cfg.train.use_baseline)
        reg = cfg.train.reg_weight
        epochs = cfg.train.epochs
    else:
        raise ValueError(f"unknown head {kind!r}")
    result = train(model, run.data, _train_cfg(cfg, seed, epochs, reg))
    for path in cfg.train.sequential_corpora:
        more = PrefixDataset.from_utterances(read_corpus(path))
        result = train(model, more, _train_cfg(cfg, seed, epochs, reg))
    return model, result


def _check_vocab(model, vocab: int, what: str) -> None:
    if model.vocab_size != vocab:
        raise ValueError(f"{what} vocabulary {model.vocab_size} does not match the task vocabulary {vocab}")


def cmd_train(cfg: ExperimentConfig, out: Path) -> Outcome:
    res = Outcome()
    run = detox_run(cfg, cfg.seed, heads=())
    model, result = _trained_head(cfg, cfg.train.head, run, cfg.seed)
    save_checkpoint(out / "model.npz", model, seed=cfg.seed)
    res.files.append(out / "model.npz")
    t = ResultTable("training", ("epoch", "objective", "mse"))
    for e, (lo, ms) in enumerate(zip(result.loss_trace, result.mse_trace)):
        t.add(e + 1, lo, ms)
    res.tables["training"] = t
    held_mse = dataset_mse(model, PrefixDataset.from_utterances(run.held_corpus))
    s = ResultTable("training_summary", ("head", "epochs", "final_objective", "train_mse", "heldout_mse"))
    s.add(cfg.train.head, result.epochs_run, result.loss_trace[-1], result.mse_trace[-1], held_mse)
    res.tables["training_summary"] = s
    res.values.update(heldout_mse=held_mse, final_loss=result.loss_trace[-1])
    res.check("finite_loss", all(math.isfinite(x) for x in result.loss_trace), True)
    p = Plot("Training curve", "epoch", "objective")
    p.add(cfg.train.head, range(1, len(result.loss_trace) + 1), result.loss_trace, marker=False)
    res.plots["training"] = p
    return res


def cmd_distill(cfg: ExperimentConfig, out: Path) -> Outcome:
    res = Outcome()
    run = detox_run(cfg, cfg.seed, heads=())
    if cfg.train.teacher_checkpoint:
        teacher, _ = load_checkpoint(cfg.train.teacher_checkpoint)
    else:
        teacher = VRewardModel.init(cfg.detox.vocab_size, cfg.detox.dim, seed=cfg.seed)
        train(teacher, run.data, _train_cfg(cfg, cfg.seed, cfg.train.teacher_epochs, 0.0))
    _check_vocab(teacher, cfg.detox.vocab_size, "teacher")
    before = parameter_digest(teacher)
    student = new_student(run.world, cfg, cfg.seed + 1, cfg.train.use_baseline)
    if teacher.dim != student.dim:
        raise ValueError(f"teacher dimension {teacher.dim} differs from student dimension {student.dim}")
    data = distill_dataset(teacher, run.data)
    result = train(student, data, _train_cfg(cfg, cfg.seed, cfg.train.epochs, cfg.train.reg_weight))
    held = distill_dataset(teacher, PrefixDataset.from_utterances(run.held_corpus))
    held_mse = dataset_mse(student, held)
    unchanged = parameter_digest(teacher) == before
    save_checkpoint(out / "student.npz", student, seed=cfg.seed + 1)
    res.files.append(out / "student.npz")
    t = ResultTable("distill", ("epochs", "final_objective", "train_mse", "heldout_mse_vs_teacher", "teacher_sha256"))
    t.add(result.epochs_run, result.loss_trace[-1], result.mse_trace[-1], held_mse, before)
    res.tables["distill"] = t
    res.values.update(heldout_mse=held_mse)
    res.check("teacher_unchanged", unchanged, True)
    res.check("finite_loss", math.isfinite(result.loss_trace[-1]), True)
    res.check("heldout_mse_below_1e-3", held_mse < 1e-3, False, f"{held_mse:.3g}")
    return res


def cmd_rank_study(cfg: ExperimentConfig, out: Path) -> Outcome:
    res = Outcome()
    run = detox_run(cfg, cfg.seed, heads=())
    models = {}
    for kind in ("v", "q"):
        path = cfg.train.teacher_checkpoint if kind == "v" else cfg.train.checkpoint
        if path:
            models[kind], _ = load_checkpoint(path)
            _check_vocab(models[kind], cfg.detox.vocab_size, f"{kind} checkpoint")
        else:
            models[kind], _ = _trained_head(cfg, kind, run, cfg.seed + (kind == "q"))
    sizes = list(cfg.rank_study.sizes)
    contexts = distinct_contexts(run.held_corpus, max(sizes), cfg.seed)
    v_curve = mc.row_sample_rank(lambda c: models["v"].score_row(c), contexts, sizes)
    q_curve = mc.row_sample_rank(lambda c: models["q"].score_all(c)[0], contexts, sizes)
    d = cfg.detox.dim
    t = ResultTable("rank_study", ("n_contexts", "v_rank", "q_rank", "dim"))
    for (n, rv), (_, rq) in zip(v_curve, q_curve):
        t.add(n, rv, rq, d)
    res.tables["rank_study"] = t
    q_ranks = [r for _, r in q_curve]
    v_ranks = [r for _, r in v_curve]
    res.values.update(v_ranks=v_ranks, q_ranks=q_ranks)
    res.check("q_rank_at_most_dim", max(q_ranks) <= d, True, f"max {max(q_ranks)}")
    res.check("ranks_non_decreasing", q_ranks == sorted(q_ranks) and v_ranks == sorted(v_ranks), True)
    p = Plot("Numerical rank of sampled reward rows", "sampled contexts N", "rank", hlines=[(d, f"d = {d}")])
    p.add("V-style", sizes, v_ranks)
    p.add("Q-style", sizes, q_ranks)
    res.plots["rank_study"] = p
    return res


def cmd_expressivity(cfg: ExperimentConfig, out: Path) -> Outcome:
    res = Outcome()
    ec = cfg.expressivity
    r = expressivity_experiment(ec.k, ec.dim, cfg.seed, ExpressivityConfig(epochs=ec.epochs, lr=ec.lr, lr_decay=ec.lr_decay))
    t = ResultTable("expressivity", ("k", "dim", "v_mse", "q_mse", "rank_floor"))
    t.add(r.k, r.d, r.v_mse, r.q_mse, r.floor)
    res.tables["expressivity"] = t
    res.values.update(v_mse=r.v_mse, q_mse=r.q_mse, floor=r.floor)
    res.check("v_fits", r.v_mse < 1e-4, True, f"{r.v_mse:.3g}")
    res.check("q_above_floor", r.q_mse >= 0.9 * r.floor, True, f"{r.q_mse:.3g} vs floor {r.floor:.3g}")
    res.check("floor_above_1e-4", r.floor > 1e-4, True, f"{r.floor:.3g}")
    return res


# -- decoding experiments -------------------------------------------------------------------


def _median(xs):
    return float(statistics.median(xs))


def strictly_decreasing(xs) -> bool:
    return all(b < a for a, b in zip(xs, xs[1:]))


def cmd_tradeoff(cfg: ExperimentConfig, out: Path) -> Outcome:
    res = Outcome()
    dc = cfg.decode
    cols = ("seed", "head", "beta", "top_k", "prompt_group") + METRIC_COLUMNS
    per_seed = ResultTable("tradeoff_runs", cols)
    heads = ("v", "qd", "qr")
    names = {"v": "V teacher", "qd": "Q distilled", "qr": "Q responses"}
    seeds = list(cfg.seeds)
    for seed in seeds:
        run = detox_run(cfg, seed)
        models = {"v": run.teacher, "qd": run.student, "qr": run.responses}
        base = BigramLm.from_process(run.world.process)
        evaluator = BigramLm.estimate(run.held_corpus, cfg.detox.vocab_size)
        ps = make_prompts(run.world.process, run.world.oracle, cfg.detox.n_prompts, cfg.detox.prompt_length, seed + 5)
        for head in heads:
            dump = []
            for k in dc.top_ks:
                for beta in dc.betas:
                    g = GuidanceConfig(beta=beta, top_k=k, max_new_tokens=dc.max_new_tokens, n_samples=dc.n_samples, seed=seed)
                    recs = generate_samples(base, models[head], g, ps.prompts)
                    groups = {"all": recs}
                    for name in ("high", "neutral", "low"):
                        groups[name] = [r for r, gname in zip(recs, ps.groups) if gname == name]
                    for gname, grecs in groups.items():
                        if not grecs:
                            continue
                        mt = evaluate(grecs, run.world.oracle, evaluator)
                        per_seed.add(seed, head, beta, k, gname, *(getattr(mt, c) for c in METRIC_COLUMNS))
                    if seed == seeds[0]:
                        dump += dump_rows(recs, run.world.oracle, evaluator, beta, k)
            if seed == seeds[0]:
                write_generation_dump(out / f"generations_{head}.tsv", dump)
                res.files.append(out / f"generations_{head}.tsv")
    res.tables["tradeoff_runs"] = per_seed
    summary = ResultTable("tradeoff", ("head", "beta", "top_k", "n_seeds") + METRIC_COLUMNS)
    med: dict = {}
    recs = [r for r in per_seed.records() if r["prompt_group"] == "all"]
    for head in heads:
        for k in dc.top_ks:
            for beta in dc.betas:
                rows = [r for r in recs if r["head"] == head and r["top_k"] == k and r["beta"] == beta]
                vals = {c: _median([r[c] for r in rows]) for c in METRIC_COLUMNS}
                med[(head, k, beta)] = vals
                summary.add(head, beta, k, len(rows), *(vals[c] for c in METRIC_COLUMNS))
    res.tables["tradeoff"] = summary
    res.values["medians"] = med
    stat_hard = len(seeds) >= MIN_STAT_SEEDS
    for seed in seeds:
        for k in dc.top_ks:
            if 0.0 in dc.betas:
                rows = [r for r in recs if r["seed"] == seed and r["top_k"] == k and r["beta"] == 0.0]
                same = all(tuple(r[c] for c in METRIC_COLUMNS) == tuple(rows[0][c] for c in METRIC_COLUMNS) for r in rows)
                res.check(f"beta0_identical_seed{seed}_k{k}", same, True)
    betas = sorted(dc.betas)
    for k in dc.top_ks:
        for head in heads:
            curve = [med[(head, k, b)]["avg_max_attribute"] for b in betas]
            res.check(f"monotone_{head}_k{k}", strictly_decreasing(curve), stat_hard, " > ".join(f"{c:.4f}" for c in curve))
        for b in betas:
            if b == 0.0:
                continue
            tv, ts = med[("v", k, b)], med[("qd", k, b)]
            da = abs(ts["avg_max_attribute"] - tv["avg_max_attribute"])
            dl = abs(ts["log_perplexity"] - tv["log_perplexity"]) / abs(tv["log_perplexity"])
            res.check(f"parity_attribute_k{k}_beta{b:g}", da <= 0.05, stat_hard, f"|diff|={da:.4f}")
            res.check(f"parity_logppl_k{k}_beta{b:g}", dl <= 0.05, stat_hard, f"rel diff={dl:.4f}")
        p = Plot(f"Attribute vs fluency (top-k = {k})", "log-perplexity (median)", "avg-max attribute (median)")
        for head in heads:
            p.add(names[head], [med[(head, k, b)]["log_perplexity"] for b in betas], [med[(head, k, b)]["avg_max_attribute"] for b in betas])
        res.plots[f"tradeoff_k{k}"] = p
    return res


def cmd_ablation(cfg: ExperimentConfig, out: Path) -> Outcome:
    res = Outcome()
    ac = cfg.ablation
    seed = cfg.seed
    run = detox_run(cfg, seed, heads=("v",))
    base = BigramLm.from_process(run.world.process)
    evaluator = BigramLm.estimate(run.held_corpus, cfg.detox.vocab_size)
    ps = make_prompts(run.world.process, run.world.oracle, cfg.detox.n_prompts, cfg.detox.prompt_length, seed + 5)
    contexts = distinct_contexts(run.held_corpus, ac.n_contexts, seed)
    held = distill_dataset(run.teacher, PrefixDataset.from_utterances(run.held_corpus))
    variants = [("baseline", w) for w in ac.reg_weights]
    if ac.no_baseline:
        variants.append(("no_baseline", 0.0))
    t = ResultTable(
        "ablation",
        (
            "variant",
            "reg_weight",
            "numerical_rank",
            "rank_rel_1e-3",
            "mean_abs_delta",
            "max_abs_delta",
            "final_objective",
            "heldout_mse_vs_teacher",
            "avg_max_attribute",
            "log_perplexity",
        ),
    )
    by_weight = {}
    for variant, w in variants:
        student = new_student(run.world, cfg, seed + 1, use_baseline=(variant == "baseline"))
        result = train(student, run.distill_data, _train_cfg(cfg, seed, cfg.train.epochs, w))
        rmat = assemble_q_reward_matrix(student, contexts)
        h = context_matrix(student, contexts)
        delta = student.head.delta_all(h)[:, 0]
        spec = mc.svd_spectrum(rmat)
        rank = mc.numerical_rank(spec, *rmat.shape)
        sv = spec.singular_values
        rel_rank = int(np.count_nonzero(sv > 1e-3 * sv[0])) if sv.size and sv[0] > 0 else 0
        g = GuidanceConfig(beta=ac.beta, top_k=cfg.decode.top_ks[0], max_new_tokens=cfg.decode.max_new_tokens, n_samples=cfg.decode.n_samples, seed=seed)
        mt = evaluate(generate_samples(base, student, g, ps.prompts), run.world.oracle, evaluator)
        row = (
            variant,
            w,
            rank,
            rel_rank,
            float(np.abs(delta).mean()),
            float(np.abs(delta).max()),
            result.loss_trace[-1],
            dataset_mse(student, held),
            mt.avg_max_attribute,
            mt.log_perplexity,
        )
        t.add(*row)
        if variant == "baseline":
            by_weight[w] = dict(zip(t.columns, row))
        else:
            res.check("no_baseline_finite_loss", math.isfinite(result.loss_trace[-1]), True)
    res.tables["ablation"] = t
    res.values["by_weight"] = by_weight
    grid = [w for w in (0.0, 0.1, 1.0) if w in by_weight]
    ranks = [by_weight[w]["numerical_rank"] for w in grid]
    deltas = [by_weight[w]["mean_abs_delta"] for w in grid]
    res.check("rank_non_increasing_in_reg", all(b <= a for a, b in zip(ranks, ranks[1:])), False, str(ranks))
    res.check("mean_abs_delta_decreasing_in_reg", strictly_decreasing(deltas), False, " > ".join(f"{x:.4g}" for x in deltas))
    if ac.collapse_weight in by_weight:
        top = by_weight[ac.collapse_weight]
        res.check(
            "collapse_to_baseline",
            top["max_abs_delta"] <= ac.collapse_tol,
            False,
            f"max |score - baseline| = {top['max_abs_delta']:.3g} at weight {ac.collapse_weight:g}",
        )
        res.check("collapsed_rank_at_most_2", top["numerical_rank"] <= 2, False, f"rank {top['numerical_rank']}")
    ws = sorted(by_weight)
    p = Plot("Regularization ablation", "regularization weight (0 shown at 1e-3)", "numerical rank", log_x=True)
    p.add("numerical rank", [w if w > 0 else 1e-3 for w in ws], [by_weight[w]["numerical_rank"] for w in ws])
    p.add("rank at 1e-3 relative cutoff", [w if w > 0 else 1e-3 for w in ws], [by_weight[w]["rank_rel_1e-3"] for w in ws])
    res.plots["ablation"] = p
    return res


TIMING_COLUMNS = ("seconds_per_token",)


def cmd_bench(cfg: ExperimentConfig, out: Path) -> Outcome:
    res = Outcome()
    bc = cfg.bench
    proc = BigramProcess.random(bc.vocab_size, seed=cfg.seed)
    base = BigramLm.from_process(proc)
    q = QRewardModel.init(bc.vocab_size, bc.dim, seed=cfg.seed)
    v = VRewardModel.init(bc.vocab_size, bc.dim, seed=cfg.seed)
    rows = bench(base, q, v, bc.k_grid, bc.max_new_tokens, bc.repetitions, seed=cfg.seed)
    t = ResultTable("bench", ("head", "top_k", "reward_tokens", "base_tokens", "generated", "seconds_per_token"))
    for r in rows:
        t.add(r.head, r.k, r.reward_tokens, r.base_tokens, r.generated_tokens, r.median_time_per_token)
    res.tables["bench"] = t
    L = bc.max_new_tokens
    by = {(r.head, r.k): r for r in rows}
    for k in bc.k_grid:
        qr, vr = by[("q", k)], by[("v", k)]
        res.check(f"q_counter_k{k}", qr.reward_tokens == L, True, str(qr.reward_tokens))
        res.check(f"v_counter_k{k}", vr.reward_tokens == L * k, True, str(vr.reward_tokens))
        res.check(f"base_counter_k{k}", qr.base_tokens == L and vr.base_tokens == L, True)
    timed = [k for k in (5, 20, 40) if k in bc.k_grid]
    vt = [by[("v", k)].median_time_per_token for k in timed]
    qt = [by[("q", k)].median_time_per_token for k in timed]
    res.values.update(v_times=vt, q_times=qt)
    if len(timed) >= 2:
        res.check("v_time_increasing", all(b > a for a, b in zip(vt, vt[1:])), False, " < ".join(f"{x:.3g}" for x in vt))
        spread = (max(qt) - min(qt)) / min(qt)
        res.check("q_time_flat", spread < 0.2, False, f"relative spread {spread:.3f}")
    p = Plot("Decoding cost per generated token", "top-k", "seconds per token (median)")
    ks = list(bc.k_grid)
    p.add("V-style", ks, [by[("v", k)].median_time_per_token for k in ks])
    p.add("Q-style", ks, [by[("q", k)].median_time_per_token for k in ks])
    res.plots["bench"] = p
    return res


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-matrix": cmd_build_matrix,
    "complete-table": cmd_complete_table,
    "rank-study": cmd_rank_study,
    "verify-lemmas": cmd_verify_lemmas,
    "train": cmd_train,
    "distill": cmd_distill,
    "tradeoff": cmd_tradeoff,
    "ablation": cmd_ablation,
    "bench": cmd_bench,
    "expressivity": cmd_expressivity,
}
