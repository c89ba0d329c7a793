import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankward import matcore as mc
from rankward.models import (
    CausalEncoder,
    ExpressivityConfig,
    PrefixDataset,
    QHead,
    QRewardModel,
    TrainConfig,
    TrainingDiverged,
    VRewardModel,
    assemble_q_reward_matrix,
    batch_objective,
    context_matrix,
    dataset_mse,
    distill_dataset,
    expressivity_experiment,
    grad_bce,
    grad_distill,
    grad_weighted_sq,
    load_checkpoint,
    loss_bce,
    loss_distill,
    loss_reg,
    loss_weighted_sq,
    parameter_digest,
    q_score_all,
    read_header,
    save_checkpoint,
    sigmoid,
    train,
    v_score,
)
from rankward.rewarddata import Utterance
from rankward.tasks import context_independent_corpus

FD_STEP = 1e-5
INSTANCES = range(20)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def fd_grads(f, params):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``params``."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + FD_STEP
            up = f()
            p[i] = old - FD_STEP
            down = f()
            p[i] = old
            g[i] = (up - down) / (2 * FD_STEP)
        out[name] = g
    return out


def randomize(model, rng, scale=0.5):
    for p in model.parameters().values():
        p[...] = rng.standard_normal(p.shape) * scale


def toy_data(rng, vocab, n=5, channels=1, max_len=5):
    utts = [Utterance(tuple(rng.integers(1, vocab, int(rng.integers(1, max_len + 1)))), float(rng.random())) for _ in range(n)]
    labels = rng.random((n, channels))
    return PrefixDataset.from_utterances(utts, labels)


# -- encoder -----------------------------------------------------------------------


def test_zero_encoder_states_are_zero():
    enc = CausalEncoder(np.zeros((5, 3)), np.zeros((3, 3)), np.zeros(3))
    assert not enc.encode([1, 2, 3, 4]).any()


def test_empty_sequence_gives_initial_state():
    enc = CausalEncoder.init(5, 3, np.random.default_rng(0))
    states = enc.encode([])
    assert states.shape == (1, 3) and not states.any()


@given(st.lists(st.integers(0, 6), min_size=1, max_size=15), st.integers(0, 100))
def test_encoder_is_causal(tokens, seed):
    enc = CausalEncoder.init(7, 4, np.random.default_rng(seed))
    full = enc.encode(tokens)
    for t in range(len(tokens) + 1):
        assert np.array_equal(enc.encode(tokens[:t]), full[: t + 1])


def test_batch_encoding_matches_single():
    rng = np.random.default_rng(1)
    enc = CausalEncoder.init(9, 4, rng)
    toks = rng.integers(0, 9, (3, 6))
    batch = enc.encode_batch(toks)
    for i in range(3):
        np.testing.assert_allclose(batch[i], enc.encode(toks[i]), atol=1e-15)


@pytest.mark.parametrize("seed", INSTANCES)
def test_encoder_gradient_of_state_sum(seed):
    rng = np.random.default_rng(seed)
    enc = CausalEncoder.init(6, 3, rng)
    enc.bias[...] = rng.standard_normal(3) * 0.3
    toks = rng.integers(0, 6, (2, 4))

    def f():
        return float(enc.encode_batch(toks).sum())

    states = enc.encode_batch(toks)
    d_states = np.ones_like(states)
    d_states[:, 0] = 0.0
    got = enc.backward_batch(toks, states, d_states)
    want = fd_grads(f, enc.parameters())
    for name in want:
        assert rel_err(got[name], want[name]) < 1e-5, name


# -- Q head --------------------------------------------------------------------------


def random_head(rng, d=5, vocab=11, channels=1):
    head = QHead.init(d, vocab, rng, channels=channels)
    head.interaction[...] = rng.standard_normal(head.interaction.shape)
    return head


def test_zero_interaction_scores_are_baseline():
    rng = np.random.default_rng(0)
    head = QHead.init(4, 9, rng)
    h = rng.standard_normal(4)
    np.testing.assert_array_equal(q_score_all(head, h), np.full(9, h @ head.baseline_weights[0]))


def test_zero_state_scores_are_zero():
    head = random_head(np.random.default_rng(0))
    assert not q_score_all(head, np.zeros(5)).any()


@pytest.mark.parametrize("seed", range(10))
def test_score_all_matches_naive_loop(seed):
    rng = np.random.default_rng(seed)
    head = random_head(rng, channels=2)
    h = rng.standard_normal(5)
    for c in range(2):
        w, W, E = head.baseline_weights[c], head.interaction[c], head.output_embeddings
        naive = np.array([h @ w + h @ (W @ E[:, v]) for v in range(E.shape[1])])
        assert np.abs(q_score_all(head, h, c) - naive).max() < 1e-12


def test_output_embedding_shape_checked():
    with pytest.raises(ValueError):
        QHead.init(4, 9, np.random.default_rng(0), output_embeddings=np.zeros((9, 4)))


# -- reward matrix rank ------------------------------------------------------------------


def random_q_model(seed, vocab, d):
    rng = np.random.default_rng(seed)
    model = QRewardModel.init(vocab, d, seed=seed)
    randomize(model, rng, 1.0)
    return model


def test_one_context_rank_at_most_one():
    model = random_q_model(0, 20, 6)
    assert mc.matrix_rank(assemble_q_reward_matrix(model, [(1, 2)])) <= 1


def test_rank_bounded_by_dim():
    model = random_q_model(1, 50, 8)
    rng = np.random.default_rng(1)
    contexts = [tuple(rng.integers(1, 50, int(rng.integers(0, 6)))) for _ in range(100)]
    assert mc.matrix_rank(assemble_q_reward_matrix(model, contexts)) <= 8


def test_matrix_equals_explicit_product():
    model = random_q_model(2, 30, 6)
    rng = np.random.default_rng(2)
    contexts = [tuple(rng.integers(1, 30, 3)) for _ in range(40)]
    h = context_matrix(model, contexts)
    head = model.head
    explicit = h @ (np.outer(head.baseline_weights[0], np.ones(30)) + head.interaction[0] @ head.output_embeddings)
    assert np.abs(assemble_q_reward_matrix(model, contexts) - explicit).max() < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 4, 8]), st.integers(1, 80))
def test_rank_bound_property(seed, d, n):
    model = random_q_model(seed, 24, d)
    rng = np.random.default_rng(seed)
    contexts = [tuple(rng.integers(1, 24, int(rng.integers(0, 5)))) for _ in range(n)]
    assert mc.matrix_rank(assemble_q_reward_matrix(model, contexts)) <= d


# -- V head -------------------------------------------------------------------------------


def test_zero_v_model_scores_zero():
    model = VRewardModel.init(8, 3, seed=0)
    for p in model.parameters().values():
        p[...] = 0.0
    assert v_score(model, (1, 2), 3) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_cached_prefix_score_matches_full_encode(seed):
    model = VRewardModel.init(12, 4, seed=seed)
    randomize(model, np.random.default_rng(seed))
    ctx = (3, 1, 4, 1, 5)
    for v in range(12):
        assert abs(v_score(model, ctx, v) - model.score(ctx, v)) < 1e-12


def test_trained_v_candidates_match_reencode():
    corpus, _, _ = context_independent_corpus(0)
    model = VRewardModel.init(16, 6, seed=0)
    train(model, PrefixDataset.from_utterances(corpus), TrainConfig(epochs=5, reg_weight=0.0))
    ctx = corpus[0].tokens[:3]
    cands = np.arange(1, 16).tolist() + [1, 2, 3, 4, 5]
    _, batched = model.score_candidates(model.context_state(ctx), cands)
    _, looped = model.score_candidates(model.context_state(ctx), cands, batched=False)
    brute = [model.score(ctx, c) for c in cands]
    assert np.abs(batched[:, 0] - brute).max() < 1e-12
    assert np.abs(batched - looped).max() < 1e-12


# -- losses -------------------------------------------------------------------------------


def test_squared_loss_examples():
    assert loss_weighted_sq(0.3, 0.3, 2.0) == 0.0
    assert loss_weighted_sq(0.0, 1.0, 1.0) == 1.0


def test_distill_loss_examples():
    assert loss_distill(0.4, 0.4) == 0.0
    assert loss_distill(0.0, 1.0) == 1.0


def test_bce_examples():
    assert loss_bce(0.0, 0.5, 1.0) == pytest.approx(math.log(2), abs=1e-15)
    assert loss_bce(800.0, 1.0, 1.0) == 0.0
    assert loss_bce(-800.0, 0.0, 1.0) == 0.0
    assert np.isfinite(loss_bce(-800.0, 1.0, 1.0))


@given(st.floats(-10, 10), st.floats(0, 1))
def test_bce_matches_direct_form(p, y):
    s = 1.0 / (1.0 + math.exp(-p))
    direct = -(y * math.log(s) + (1 - y) * math.log1p(-s)) if 0 < s < 1 else None
    if direct is not None and math.isfinite(direct):
        assert float(loss_bce(p, y)) == pytest.approx(direct, rel=1e-9, abs=1e-12)
    assert float(loss_bce(p, y)) >= 0.0


def scalar_fd(f, x):
    return (f(x + FD_STEP) - f(x - FD_STEP)) / (2 * FD_STEP)


@pytest.mark.parametrize("seed", INSTANCES)
def test_squared_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    p, y, w = rng.standard_normal(), rng.random(), rng.random() + 0.1
    want = scalar_fd(lambda x: float(loss_weighted_sq(x, y, w)), p)
    assert rel_err(grad_weighted_sq(p, y, w), want) < 1e-5
    assert float(grad_weighted_sq(p, y, w)) == pytest.approx(2 * w * (p - y), rel=1e-15)


@pytest.mark.parametrize("seed", INSTANCES)
def test_distill_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.standard_normal(2)
    assert rel_err(grad_distill(p, t), scalar_fd(lambda x: float(loss_distill(x, t)), p)) < 1e-5


@pytest.mark.parametrize("seed", INSTANCES)
def test_bce_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    grid = rng.uniform(-6, 6, 8)
    y, w = rng.random(), rng.random() + 0.1
    for p in grid:
        assert rel_err(grad_bce(p, y, w), scalar_fd(lambda x: float(loss_bce(x, y, w)), p)) < 1e-6


@pytest.mark.parametrize("seed", INSTANCES)
def test_reg_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    head = random_head(rng, d=4, vocab=7)
    h = rng.standard_normal((3, 4))
    toks = rng.integers(0, 7, 3)

    def f():
        return float(np.sum(loss_reg(head, h, toks)))

    delta, cache = head.delta_at(h, toks)
    grads = {"interaction": np.zeros_like(head.interaction)}
    dh = head.backward_delta(cache, 2 * delta, grads)
    want = fd_grads(f, {"interaction": head.interaction, "h": h})
    assert rel_err(grads["interaction"], want["interaction"]) < 1e-5
    assert rel_err(dh, want["h"]) < 1e-5


def test_reg_loss_examples():
    rng = np.random.default_rng(0)
    head = QHead.init(4, 9, rng)
    assert loss_reg(head, rng.standard_normal(4), 3) == 0.0
    head = random_head(rng, d=4, vocab=9)
    assert loss_reg(head, np.zeros(4), 3) == 0.0


def test_reg_expectation_by_enumeration():
    rng = np.random.default_rng(7)
    head = random_head(rng, d=5, vocab=20)
    h = rng.standard_normal(5)
    enumerated = np.mean([loss_reg(head, h, v) for v in range(20)])
    closed = np.mean([(h @ head.interaction[0] @ head.output_embeddings[:, v]) ** 2 for v in range(20)])
    assert enumerated == pytest.approx(closed, rel=1e-12)


# -- end-to-end objective gradients -----------------------------------------------------------


def model_variants():
    return {
        "q_sq": lambda s: QRewardModel.init(6, 3, seed=s),
        "q_two_channels": lambda s: QRewardModel.init(6, 3, seed=s, channels=2),
        "q_no_baseline": lambda s: QRewardModel.init(6, 3, seed=s, use_baseline=False),
        "q_mlp": lambda s: QRewardModel.init(6, 3, seed=s, mlp_width=4),
        "v": lambda s: VRewardModel.init(6, 3, seed=s),
    }


@pytest.mark.parametrize("loss", ["sq", "bce"])
@pytest.mark.parametrize("variant", list(model_variants()))
@pytest.mark.parametrize("seed", INSTANCES)
def test_objective_gradient(variant, loss, seed):
    rng = np.random.default_rng(seed)
    model = model_variants()[variant](seed)
    randomize(model, rng)
    data = toy_data(rng, 6, channels=model.channels)
    reg_w = 0.0 if variant == "v" else 0.7
    reg_tokens = rng.integers(0, 6, data.weights.shape)

    def f():
        return batch_objective(model, data, loss, reg_w, reg_tokens, need_grad=False)[0]

    _, _, got = batch_objective(model, data, loss, reg_w, reg_tokens)
    trainable = {k: v for k, v in model.parameters().items() if k not in model.frozen}
    want = fd_grads(f, trainable)
    assert set(got) == set(trainable)
    for name in want:
        assert rel_err(got[name], want[name]) < 1e-5, name


# -- training ------------------------------------------------------------------------------------


def partition_corpus_with_embeddings(seed, d=8):
    corpus, oracle, _ = context_independent_corpus(seed)
    rng = np.random.default_rng(100 + seed)
    emb = rng.standard_normal((d, 16)) / np.sqrt(d)
    emb[0] = [1.0 if v in oracle.bad_tokens else 0.0 for v in range(16)]
    return corpus, emb


def test_zero_learning_rate_leaves_parameters():
    corpus, _, _ = context_independent_corpus(0)
    model = QRewardModel.init(16, 4, seed=0)
    before = {k: v.tobytes() for k, v in model.parameters().items()}
    train(model, PrefixDataset.from_utterances(corpus), TrainConfig(lr=0.0, epochs=3))
    assert {k: v.tobytes() for k, v in model.parameters().items()} == before


def test_output_embeddings_stay_frozen():
    corpus, _, _ = context_independent_corpus(0)
    model = QRewardModel.init(16, 4, seed=0)
    e = model.head.output_embeddings.tobytes()
    w = model.head.interaction.copy()
    train(model, PrefixDataset.from_utterances(corpus), TrainConfig(epochs=3))
    assert model.head.output_embeddings.tobytes() == e
    assert not np.array_equal(model.head.interaction, w)


def test_training_is_deterministic():
    corpus, _, _ = context_independent_corpus(0)
    data = PrefixDataset.from_utterances(corpus)
    digests = []
    for _ in range(2):
        model = QRewardModel.init(16, 4, seed=3)
        train(model, data, TrainConfig(epochs=3, seed=5))
        digests.append(parameter_digest(model))
    assert digests[0] == digests[1]


def test_q_head_fits_context_independent_rewards():
    corpus, emb = partition_corpus_with_embeddings(0)
    data = PrefixDataset.from_utterances(corpus)
    model = QRewardModel.init(16, 8, seed=0, output_embeddings=emb)
    train(model, data, TrainConfig(epochs=200, reg_weight=0.0, weight_decay=0.0))
    assert dataset_mse(model, data) < 1e-4


def test_loss_on_fitted_data_does_not_grow():
    corpus, emb = partition_corpus_with_embeddings(1)
    data = PrefixDataset.from_utterances(corpus)
    model = QRewardModel.init(16, 8, seed=1, output_embeddings=emb)
    train(model, data, TrainConfig(epochs=200, reg_weight=0.0, weight_decay=0.0))
    res = train(model, data, TrainConfig(lr=1e-4, epochs=10, reg_weight=0.0, weight_decay=0.0))
    assert res.loss_trace[-1] <= res.loss_trace[0] * 1.5


def test_divergence_is_reported():
    corpus, _, _ = context_independent_corpus(0)
    data = PrefixDataset.from_utterances(corpus)
    bad = data.with_targets(np.full(data.targets.shape, np.nan))
    with pytest.raises(TrainingDiverged):
        train(QRewardModel.init(16, 4, seed=0), bad, TrainConfig(epochs=1))


def test_negative_reg_weight_rejected():
    corpus, _, _ = context_independent_corpus(0)
    with pytest.raises(ValueError):
        train(QRewardModel.init(16, 4), PrefixDataset.from_utterances(corpus), TrainConfig(reg_weight=-1.0))


def test_v_model_refuses_regularizer_gradient():
    model = VRewardModel.init(6, 3)
    data = toy_data(np.random.default_rng(0), 6)
    _, cache = model.forward_train(data.tokens)
    with pytest.raises(ValueError):
        model.backward_train(cache, np.zeros(data.targets.shape), np.zeros(data.targets.shape))


@pytest.mark.parametrize("y", [0.1, 0.5, 0.9])
def test_single_example_minimizers(y):
    # squared loss bottoms out at pred = y, cross-entropy at sigmoid(pred) = y
    grid = np.linspace(-5, 5, 200_001)
    assert grid[np.argmin(loss_weighted_sq(grid, y))] == pytest.approx(y, abs=1e-4)
    assert sigmoid(grid[np.argmin(loss_bce(grid, y))]) == pytest.approx(y, abs=1e-4)


# -- distillation -----------------------------------------------------------------------------------


def test_teacher_unchanged_by_distillation():
    corpus, _, _ = context_independent_corpus(0)
    data = PrefixDataset.from_utterances(corpus)
    teacher = VRewardModel.init(16, 6, seed=0)
    train(teacher, data, TrainConfig(epochs=3, reg_weight=0.0))
    digest = parameter_digest(teacher)
    student = QRewardModel.init(16, 6, seed=1)
    train(student, distill_dataset(teacher, data), TrainConfig(epochs=3))
    assert parameter_digest(teacher) == digest


def test_constant_teacher_is_learned():
    corpus, _, _ = context_independent_corpus(0)
    data = PrefixDataset.from_utterances(corpus)
    teacher = VRewardModel.init(16, 6, seed=0)
    for p in teacher.parameters().values():
        p[...] = 0.0
    targets = distill_dataset(teacher, data).with_targets(np.full(data.targets.shape, 0.3))
    student = QRewardModel.init(16, 6, seed=1)
    # a constant needs a saturated state coordinate; the decaying step gets below Adam's noise floor
    train(student, targets, TrainConfig(epochs=300, reg_weight=0.1, weight_decay=0.0, lr_decay=0.99))
    assert dataset_mse(student, targets) < 1e-6


# -- checkpoints ----------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "make",
    [
        lambda: QRewardModel.init(10, 4, seed=1, channels=2),
        lambda: QRewardModel.init(10, 4, seed=1, mlp_width=3),
        lambda: QRewardModel.init(10, 4, seed=1, use_baseline=False),
        lambda: VRewardModel.init(10, 4, seed=1),
    ],
)
def test_checkpoint_round_trip(tmp_path, make):
    model = make()
    randomize(model, np.random.default_rng(0))
    save_checkpoint(tmp_path / "m.npz", model, seed=1, extra={"note": "x"})
    back, header = load_checkpoint(tmp_path / "m.npz")
    assert parameter_digest(back) == parameter_digest(model)
    assert header["seed"] == 1 and header["dim"] == 4 and header["extra"] == {"note": "x"}
    assert read_header(tmp_path / "m.npz") == header
    assert type(back) is type(model)


def test_checkpoint_rejects_foreign_archive(tmp_path):
    np.savez(tmp_path / "x.npz", header=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.npz")


# -- expressivity ------------------------------------------------------------------------------------


def test_no_gap_when_dim_matches_size():
    r = expressivity_experiment(4, 4, seed=0)
    assert r.v_mse < 1e-6 and r.q_mse < 1e-6 and r.floor == 0.0


def test_q_error_grows_when_dim_drops():
    cfg = ExpressivityConfig()
    lo = expressivity_experiment(4, 3, seed=0, cfg=cfg, floor=False)
    hi = expressivity_experiment(4, 4, seed=0, cfg=cfg, floor=False)
    assert lo.q_mse > hi.q_mse
