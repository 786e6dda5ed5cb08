"""Coherence, losses, the optimizer, and the end-to-end training loop."""

import itertools
import math

import numpy as np
import pytest

from greedylearn.autodiff import GradientTape
from greedylearn.errors import EmptyBatch, ShapeMismatch, UnknownMethod, ZeroAtom
from greedylearn.pursuit import Dictionary
from greedylearn.synthetic import LabeledDataset
from greedylearn.training import (
    Adam,
    AdamConfig,
    LossConfig,
    TrainConfig,
    coherence_gradient,
    coherence_op,
    evaluate_model,
    loss,
    mutual_coherence,
    train,
)
from greedylearn.unrolled import AttentionParams, LgmParams, ListaParams


def brute_force_coherence(d):
    norms = [math.sqrt(float(np.dot(d[:, j], d[:, j]))) for j in range(d.shape[1])]
    best = 0.0
    for i, j in itertools.combinations(range(d.shape[1]), 2):
        best = max(best, abs(float(np.dot(d[:, i], d[:, j]))) / (norms[i] * norms[j]))
    return best


def test_coherence_of_orthogonal_atoms_is_zero():
    assert mutual_coherence(np.eye(5)) == 0.0
    assert mutual_coherence(3.0 * np.eye(4)) == 0.0


def test_coherence_of_duplicate_atom_is_one():
    rng = np.random.default_rng(0)
    d = rng.standard_normal((6, 4))
    d[:, 3] = -2.0 * d[:, 0]  # negated copy still attains 1
    assert mutual_coherence(d) == 1.0


def test_coherence_matches_brute_force_bitwise():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = rng.standard_normal((8, 12))
        assert mutual_coherence(d) == brute_force_coherence(d)


def test_coherence_validation():
    with pytest.raises(ShapeMismatch):
        mutual_coherence(np.ones((4, 1)))
    d = np.eye(3)
    d[:, 1] = 0.0
    with pytest.raises(ZeroAtom):
        mutual_coherence(d)


def test_coherence_accepts_dictionary_objects():
    d = np.eye(4)
    assert mutual_coherence(Dictionary(d)) == 0.0


def test_coherence_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    d = rng.standard_normal((7, 9))
    value, grad = coherence_gradient(d)
    assert value == mutual_coherence(d)
    step = 1e-7
    fd = np.zeros_like(d)
    for idx in np.ndindex(d.shape):
        dp = d.copy()
        dp[idx] += step
        dm = d.copy()
        dm[idx] -= step
        fd[idx] = (mutual_coherence(dp) - mutual_coherence(dm)) / (2 * step)
    assert np.max(np.abs(grad - fd)) < 1e-6


def test_coherence_gradient_touches_only_the_attaining_pair():
    rng = np.random.default_rng(3)
    d = rng.standard_normal((10, 6))
    _, grad = coherence_gradient(d)
    nonzero_cols = np.flatnonzero(np.any(grad != 0.0, axis=0))
    assert len(nonzero_cols) == 2


def test_coherence_op_records_on_tape():
    rng = np.random.default_rng(4)
    d = rng.standard_normal((5, 8))
    tape = GradientTape()
    node = tape.leaf(d, "dict")
    out = coherence_op(node)
    assert float(out.value) == mutual_coherence(d)
    tape.backward(np.asarray(3.0), root=out)
    grad = tape.grad_of("dict")
    assert np.allclose(grad, 3.0 * coherence_gradient(d)[1], atol=1e-14)


def test_loss_sum_l2_closed_form():
    outs = [np.array([1.0, 2.0]), np.array([0.0, -1.0])]
    targs = [np.array([0.0, 0.0]), np.array([0.0, 0.0])]
    value, seeds = loss(outs, targs, [], LossConfig(kind="sum-l2"))
    assert value == 5.0 + 1.0
    assert np.allclose(seeds[0], [2.0, 4.0])
    assert np.allclose(seeds[1], [0.0, -2.0])


def test_loss_log_sum_l2_closed_form():
    outs = [np.array([3.0, 0.0])]
    targs = [np.array([0.0, 4.0])]
    value, seeds = loss(outs, targs, [], LossConfig(kind="log-sum-l2"))
    assert abs(value - math.log(25.0)) < 1e-15
    assert np.allclose(seeds[0], (2.0 / 25.0) * np.array([3.0, -4.0]))


def test_loss_log_rejects_zero_fit():
    with pytest.raises(ValueError):
        loss([np.zeros(3)], [np.zeros(3)], [], LossConfig(kind="log-sum-l2"))


def test_loss_coherence_penalty_enters_once():
    rng = np.random.default_rng(5)
    d1 = rng.standard_normal((6, 8))
    d2 = rng.standard_normal((6, 8))
    outs = [np.array([1.0]), np.array([2.0])]
    targs = [np.array([0.0]), np.array([0.0])]
    base, _ = loss(outs, targs, [], LossConfig(xi=0.0))
    with_pen, seeds = loss(outs, targs, [d1, d2], LossConfig(xi=0.5))
    expected = 0.5 * (mutual_coherence(d1) + mutual_coherence(d2))
    assert abs(with_pen - base - expected) < 1e-14
    # seeds cover the fit term only
    assert np.allclose(seeds[0], [2.0])


def test_loss_batched_matches_list_form():
    rng = np.random.default_rng(6)
    outs = rng.standard_normal((4, 5))
    targs = rng.standard_normal((4, 5))
    v_b, s_b = loss(outs, targs, [], LossConfig())
    v_l, s_l = loss([outs[:, j] for j in range(5)],
                    [targs[:, j] for j in range(5)], [], LossConfig())
    assert abs(v_b - v_l) < 1e-12
    for j in range(5):
        assert np.allclose(s_b[:, j], s_l[j], atol=1e-14)


def test_loss_rejects_empty_and_mismatched_batches():
    with pytest.raises(EmptyBatch):
        loss([], [], [], LossConfig())
    with pytest.raises(EmptyBatch):
        loss(np.zeros((3, 0)), np.zeros((3, 0)), [], LossConfig())
    with pytest.raises(ShapeMismatch):
        loss([np.zeros(3)], [np.zeros(4)], [], LossConfig())


def test_loss_config_validation():
    with pytest.raises(UnknownMethod):
        LossConfig(kind="huber")
    with pytest.raises(ValueError):
        LossConfig(xi=-1.0)


def test_adam_first_step_closed_form():
    cfg = AdamConfig(learning_rate=0.1)
    opt = Adam(cfg)
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.array([0.5, -3.0])}
    out = opt.step(params, grads)
    # after bias correction the first step moves by lr * g / (|g| + eps)
    expected = params["w"] - 0.1 * grads["w"] / (np.abs(grads["w"]) + cfg.epsilon)
    assert np.allclose(out["w"], expected, atol=1e-12)


def test_adam_zero_gradient_is_identity():
    opt = Adam(AdamConfig(learning_rate=0.1))
    params = {"w": np.array([1.0, 2.0]), "b": np.array([3.0])}
    out = opt.step(params, {"w": np.zeros(2)})
    assert np.array_equal(out["w"], params["w"])
    assert np.array_equal(out["b"], params["b"])
    # moments untouched: a later real step still counts as t = 1
    out2 = opt.step(params, {"w": np.array([1.0, 1.0])})
    expected = params["w"] - 0.1 * np.ones(2) / (np.ones(2) + 1e-8)
    assert np.allclose(out2["w"], expected, atol=1e-12)


def test_adam_learning_rate_decay_schedule():
    opt = Adam(AdamConfig(learning_rate=1.0, decay_factor=0.5, decay_every=2))
    opt.end_epoch(1)
    assert opt.learning_rate == 1.0
    opt.end_epoch(2)
    assert opt.learning_rate == 0.5
    opt.end_epoch(3)
    assert opt.learning_rate == 0.5
    opt.end_epoch(4)
    assert opt.learning_rate == 0.25


def test_adam_config_validation():
    with pytest.raises(ValueError):
        AdamConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        AdamConfig(learning_rate=0.1, beta1=1.0)
    with pytest.raises(ValueError):
        AdamConfig(learning_rate=0.1, epsilon=0.0)
    with pytest.raises(ValueError):
        AdamConfig(learning_rate=0.1, decay_factor=0.0, decay_every=1)


def test_adam_rejects_mismatched_gradient_shape():
    opt = Adam(AdamConfig(learning_rate=0.1))
    with pytest.raises(ShapeMismatch):
        opt.step({"w": np.zeros(3)}, {"w": np.ones(4)})


def make_dataset(rng, n, m, s, n_signals, sigma):
    d = rng.standard_normal((n, m))
    d /= np.linalg.norm(d, axis=0)
    codes = np.zeros((m, n_signals))
    for j in range(n_signals):
        sup = rng.choice(m, size=s, replace=False)
        codes[sup, j] = rng.uniform(0.5, 1.0, size=s) * rng.choice([-1.0, 1.0], size=s)
    clean = d @ codes
    noisy = clean + sigma * rng.standard_normal(clean.shape)
    return d, LabeledDataset(clean, noisy, codes, sigma)


def lgm_model(d):
    return LgmParams(Dictionary(d.copy()), Dictionary(d.copy()))


def test_train_config_validation():
    adam = AdamConfig(learning_rate=0.01)
    with pytest.raises(UnknownMethod):
        TrainConfig(kind="svm", epochs=1, adam=adam)
    with pytest.raises(ValueError):
        TrainConfig(kind="lgm", epochs=-1, adam=adam, max_cardinality=3)
    with pytest.raises(ValueError):
        TrainConfig(kind="lgm", epochs=1, adam=adam)  # missing cardinality
    with pytest.raises(ValueError):
        TrainConfig(kind="lgm", epochs=1, adam=adam, max_cardinality=3, batch_size=0)
    cfg = TrainConfig(kind="lgm-mmse", epochs=1, adam=adam, max_cardinality=3)
    assert cfg.rand is not None  # filled with defaults
    TrainConfig(kind="lista", epochs=1, adam=adam)  # no cardinality needed


def test_train_wrong_model_type_rejected():
    rng = np.random.default_rng(7)
    d, data = make_dataset(rng, 8, 12, 2, 10, 0.05)
    cfg = TrainConfig(kind="lista", epochs=1, adam=AdamConfig(learning_rate=1e-4))
    with pytest.raises(ShapeMismatch):
        train(lgm_model(d), cfg, data)


def test_train_rejects_attention_for_lista():
    rng = np.random.default_rng(8)
    d, data = make_dataset(rng, 8, 12, 2, 10, 0.05)
    cfg = TrainConfig(kind="lista", epochs=1, adam=AdamConfig(learning_rate=1e-4))
    with pytest.raises(ValueError):
        train(ListaParams.init(d, 3), cfg, data,
              attention=AttentionParams.zeros(8, 3))


def test_train_lgm_reduces_loss_and_tracks_history():
    rng = np.random.default_rng(9)
    d, data = make_dataset(rng, 10, 20, 3, 40, 0.05)
    test = make_dataset(np.random.default_rng(10), 10, 20, 3, 15, 0.05)[1]
    # perturb the model so there is something to learn
    d0 = d + 0.3 * np.random.default_rng(11).standard_normal(d.shape)
    cfg = TrainConfig(kind="lgm", epochs=3, adam=AdamConfig(learning_rate=0.005),
                      batch_size=16, seed=1, max_cardinality=3)
    seen = []
    run = train(lgm_model(d0), cfg, data, test, reference=d,
                callback=lambda e, row: seen.append(e))
    assert run.epochs_completed == 3
    assert seen == [1, 2, 3]
    assert run.history[-1]["train_loss"] < run.initial["train_loss"]
    assert all(np.isfinite(row["test_mse"]) for row in run.history)
    assert all(np.isfinite(row["dict_distance"]) for row in run.history)
    rows = run.rows()
    assert rows[0]["epoch"] == 0
    assert [r["epoch"] for r in rows] == [0, 1, 2, 3]


def test_train_is_deterministic_given_seed():
    rng = np.random.default_rng(12)
    d, data = make_dataset(rng, 8, 16, 2, 20, 0.05)
    d0 = d + 0.2 * np.random.default_rng(13).standard_normal(d.shape)
    cfg = TrainConfig(kind="lgm", epochs=2, adam=AdamConfig(learning_rate=0.01),
                      batch_size=8, seed=5, max_cardinality=2)
    run_a = train(lgm_model(d0), cfg, data)
    run_b = train(lgm_model(d0), cfg, data)
    assert np.array_equal(run_a.params.analysis.atoms, run_b.params.analysis.atoms)
    assert np.array_equal(run_a.params.synthesis.atoms, run_b.params.synthesis.atoms)
    # NaN entries (no test set) defeat dict equality; compare the losses
    assert [r["train_loss"] for r in run_a.history] == \
        [r["train_loss"] for r in run_b.history]


def test_train_zero_epochs_returns_initial_row_only():
    rng = np.random.default_rng(14)
    d, data = make_dataset(rng, 8, 16, 2, 10, 0.05)
    cfg = TrainConfig(kind="lgm", epochs=0, adam=AdamConfig(learning_rate=0.01),
                      max_cardinality=2)
    run = train(lgm_model(d), cfg, data)
    assert run.epochs_completed == 0
    assert run.rows() == [{"epoch": 0, **run.initial}]
    assert np.array_equal(run.params.analysis.atoms, d)
    assert math.isnan(run.initial["test_mse"])
    assert math.isnan(run.initial["dict_distance"])


def test_train_run_write_csv_round_trips(tmp_path):
    rng = np.random.default_rng(15)
    d, data = make_dataset(rng, 8, 16, 2, 10, 0.05)
    cfg = TrainConfig(kind="lgm", epochs=1, adam=AdamConfig(learning_rate=0.01),
                      max_cardinality=2, seed=2)
    run = train(lgm_model(d), cfg, data)
    path = tmp_path / "run.csv"
    run.write_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,test_mse,mean_cardinality,dict_distance"
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[0] == "0"
    # repr round trip keeps the float exact
    assert float(first[1]) == run.initial["train_loss"]
    assert math.isnan(float(first[2]))


def test_train_lista_keeps_thresholds_nonnegative():
    rng = np.random.default_rng(16)
    d, data = make_dataset(rng, 8, 16, 2, 30, 0.05)
    params = ListaParams.init(d, 4, theta0=1e-4)
    cfg = TrainConfig(kind="lista", epochs=3, adam=AdamConfig(learning_rate=0.05),
                      batch_size=10, seed=3)
    run = train(params, cfg, data)
    assert np.all(run.params.theta >= 0.0)
    assert run.epochs_completed == 3


def test_train_lmp_and_mmse_kinds_run():
    rng = np.random.default_rng(17)
    d, data = make_dataset(rng, 8, 16, 2, 12, 0.05)
    for kind in ("lmp", "lgm-mmse"):
        cfg = TrainConfig(kind=kind, epochs=1, adam=AdamConfig(learning_rate=0.002),
                          batch_size=6, seed=4, max_cardinality=2)
        run = train(lgm_model(d), cfg, data)
        assert run.epochs_completed == 1
        assert np.isfinite(run.history[0]["train_loss"])


def test_train_with_attention_updates_attention():
    rng = np.random.default_rng(18)
    d, data = make_dataset(rng, 8, 16, 2, 12, 0.05)
    att = AttentionParams.init(8, 2, seed=7)
    cfg = TrainConfig(kind="lgm", epochs=1, adam=AdamConfig(learning_rate=0.01),
                      batch_size=6, seed=5, max_cardinality=2)
    run = train(lgm_model(d), cfg, data, attention=att)
    assert run.attention is not None
    moved = any(not np.array_equal(a, b)
                for a, b in zip(run.attention.w1, att.w1))
    assert moved or not np.array_equal(run.attention.w_out, att.w_out)


def test_train_coherence_penalty_lowers_coherence():
    rng = np.random.default_rng(19)
    d, data = make_dataset(rng, 8, 16, 2, 20, 0.02)
    d0 = d.copy()
    d0[:, 1] = d0[:, 0] + 0.05 * rng.standard_normal(8)  # nearly duplicate pair
    cfg = TrainConfig(kind="lgm", epochs=2, adam=AdamConfig(learning_rate=0.01),
                      batch_size=10, seed=6, max_cardinality=2,
                      loss=LossConfig(xi=5.0))
    run = train(lgm_model(d0), cfg, data)
    assert mutual_coherence(run.params.analysis.atoms) < mutual_coherence(d0)


def test_evaluate_model_cardinality_conventions():
    rng = np.random.default_rng(20)
    d, data = make_dataset(rng, 10, 20, 3, 8, 0.01)
    adam = AdamConfig(learning_rate=0.01)
    cfg = TrainConfig(kind="lgm", epochs=0, adam=adam, max_cardinality=3)
    mse, card = evaluate_model("lgm", lgm_model(d), None, cfg, data)
    assert card == 3.0  # exact-cardinality stop selects s atoms per signal
    assert mse < 0.1
    lista = ListaParams.init(d, 3, theta0=0.0)
    cfg_l = TrainConfig(kind="lista", epochs=0, adam=adam)
    _, card_l = evaluate_model("lista", lista, None, cfg_l, data)
    assert card_l > 3.0  # thresholding at zero keeps dense codes
    with pytest.raises(EmptyBatch):
        empty = LabeledDataset(np.zeros((10, 0)), np.zeros((10, 0)),
                               np.zeros((20, 0)), 0.0)
        evaluate_model("lgm", lgm_model(d), None, cfg, empty)
