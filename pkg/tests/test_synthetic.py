"""Synthetic data generation, method evaluation, and dataset storage."""

import math

import numpy as np
import pytest

from greedylearn.errors import EmptyBatch, ShapeMismatch, UnknownMethod
from greedylearn.pursuit import Dictionary
from greedylearn.synthetic import (
    EvalContext,
    LabeledDataset,
    SyntheticSpec,
    dictionary_distance,
    evaluate_methods,
    gen_dataset,
    load_dataset,
    make_dct_dictionary,
    save_dataset,
    write_results_csv,
)
from greedylearn.unrolled import LgmParams, ListaParams


def test_dct_square_case_is_orthonormal():
    d = make_dct_dictionary(16, 16)
    assert np.max(np.abs(d.T @ d - np.eye(16))) < 1e-10


def test_dct_columns_are_unit_norm_and_mean_removed():
    d = make_dct_dictionary(12, 30)
    assert d.shape == (12, 30)
    assert np.allclose(np.linalg.norm(d, axis=0), 1.0, atol=1e-12)
    assert np.allclose(d[:, 1:].mean(axis=0), 0.0, atol=1e-12)
    # first column is the constant atom
    assert np.allclose(d[:, 0], d[0, 0])


def test_dct_rejects_wide_before_tall():
    with pytest.raises(ShapeMismatch):
        make_dct_dictionary(10, 8)
    with pytest.raises(ShapeMismatch):
        make_dct_dictionary(0, 8)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(n=10, m=8)
    with pytest.raises(ValueError):
        SyntheticSpec(cardinalities=())
    with pytest.raises(ValueError):
        SyntheticSpec(n=10, m=20, cardinalities=(25,))
    with pytest.raises(ValueError):
        SyntheticSpec(signals_per_cardinality=0)
    with pytest.raises(ValueError):
        SyntheticSpec(sigmas=(0.1, 0.0))
    spec = SyntheticSpec(n=10, m=20, cardinalities=(3, 5),
                         signals_per_cardinality=7)
    assert spec.n_signals == 14


def small_spec(**overrides):
    base = dict(n=16, m=32, cardinalities=(3,), signals_per_cardinality=40,
                sigmas=(0.05, 0.1), seed=3)
    base.update(overrides)
    return SyntheticSpec(**base)


def test_gen_dataset_clean_signals_match_codes():
    spec = small_spec()
    d = make_dct_dictionary(spec.n, spec.m)
    datasets = gen_dataset(spec, d)
    data = datasets[0.05]
    assert np.max(np.abs(data.clean - d @ data.codes)) < 1e-12
    for j in range(data.n_signals):
        assert len(data.support(j)) == 3
        assert abs(np.max(np.abs(data.clean[:, j])) - 1.0) < 1e-12


def test_gen_dataset_shares_clean_pool_across_sigmas():
    spec = small_spec()
    d = make_dct_dictionary(spec.n, spec.m)
    datasets = gen_dataset(spec, d)
    a, b = datasets[0.05], datasets[0.1]
    assert np.array_equal(a.clean, b.clean)
    assert np.array_equal(a.codes, b.codes)
    assert not np.array_equal(a.noisy, b.noisy)
    assert a.sigma == 0.05 and b.sigma == 0.1


def test_gen_dataset_noise_level_is_calibrated():
    spec = small_spec(n=32, m=64, signals_per_cardinality=200, sigmas=(0.08,))
    d = make_dct_dictionary(spec.n, spec.m)
    data = gen_dataset(spec, d)[0.08]
    noise = data.noisy - data.clean
    assert abs(np.std(noise) - 0.08) / 0.08 < 0.05


def test_gen_dataset_noise_streams_are_independent_of_sigma_list():
    # dropping the second noise level must not change the first one's draws
    d = make_dct_dictionary(16, 32)
    both = gen_dataset(small_spec(), d)
    only = gen_dataset(small_spec(sigmas=(0.05,)), d)
    assert np.array_equal(both[0.05].noisy, only[0.05].noisy)


def test_gen_dataset_is_deterministic():
    spec = small_spec()
    d = make_dct_dictionary(spec.n, spec.m)
    a = gen_dataset(spec, d)[0.1]
    b = gen_dataset(spec, d)[0.1]
    assert np.array_equal(a.noisy, b.noisy)
    assert np.array_equal(a.clean, b.clean)


def test_gen_dataset_rejects_wrong_dictionary_shape():
    with pytest.raises(ShapeMismatch):
        gen_dataset(small_spec(), np.eye(16))


def test_distance_is_exactly_zero_on_matching_dictionaries():
    rng = np.random.default_rng(0)
    for trial in range(20):
        d = rng.standard_normal((12, 20))
        assert dictionary_distance(d, d) == 0.0
        perm = rng.permutation(20)
        signs = rng.choice([-1.0, 1.0], size=20)
        assert dictionary_distance(d, d[:, perm] * signs) == 0.0


def test_distance_is_bounded_and_detects_mismatch():
    rng = np.random.default_rng(1)
    d = rng.standard_normal((10, 16))
    other = rng.standard_normal((10, 16))
    dist = dictionary_distance(d, other)
    assert 0.0 < dist <= 1.0
    # orthogonal atoms are the worst case and clip at one
    assert dictionary_distance(np.eye(4)[:, :2], np.eye(4)[:, 2:]) == 1.0


def test_distance_accepts_dictionary_objects():
    d = np.eye(5)
    assert dictionary_distance(Dictionary(d), Dictionary(d.copy())) == 0.0


def test_distance_rejects_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dictionary_distance(np.eye(4), np.eye(5))


def eval_setup():
    spec = small_spec(signals_per_cardinality=25, sigmas=(0.05, 0.1))
    d = make_dct_dictionary(spec.n, spec.m)
    datasets = gen_dataset(spec, d)
    ctx = EvalContext(dictionary=Dictionary(d), cardinality=3,
                      lgm_params=LgmParams(Dictionary(d.copy()), Dictionary(d.copy())),
                      lista_params=ListaParams.init(d, 5, theta0=0.05))
    return datasets, ctx


def test_evaluate_methods_appends_oracle_with_lowest_mse():
    datasets, ctx = eval_setup()
    rows = evaluate_methods(datasets, ["omp", "lgm"], ctx)
    methods = {row["method"] for row in rows}
    assert methods == {"omp", "lgm", "oracle"}
    assert len(rows) == 6  # 3 methods x 2 sigmas
    for sigma in (0.05, 0.1):
        per = {r["method"]: r["mse"] for r in rows if r["sigma"] == sigma}
        assert per["oracle"] <= min(per.values()) + 1e-15


def test_evaluate_methods_deduplicates_and_orders_by_sigma():
    datasets, ctx = eval_setup()
    rows = evaluate_methods(datasets, ["omp", "omp", "oracle"], ctx)
    assert [r["method"] for r in rows] == ["omp", "oracle", "omp", "oracle"]
    assert [r["sigma"] for r in rows] == [0.05, 0.05, 0.1, 0.1]


def test_evaluate_methods_exact_cardinality_variants():
    datasets, ctx = eval_setup()
    rows = evaluate_methods(datasets[0.05], ["omp-cardinality", "lgm-cardinality"],
                            ctx)
    per = {r["method"]: r for r in rows}
    assert per["omp-cardinality"]["card_mean"] == 3.0
    assert per["omp-cardinality"]["card_std"] == 0.0
    assert per["lgm-cardinality"]["card_mean"] == 3.0
    # identical dictionaries: the learned net reproduces the pursuit
    assert abs(per["omp-cardinality"]["mse"] - per["lgm-cardinality"]["mse"]) < 1e-10


def test_evaluate_methods_mmse_variants_run():
    datasets, ctx = eval_setup()
    rows = evaluate_methods(datasets[0.1], ["omp-mmse", "lgm-mmse", "lista"], ctx)
    per = {r["method"]: r for r in rows}
    assert abs(per["omp-mmse"]["mse"] - per["lgm-mmse"]["mse"]) < 1e-10
    assert per["lista"]["mse"] > 0.0


def test_evaluate_methods_unknown_method_rejected():
    datasets, ctx = eval_setup()
    with pytest.raises(UnknownMethod):
        evaluate_methods(datasets, ["ihp"], ctx)


def test_evaluate_methods_missing_context_pieces():
    datasets, _ = eval_setup()
    with pytest.raises(ValueError):
        evaluate_methods(datasets, ["lista"], EvalContext(cardinality=3))
    with pytest.raises(ValueError):
        evaluate_methods(datasets, ["lgm"], EvalContext(
            dictionary=Dictionary(np.eye(16)), cardinality=3))


def test_evaluate_methods_empty_input_rejected():
    _, ctx = eval_setup()
    with pytest.raises(EmptyBatch):
        evaluate_methods({}, ["omp"], ctx)


def test_eval_context_cap_rules():
    assert EvalContext(max_cardinality=7).cap() == 7
    assert EvalContext(cardinality=4).cap() == 8
    assert EvalContext(cardinality=4, max_cardinality=5).cap() == 5
    with pytest.raises(ValueError):
        EvalContext().cap()


def test_write_results_csv_round_trips_floats(tmp_path):
    rows = [{"method": "omp", "sigma": 0.1, "mse": 1.0 / 3.0,
             "card_mean": 3.0, "card_std": 0.5}]
    path = tmp_path / "results.csv"
    write_results_csv(rows, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "method,sigma,mse,card_mean,card_std"
    cells = lines[1].split(",")
    assert cells[0] == "omp"
    assert float(cells[2]) == 1.0 / 3.0


def test_save_and_load_dataset_round_trip(tmp_path):
    spec = small_spec(signals_per_cardinality=10)
    d = make_dct_dictionary(spec.n, spec.m)
    datasets = gen_dataset(spec, d)
    save_dataset(tmp_path / "data", spec, d, datasets)
    spec_back, d_back, back = load_dataset(tmp_path / "data")
    assert spec_back == spec
    assert np.array_equal(d_back, d)
    assert set(back) == set(datasets)
    for sigma, data in datasets.items():
        assert np.array_equal(back[sigma].clean, data.clean)
        assert np.array_equal(back[sigma].noisy, data.noisy)
        assert np.array_equal(back[sigma].codes, data.codes)
        assert back[sigma].sigma == sigma


def test_labeled_dataset_validation():
    with pytest.raises(ShapeMismatch):
        LabeledDataset(np.zeros((4, 3)), np.zeros((4, 2)), np.zeros((8, 3)), 0.1)
    with pytest.raises(ShapeMismatch):
        LabeledDataset(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((8, 2)), 0.1)


def test_labeled_dataset_support_reads_codes():
    codes = np.zeros((6, 2))
    codes[[1, 4], 0] = [0.5, -0.25]
    data = LabeledDataset(np.zeros((3, 2)), np.zeros((3, 2)), codes, 0.1)
    assert list(data.support(0)) == [1, 4]
    assert list(data.support(1)) == []


def test_oracle_mse_scales_with_noise():
    datasets, ctx = eval_setup()
    rows = evaluate_methods(datasets, ["oracle"], ctx)
    oracle = sorted((r for r in rows if r["method"] == "oracle"),
                    key=lambda r: r["sigma"])
    assert oracle[0]["mse"] < oracle[1]["mse"]
    # projecting onto s atoms keeps roughly s/n of the noise energy
    n, s = 16, 3
    for row in oracle:
        expected = row["sigma"] ** 2 * s
        assert 0.3 * expected < row["mse"] < 3.0 * expected


def test_dataset_math_fsum_normalization_is_stable():
    # normalization must not depend on how the buffer is laid out
    rng = np.random.default_rng(2)
    d = rng.standard_normal((9, 14))
    padded = np.empty((9, 15))
    padded[:, 1:] = d
    assert dictionary_distance(d, padded[:, 1:]) == 0.0
