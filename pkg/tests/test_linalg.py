"""Dense kernels: factorizations, solvers, and the matrix file format."""

import numpy as np
import pytest

from greedylearn.errors import CorruptHeader, NotPositiveDefinite, ShapeMismatch
from greedylearn.linalg import (
    cholesky,
    cholesky_append,
    chol_solve,
    inverse_gradient,
    load_matrix,
    ls_solve,
    save_matrix,
    solve_lower,
    solve_upper,
    spd_inverse,
)


def spd(rng, k):
    a = rng.standard_normal((k + 2, k))
    return a.T @ a


def test_cholesky_reconstructs_gram():
    rng = np.random.default_rng(0)
    for k in (1, 2, 5, 12):
        g = spd(rng, k)
        low = cholesky(g)
        assert np.allclose(low @ low.T, g, atol=1e-10)
        assert np.allclose(np.triu(low, 1), 0.0)


def test_cholesky_known_2x2():
    # [[4,2],[2,5]] = [[2,0],[1,2]] [[2,1],[0,2]]
    low = cholesky(np.array([[4.0, 2.0], [2.0, 5.0]]))
    assert np.allclose(low, [[2.0, 0.0], [1.0, 2.0]], atol=1e-15)


def test_cholesky_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.array([[0.0]]))


def test_cholesky_append_matches_full_factorization():
    rng = np.random.default_rng(1)
    g = spd(rng, 7)
    low = cholesky(g[:1, :1])
    for k in range(1, 7):
        low = cholesky_append(low, g[:k, k], g[k, k])
        assert np.allclose(low, cholesky(g[: k + 1, : k + 1]), atol=1e-10)


def test_cholesky_append_rejects_dependent_column():
    # appending a duplicate atom makes the Schur complement vanish
    d = np.array([[1.0, 1.0], [0.0, 0.0]])
    g = d.T @ d
    low = cholesky(g[:1, :1])
    with pytest.raises(NotPositiveDefinite):
        cholesky_append(low, g[:1, 1], g[1, 1])


def test_triangular_solvers():
    rng = np.random.default_rng(2)
    low = np.tril(rng.standard_normal((6, 6))) + 6.0 * np.eye(6)
    b = rng.standard_normal(6)
    assert np.allclose(low @ solve_lower(low, b), b, atol=1e-10)
    up = low.T
    assert np.allclose(up @ solve_upper(up, b), b, atol=1e-10)
    b2 = rng.standard_normal((6, 3))
    assert np.allclose(low @ solve_lower(low, b2), b2, atol=1e-10)


def test_chol_solve_matches_numpy():
    rng = np.random.default_rng(3)
    g = spd(rng, 8)
    b = rng.standard_normal(8)
    assert np.allclose(chol_solve(cholesky(g), b), np.linalg.solve(g, b), atol=1e-8)


def test_ls_solve_matches_lstsq():
    rng = np.random.default_rng(4)
    basis = rng.standard_normal((20, 6))
    x = rng.standard_normal(20)
    ref = np.linalg.lstsq(basis, x, rcond=None)[0]
    assert np.allclose(ls_solve(basis, x), ref, atol=1e-8)


def test_ls_solve_exact_on_consistent_system():
    rng = np.random.default_rng(5)
    basis = rng.standard_normal((10, 4))
    coeffs = rng.standard_normal(4)
    got = ls_solve(basis, basis @ coeffs)
    assert np.allclose(got, coeffs, atol=1e-10)


def test_spd_inverse():
    rng = np.random.default_rng(6)
    g = spd(rng, 9)
    assert np.allclose(spd_inverse(g) @ g, np.eye(9), atol=1e-8)


def test_inverse_gradient_matches_finite_differences():
    # d tr(U^T A^{-1}) / dA = -A^{-T} U A^{-T}; the factorization reads one
    # triangle, so probe with symmetric perturbations
    rng = np.random.default_rng(7)
    g = spd(rng, 4)
    upstream = rng.standard_normal((4, 4))
    grad = inverse_gradient(spd_inverse(g), upstream)
    step = 1e-6
    for i in range(4):
        for j in range(i, 4):
            gp, gm = g.copy(), g.copy()
            gp[i, j] += step
            gm[i, j] -= step
            if j != i:
                gp[j, i] += step
                gm[j, i] -= step
            fd = (np.sum(upstream * spd_inverse(gp))
                  - np.sum(upstream * spd_inverse(gm))) / (2 * step)
            expect = grad[i, i] if j == i else grad[i, j] + grad[j, i]
            assert abs(expect - fd) < 1e-5


def test_matrix_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(8)
    m = rng.standard_normal((5, 7))
    base = tmp_path / "mat"
    save_matrix(base, m)
    assert (tmp_path / "mat.json").exists() and (tmp_path / "mat.bin").exists()
    back = load_matrix(base)
    assert back.shape == (5, 7)
    assert np.array_equal(back, m)


def test_matrix_header_validation(tmp_path):
    save_matrix(tmp_path / "m", np.ones((2, 2)))
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(CorruptHeader):
        load_matrix(tmp_path / "m")

    save_matrix(tmp_path / "k", np.ones((2, 2)))
    # payload shorter than rows*cols*8
    (tmp_path / "k.bin").write_bytes(b"\x00" * 8)
    with pytest.raises(CorruptHeader):
        load_matrix(tmp_path / "k")


def test_matrix_rejects_bad_shape():
    with pytest.raises(ShapeMismatch):
        cholesky(np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        ls_solve(np.ones((3, 2)), np.ones(4))
