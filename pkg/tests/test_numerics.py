import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrvd.numerics import (
    ConvergenceError,
    Rng,
    ShapeError,
    matmul,
    matrix_from_json,
    matrix_to_json,
    sample_gaussian,
    sample_matrix_normal,
    svd,
)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_annihilation():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, np.eye(2)), a)
    assert np.array_equal(matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[0.0], [1.0]])), np.zeros((2, 1)))


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.max(np.abs(matmul(a, b) - triple_loop(a, b))) < 1e-12


def test_matmul_dimension_error_is_descriptive():
    with pytest.raises(ShapeError, match="2x3.*2x2"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_associativity(rng):
    for i in range(20):
        s = rng.substream(i)
        a, b, c = s.standard_normal((4, 6)), s.standard_normal((6, 5)), s.standard_normal((5, 3))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        assert np.linalg.norm(left - right) / np.linalg.norm(left) < 1e-10


def test_matrix_json_round_trip(rng):
    m = rng.standard_normal((3, 4))
    obj = json.loads(json.dumps(matrix_to_json(m)))
    assert obj["rows"] == 3 and obj["cols"] == 4 and len(obj["data"]) == 12
    assert np.array_equal(matrix_from_json(obj), m)
    with pytest.raises(ShapeError):
        matrix_from_json({"rows": 2, "cols": 2, "data": [1.0, 2.0, 3.0]})


def test_svd_diagonal_and_zero():
    assert np.allclose(svd(np.diag([3.0, 2.0, 1.0])).sigma, [3, 2, 1], atol=1e-14)
    res = svd(np.zeros((4, 3)))
    assert np.all(res.sigma == 0)
    assert np.allclose(res.u.T @ res.u, np.eye(3), atol=1e-12)


def test_svd_random_8x6_against_gram_eigenvalues(rng):
    m = rng.standard_normal((8, 6))
    res = svd(m)
    assert np.linalg.norm(res.reconstruct() - m) / np.linalg.norm(m) < 1e-8
    oracle = np.sqrt(np.clip(np.sort(np.linalg.eigvalsh(m.T @ m))[::-1], 0, None))
    assert np.max(np.abs(res.sigma - oracle)) < 1e-8


def test_svd_invariants_on_many_matrices():
    base = Rng(99)
    for i in range(100):
        s = base.substream(i)
        rows, cols = (int(v) for v in s.generator.integers(1, 33, size=2))
        m = s.standard_normal((rows, cols))
        if i % 10 == 0:  # include rank-deficient inputs
            m[:, : cols // 2] = 0.0
        res = svd(m)
        assert np.linalg.norm(res.reconstruct() - m) <= 1e-8 * max(np.linalg.norm(m), 1e-300)
        assert np.all(res.sigma >= 0) and np.all(np.diff(res.sigma) <= 0)
        k = res.sigma.size
        assert np.max(np.abs(res.u.T @ res.u - np.eye(k))) < 1e-9
        assert np.max(np.abs(res.v.T @ res.v - np.eye(k))) < 1e-9


def test_svd_nonconvergence_names_dimensions(rng):
    with pytest.raises(ConvergenceError, match="6x5"):
        svd(rng.standard_normal((6, 5)), max_sweeps=1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_svd_property_reconstruction(rows, cols, seed):
    m = Rng(seed).standard_normal((rows, cols))
    res = svd(m)
    assert np.allclose(res.reconstruct(), m, atol=1e-10)


def test_sample_gaussian_degenerate_and_errors(rng):
    assert np.all(sample_gaussian(rng, 3, 2, mean=5.0, std=0.0) == 5.0)
    with pytest.raises(ValueError):
        sample_gaussian(rng, 2, 2, std=-1.0)


def test_sample_gaussian_deterministic():
    a = sample_gaussian(Rng(7), 4, 4)
    b = sample_gaussian(Rng(7), 4, 4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_gaussian(Rng(8), 4, 4))


def test_sample_gaussian_moments(rng):
    n = 10**5
    x = sample_gaussian(rng, n, 1).ravel()
    assert abs(x.mean()) < 4 / np.sqrt(n)
    assert abs(x.var() - 1.0) < 4 * np.sqrt(2 / n)


def test_substreams_are_reproducible_and_distinct():
    r = Rng(5)
    assert np.array_equal(r.substream(1, 2).standard_normal(5), Rng(5, (1, 2)).standard_normal(5))
    assert not np.array_equal(r.substream(1).standard_normal(5), r.substream(2).standard_normal(5))


def test_matrix_normal_cases(rng):
    z = sample_matrix_normal(rng, np.zeros((2, 3)), np.ones(2), np.ones(3))
    assert z.shape == (2, 3)
    n = 10**5
    a = sample_matrix_normal(rng, np.zeros((2, n)), [4.0, 1.0], np.ones(n))
    var = a.var(axis=1)
    assert abs(var[0] / 4.0 - 1) < 0.05 and abs(var[1] - 1) < 0.05
    m = rng.standard_normal((3, 3))
    tiny = sample_matrix_normal(rng, m, np.full(3, 1e-12), np.full(3, 1e-12))
    assert np.allclose(tiny, m, atol=1e-9)


def test_matrix_normal_column_covariance_converges_to_row_diag(rng):
    d = np.array([3.0, 1.0, 0.5])
    a = sample_matrix_normal(rng, np.zeros((3, 50000)), d, np.ones(50000))
    cov = a @ a.T / a.shape[1]
    assert np.max(np.abs(cov - np.diag(d))) < 0.05


def test_matrix_normal_rejects_nonpositive_covariance(rng):
    with pytest.raises(ValueError):
        sample_matrix_normal(rng, np.zeros((2, 2)), [1.0, 0.0], [1.0, 1.0])
    with pytest.raises(ShapeError):
        sample_matrix_normal(rng, np.zeros((2, 2)), [1.0], [1.0, 1.0])
