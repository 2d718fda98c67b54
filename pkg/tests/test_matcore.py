from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bandchol.matcore import (
    CholeskyModel,
    NotPositiveDefiniteError,
    band,
    check_eta,
    crop,
    expand,
    frob_norm,
    is_symmetric,
    l1_matrix_norm,
    modified_cholesky,
    op_norm,
    population_regression,
    project_spectrum,
    recompose,
    taper_decomposition,
    taper_target,
    taper_weights,
)
from conftest import random_spd

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def sym_matrices(max_p=8):
    return st.integers(1, max_p).flatmap(
        lambda p: arrays(float, (p, p), elements=finite).map(lambda M: M + M.T)
    )


# ---- crop / expand / band -------------------------------------------------

def test_crop_index_formula():
    E = np.array([[10 * i + j for j in range(1, 5)] for i in range(1, 5)], dtype=float)
    assert np.array_equal(crop(E, 1, 2), [[22, 23], [32, 33]])


def test_crop_identity_and_whole():
    assert np.array_equal(crop(np.eye(5), 1, 3), np.eye(3))
    E = np.arange(16.0).reshape(4, 4)
    assert np.array_equal(crop(E, 0, 4), E)


def test_crop_strict_rejects_out_of_range():
    with pytest.raises(ValueError):
        crop(np.eye(4), 3, 2)
    with pytest.raises(ValueError):
        crop(np.eye(4), -1, 2)


def test_crop_clipped_returns_index_map():
    E = np.arange(25.0).reshape(5, 5)
    block, idx = crop(E, -2, 4, clip=True)
    assert np.array_equal(idx, [0, 1])
    assert np.array_equal(block, E[:2, :2])
    block, idx = crop(E, 4, 3, clip=True)
    assert np.array_equal(idx, [4])
    block, idx = crop(E, 7, 2, clip=True)
    assert block.shape == (0, 0) and idx.size == 0


def test_expand_single_entry():
    out = expand([[1.0]], 3, 1)
    want = np.zeros((3, 3))
    want[1, 1] = 1.0
    assert np.array_equal(out, want)


def test_expand_zero_and_clipping():
    assert np.array_equal(expand(np.zeros((2, 2)), 4, 1), np.zeros((4, 4)))
    C = np.arange(9.0).reshape(3, 3)
    out = expand(C, 4, -1, clip=True)
    assert np.array_equal(out[:2, :2], C[1:, 1:])
    assert out[2:].sum() == 0
    with pytest.raises(ValueError):
        expand(C, 4, 2)


@given(st.integers(1, 12), st.data())
def test_crop_expand_identity(p, data):
    k = data.draw(st.integers(1, p))
    m = data.draw(st.integers(0, p - k))
    C = data.draw(arrays(float, (k, k), elements=finite))
    assert np.array_equal(crop(expand(C, p, m), m, k), C)


def test_band_examples():
    ones = np.ones((3, 3))
    assert np.array_equal(band(ones, 1), [[1, 1, 0], [1, 1, 1], [0, 1, 1]])
    S = np.arange(16.0).reshape(4, 4)
    assert np.array_equal(band(S, 3), S)
    assert np.array_equal(band(S, 0), np.diag(np.diag(S)))
    with pytest.raises(ValueError):
        band(S, -1)


# ---- projection and norms -------------------------------------------------

def test_project_spectrum_examples():
    assert np.array_equal(project_spectrum(np.eye(3), 2.0), np.eye(3))
    out = project_spectrum(np.diag([5.0, 1.0, 0.1]), 2.0)
    assert np.allclose(out, np.diag([2.0, 1.0, 0.5]), atol=1e-14)
    assert is_symmetric(out)


def test_project_spectrum_general_clips_singular_values(rng):
    S = rng.standard_normal((6, 6)) * 3
    out = project_spectrum(S, 1.5)
    s = np.linalg.svd(out, compute_uv=False)
    assert s.max() <= 1.5 + 1e-12 and s.min() >= 1 / 1.5 - 1e-12


def test_project_spectrum_edge_tolerance():
    # a value within 1e-12 of the edge is left alone
    S = np.diag([2.0 + 5e-13, 1.0])
    assert np.array_equal(project_spectrum(S, 2.0), S)


def test_project_spectrum_errors():
    with pytest.raises(np.linalg.LinAlgError):
        project_spectrum(np.array([[np.nan, 0], [0, 1.0]]), 2.0)
    with pytest.raises(ValueError):
        project_spectrum(np.eye(2), 1.0)
    with pytest.raises(ValueError):
        check_eta(float("inf"))


@settings(max_examples=60, deadline=None)
@given(sym_matrices(), st.floats(1.05, 20))
def test_projection_spectrum_in_band_and_idempotent(S, eta):
    P = project_spectrum(S, eta)
    assert is_symmetric(P)
    w = np.linalg.eigvalsh(P)
    assert w.min() >= 1 / eta - 1e-9 and w.max() <= eta + 1e-9
    assert np.max(np.abs(project_spectrum(P, eta) - P)) <= 1e-12 * max(1.0, eta)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.floats(1.1, 8), st.integers(0, 2**32 - 1))
def test_projection_contraction(p, eta, seed):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, p, eta)
    S = rng.standard_normal((p, p)) * 4
    S = S + S.T
    P = project_spectrum(S, eta)
    slack = 1e-10 * (1 + op_norm(A - S))
    assert op_norm(A - P) <= 2 * op_norm(A - S) + slack
    assert frob_norm(A - P) <= 2 * frob_norm(A - S) + slack


def test_norm_examples():
    assert op_norm(np.eye(3)) == pytest.approx(1.0)
    assert frob_norm(np.eye(3)) == pytest.approx(np.sqrt(3))
    assert op_norm(np.diag([-4.0, 2.0])) == pytest.approx(4.0)
    assert op_norm(np.array([[0.0, 3.0], [0.0, 0.0]])) == pytest.approx(3.0)
    assert l1_matrix_norm(np.array([[1.0, -2.0], [3.0, 0.5]])) == pytest.approx(4.0)


# ---- Cholesky factors -----------------------------------------------------

def test_recompose_two_by_two():
    a = 0.7
    model = CholeskyModel(A=np.array([[0.0, 0.0], [a, 0.0]]), d=np.ones(2))
    assert np.allclose(recompose(model), [[1 + a * a, -a], [-a, 1]], atol=1e-15)


def test_recompose_identity_and_inverse(rng):
    assert np.array_equal(recompose(CholeskyModel(np.zeros((3, 3)), np.ones(3))), np.eye(3))
    A = np.tril(rng.standard_normal((6, 6)) * 0.3, -1)
    d = rng.uniform(0.5, 2, 6)
    model = CholeskyModel(A, d)
    L = np.eye(6) - A
    want = np.linalg.inv(L) @ np.diag(d) @ np.linalg.inv(L).T
    assert np.allclose(np.linalg.inv(recompose(model)), want, atol=1e-8)
    assert np.allclose(model.covariance(), want, atol=1e-10)


def test_cholesky_model_validation():
    with pytest.raises(ValueError):
        CholeskyModel(np.array([[0.0, 1.0], [0.0, 0.0]]), np.ones(2))
    with pytest.raises(ValueError):
        CholeskyModel(np.zeros((2, 2)), np.array([1.0, 0.0]))
    model = CholeskyModel(np.zeros((2, 2)), np.ones(2))
    with pytest.raises(ValueError):
        model.A[0, 0] = 1.0


def test_modified_cholesky_identity_and_errors():
    m = modified_cholesky(np.eye(4))
    assert np.array_equal(m.A, np.zeros((4, 4))) and np.array_equal(m.d, np.ones(4))
    with pytest.raises(NotPositiveDefiniteError):
        modified_cholesky(np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        modified_cholesky(np.array([[1.0, 0.1], [0.2, 1.0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_modified_cholesky_round_trip_and_rows(p, seed):
    rng = np.random.default_rng(seed)
    omega = random_spd(rng, p)
    model = modified_cholesky(omega)
    assert np.all(np.triu(model.A) == 0)
    assert np.max(np.abs(recompose(model) - omega)) <= 1e-8
    sigma = np.linalg.inv(omega)
    for i in range(p):
        coef, resid = population_regression(sigma, i, i)
        assert np.allclose(coef, model.A[i, :i], atol=1e-8)
        assert resid == pytest.approx(model.d[i], abs=1e-8)


def test_population_regression_ar1():
    idx = np.arange(5)
    sigma = 0.5 ** np.abs(idx[:, None] - idx[None, :])
    coef, resid = population_regression(sigma, 2, 1)
    assert np.allclose(coef, [0.0, 0.5])
    assert resid == pytest.approx(0.75)
    coef, resid = population_regression(np.eye(4), 3, 3)
    assert np.array_equal(coef, np.zeros(3)) and resid == 1.0
    with pytest.raises(ValueError):
        population_regression(sigma, 2, 3)


# ---- taper ----------------------------------------------------------------

def test_taper_weights_k2():
    w = taper_weights(6, 2)
    assert [w[0, d] for d in range(6)] == [1.0, 1.0, 1.0, 0.5, 0.0, 0.0]


def test_taper_diagonal_and_k1(rng):
    D = np.diag(rng.uniform(1, 2, 7))
    assert np.array_equal(taper_target(D, 3), D)
    assert np.allclose(taper_decomposition(D, 3), D, atol=1e-14)
    S = rng.standard_normal((7, 7))
    S = S + S.T
    assert np.allclose(taper_decomposition(S, 1), band(S, 1), atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(sym_matrices(max_p=16), st.sampled_from([1, 2, 3, 5]))
def test_taper_identity(S, k):
    assert np.max(np.abs(taper_target(S, k) - taper_decomposition(S, k))) <= 1e-12 * max(1.0, np.abs(S).max())
