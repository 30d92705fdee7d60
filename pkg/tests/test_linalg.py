import numpy as np
import pytest
from hypothesis import given, strategies as st

from kvcodec.errors import DegenerateRow, InvalidInput
from kvcodec.linalg import (
    exact_svd,
    fit_pca,
    mean_token_cosine,
    orthonormalize_columns,
    procrustes_align,
    project,
    randomized_svd,
    reconstruct,
)
from kvcodec.synth import random_orthogonal

from conftest import rng


def geometric_matrix(m, n, decay=0.9, seed=0):
    g = rng(seed)
    u, _ = np.linalg.qr(g.standard_normal((m, n)))
    v, _ = np.linalg.qr(g.standard_normal((n, n)))
    s = decay ** np.arange(n)
    return (u * s) @ v.T, s


def test_exact_svd_matches_eigen_oracle():
    a = rng(1).standard_normal((40, 12))
    svd = exact_svd(a)
    # independent route: eigenvalues of the Gram matrix
    eig = np.sort(np.linalg.eigvalsh(a.T @ a))[::-1]
    np.testing.assert_allclose(svd.sigma**2, eig, rtol=1e-10)
    np.testing.assert_allclose(svd.reconstruct(), a, atol=1e-12)
    assert np.all(np.diff(svd.sigma) <= 0)


def test_exact_svd_rejects_empty():
    with pytest.raises(InvalidInput):
        exact_svd(np.zeros((0, 3)))


def test_randomized_svd_recovers_planted_spectrum():
    a, s = geometric_matrix(200, 80)
    res = randomized_svd(a, 16, power_iterations=6)
    np.testing.assert_allclose(res.sigma, s[:16], rtol=1e-6)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(16), atol=1e-10)


def test_randomized_svd_is_seeded():
    a, _ = geometric_matrix(60, 30)
    r1 = randomized_svd(a, 5, seed=3)
    r2 = randomized_svd(a, 5, seed=3)
    assert np.array_equal(r1.sigma, r2.sigma)


def test_randomized_svd_validates_rank():
    with pytest.raises(InvalidInput):
        randomized_svd(np.ones((4, 3)), 4)


def test_fit_pca_full_rank_round_trip():
    x = rng(2).standard_normal((30, 8)) + 5.0
    model = fit_pca(x, 8)
    np.testing.assert_allclose(reconstruct(model, project(model, x)), x, atol=1e-10)
    np.testing.assert_allclose(model.mean, x.mean(axis=0))
    np.testing.assert_allclose(model.basis.T @ model.basis, np.eye(8), atol=1e-12)


def test_fit_pca_methods_agree_on_low_rank_data():
    g = rng(3)
    x = g.standard_normal((100, 6)) @ g.standard_normal((6, 20))
    exact = fit_pca(x, 6)
    approx = fit_pca(x, 6, method="randomized")
    np.testing.assert_allclose(approx.sigma, exact.sigma, rtol=1e-8)
    # same subspace: projector difference vanishes
    pe = exact.basis @ exact.basis.T
    pa = approx.basis @ approx.basis.T
    assert np.abs(pe - pa).max() < 1e-8


def test_model_arrays_are_read_only():
    model = fit_pca(rng(4).standard_normal((10, 4)), 2)
    with pytest.raises(ValueError):
        model.basis[0, 0] = 1.0


def test_truncated_reconstruction_restricted_to_features():
    x = rng(5).standard_normal((20, 12))
    model = fit_pca(x, 5)
    d = project(model, x)
    full = reconstruct(model, d)
    part = reconstruct(model, d, features=slice(4, 8))
    np.testing.assert_allclose(part, full[:, 4:8], atol=1e-13)


def test_fit_pca_rejects_bad_input():
    with pytest.raises(InvalidInput):
        fit_pca(np.ones((1, 3)), 1)
    with pytest.raises(InvalidInput):
        fit_pca(np.ones((5, 3)), 4)
    with pytest.raises(InvalidInput):
        fit_pca(np.ones((5, 3)), 2, method="power")
    with pytest.raises(InvalidInput):
        fit_pca(np.array([[1.0, np.nan], [0.0, 1.0]]), 1)


@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 10))
def test_orthonormal_invariance(seed, n, r):
    g = np.random.default_rng(seed)
    p = r + int(g.integers(0, 6))
    v = orthonormalize_columns(g.standard_normal((p, r)))
    d = g.standard_normal((n, r))
    dq = d + 0.1 * g.standard_normal((n, r))
    lhs = np.linalg.norm(d @ v.T - dq @ v.T)
    rhs = np.linalg.norm(d - dq)
    assert lhs == pytest.approx(rhs, rel=1e-9)


def test_procrustes_recovers_planted_rotation():
    g = rng(6)
    a = g.standard_normal((50, 8))
    r_true = random_orthogonal(8, g)
    b = a @ r_true.T
    r = procrustes_align(a, b)
    np.testing.assert_allclose(r @ r.T, np.eye(8), atol=1e-12)
    np.testing.assert_allclose(b @ r, a, atol=1e-10)


@given(st.integers(0, 2**32 - 1))
def test_procrustes_beats_random_rotations(seed):
    g = np.random.default_rng(seed)
    a = g.standard_normal((20, 5))
    b = g.standard_normal((20, 5))
    best = np.linalg.norm(a - b @ procrustes_align(a, b))
    for _ in range(5):
        q = random_orthogonal(5, g)
        assert best <= np.linalg.norm(a - b @ q) + 1e-12


def test_mean_token_cosine():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert mean_token_cosine(a, a) == pytest.approx(1.0)
    assert mean_token_cosine(a, -a) == pytest.approx(-1.0)
    assert mean_token_cosine(a, a[:, ::-1]) == pytest.approx(0.0)
    with pytest.raises(DegenerateRow):
        mean_token_cosine(a, np.array([[0.0, 0.0], [1.0, 1.0]]))


def test_orthonormalize_columns_keeps_orientation():
    v = random_orthogonal(6, rng(7))[:, :3]
    noisy = v + 1e-4 * rng(8).standard_normal(v.shape)
    q = orthonormalize_columns(noisy)
    np.testing.assert_allclose(q.T @ q, np.eye(3), atol=1e-12)
    assert np.all(np.einsum("ij,ij->j", q, v) > 0.99)


def test_small_svd_cases():
    np.testing.assert_allclose(exact_svd(np.eye(3)).sigma, [1, 1, 1])
    u = np.array([2.0, 0.0, 0.0])
    v = np.array([0.0, 3.0, 0.0, 0.0])
    s = exact_svd(np.outer(u, v)).sigma
    assert s[0] == pytest.approx(6.0)
    assert np.all(s[1:] < 1e-12)
    a = rng(9).standard_normal((8, 5))
    svd = exact_svd(a)
    assert np.linalg.norm(svd.reconstruct() - a) / np.linalg.norm(a) < 1e-10
    np.testing.assert_allclose(svd.u.T @ svd.u, np.eye(5), atol=1e-8)
    np.testing.assert_allclose(svd.v.T @ svd.v, np.eye(5), atol=1e-8)


def test_randomized_svd_exact_rank_and_full_rank():
    g = rng(10)
    a = g.standard_normal((60, 7)) @ g.standard_normal((7, 40))
    ref = exact_svd(a).sigma
    np.testing.assert_allclose(randomized_svd(a, 7, 8).sigma, ref[:7], rtol=1e-6)
    b = g.standard_normal((12, 9))
    full = randomized_svd(b, 9, 8)
    np.testing.assert_allclose(full.sigma, exact_svd(b).sigma, rtol=1e-6)
    np.testing.assert_allclose(full.reconstruct(), b, atol=1e-6)


def test_pca_degenerate_and_low_rank_data():
    const = np.tile([1.0, -2.0, 3.0], (6, 1))
    model = fit_pca(const, 3)
    assert np.all(model.sigma == 0)
    empty = model.truncate(0)
    np.testing.assert_array_equal(reconstruct(empty, np.zeros((6, 0))), const)
    g = rng(11)
    x = g.standard_normal((50, 2)) @ g.standard_normal((2, 9))
    assert int((fit_pca(x, 4).sigma > 1e-8).sum()) == 2


def test_projection_identities():
    g = rng(12)
    x = g.standard_normal((30, 10))
    full = fit_pca(x, 10)
    np.testing.assert_allclose(project(full, np.tile(full.mean, (3, 1))), 0.0, atol=1e-12)
    back = reconstruct(full, project(full, x))
    assert np.linalg.norm(back - x) / np.linalg.norm(x) < 1e-9
    # truncation error is the energy of the discarded coordinates
    part = full.truncate(4)
    err = np.linalg.norm(x - reconstruct(part, project(part, x))) ** 2
    assert err == pytest.approx((project(full, x)[:, 4:] ** 2).sum(), rel=1e-9)


def test_procrustes_small_cases():
    g = rng(13)
    a = g.standard_normal((30, 6))
    np.testing.assert_allclose(procrustes_align(a, a), np.eye(6), atol=1e-8)
    r_true = random_orthogonal(6, g)
    np.testing.assert_allclose(procrustes_align(a, a @ r_true.T), r_true, atol=1e-6)
