"""3x3 symmetric eigendecomposition against the LAPACK oracle."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from stainlab.eig3 import eig3_symmetric


def random_symmetric(rng, scale=1.0):
    a = rng.normal(size=(3, 3)) * scale
    return (a + a.T) / 2.0


def check_against_numpy(mat, atol=1e-10):
    w, v = eig3_symmetric(mat)
    ref = np.linalg.eigvalsh(mat)[::-1]
    assert np.allclose(w, ref, atol=atol)
    # reconstruction pins the eigenvectors without fixing their sign
    recon = v @ np.diag(w) @ v.T
    assert np.allclose(recon, mat, atol=atol)
    assert np.allclose(v.T @ v, np.eye(3), atol=atol)


def test_identity_and_diagonal():
    w, v = eig3_symmetric(np.eye(3))
    assert np.allclose(w, 1.0)
    assert np.allclose(v @ v.T, np.eye(3))

    mat = np.diag([5.0, -1.0, 2.0])
    w, v = eig3_symmetric(mat)
    assert np.allclose(w, [5.0, 2.0, -1.0])
    check_against_numpy(mat)


def test_eigenvalues_descending(rng):
    for _ in range(50):
        w, _ = eig3_symmetric(random_symmetric(rng))
        assert w[0] >= w[1] >= w[2]


def test_random_matrices_match_numpy(rng):
    for _ in range(200):
        check_against_numpy(random_symmetric(rng, scale=rng.uniform(0.1, 10.0)))


def test_repeated_eigenvalues():
    # rank-1 plus isotropic part: eigenvalues {4, 1, 1}
    u = np.array([1.0, 2.0, 2.0]) / 3.0
    mat = np.eye(3) + 3.0 * np.outer(u, u)
    check_against_numpy(mat, atol=1e-9)


def test_rank_one_scatter():
    u = np.array([0.2, 0.5, 0.8])
    mat = np.outer(u, u)
    w, v = eig3_symmetric(mat)
    assert np.allclose(w[0], u @ u)
    assert np.allclose(w[1:], 0.0, atol=1e-12)
    assert abs(abs(v[:, 0] @ (u / np.linalg.norm(u))) - 1.0) < 1e-10


def test_zero_matrix():
    w, v = eig3_symmetric(np.zeros((3, 3)))
    assert np.allclose(w, 0.0)
    assert np.allclose(v @ v.T, np.eye(3))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_decomposition_property(seed):
    mat = random_symmetric(np.random.default_rng(seed), scale=3.0)
    check_against_numpy(mat, atol=1e-9)
