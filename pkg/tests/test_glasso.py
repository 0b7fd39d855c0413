import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decolearn.exceptions import GlassoError
from decolearn.learning import glasso, kkt_residual


def random_spd(rng, M, cond=10.0):
    Q, _ = np.linalg.qr(rng.normal(size=(M, M)))
    eig = np.geomspace(1.0, cond, M)
    return (Q * eig) @ Q.T


def dual_projected_gradient(Sigma, r, iters=200_000, tol=1e-13):
    """Maximize ``log det(Sigma + U)`` over ``|U_ij| <= r``; return ``inv(Sigma + U)``."""
    U = np.zeros_like(Sigma)
    step = np.linalg.eigvalsh(Sigma).min() ** 2
    for _ in range(iters):
        G = np.linalg.inv(Sigma + U)
        new = np.clip(U + step * G, -r, r)
        new = 0.5 * (new + new.T)
        if np.abs(new - U).max() < tol:
            U = new
            break
        U = new
    return np.linalg.inv(Sigma + U)


@pytest.mark.parametrize("M", [1, 2, 3, 5, 8])
def test_zero_penalty_is_inverse(rng, M):
    Sigma = random_spd(rng, M)
    L = glasso(Sigma, 0.0)
    assert np.allclose(L, np.linalg.inv(Sigma), rtol=0, atol=1e-8 * np.abs(np.linalg.inv(Sigma)).max())


@pytest.mark.parametrize("sigma,r", [(1.0, 0.5), (2.0, 0.1), (0.3, 3.0)])
def test_scalar_closed_form(sigma, r):
    L = glasso(np.array([[sigma]]), r)
    assert L.shape == (1, 1)
    assert L[0, 0] == pytest.approx(1.0 / (sigma + r), rel=1e-10)


def test_scalar_example():
    assert glasso(np.array([[1.0]]), 0.5)[0, 0] == pytest.approx(2 / 3, rel=1e-12)


def test_large_penalty_gives_diagonal(rng):
    Sigma = random_spd(rng, 4, cond=5.0)
    off = np.abs(Sigma - np.diag(np.diag(Sigma))).max()
    L = glasso(Sigma, 10 * off)
    assert np.abs(L - np.diag(np.diag(L))).max() < 1e-8
    assert np.allclose(np.diag(L), 1.0 / (np.diag(Sigma) + 10 * off), rtol=1e-10)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("r", [0.01, 0.1, 0.4])
def test_matches_dual_oracle(seed, r):
    rng = np.random.default_rng(seed)
    Sigma = random_spd(rng, 3, cond=4.0)
    L = glasso(Sigma, r)
    ref = dual_projected_gradient(Sigma, r)
    assert np.abs(L - ref).max() <= 1e-5 * max(1.0, np.abs(ref).max())


@given(st.integers(1, 6), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_solution_is_spd_and_stationary(M, r, seed):
    rng = np.random.default_rng(seed)
    Sigma = random_spd(rng, M, cond=20.0)
    L = glasso(Sigma, r)
    assert np.allclose(L, L.T, atol=1e-12)
    np.linalg.cholesky(L)
    assert kkt_residual(L, Sigma, r) <= 1e-6


def test_penalty_shrinks_towards_zero(rng):
    Sigma = random_spd(rng, 4)
    norms = [np.abs(glasso(Sigma, r)).sum() for r in (0.0, 0.05, 0.2, 1.0)]
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_singular_sample_matrix_is_regularized(rng):
    x = rng.normal(size=(2, 4))
    Sigma = x.T @ x / 2
    L = glasso(Sigma, 0.1)
    np.linalg.cholesky(L)
    assert kkt_residual(L, Sigma, 0.1) <= 1e-6


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        glasso(np.eye(2), -1.0)
    with pytest.raises(ValueError):
        glasso(np.array([[1.0, 2.0], [0.0, 1.0]]), 0.1)


def test_nonconvergence_raises(rng):
    Sigma = random_spd(rng, 5, cond=1e3)
    with pytest.raises(GlassoError) as info:
        glasso(Sigma, 1e-3, max_sweeps=1, max_inner=1)
    assert info.value.residual > 0
