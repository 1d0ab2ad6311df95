import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from fmtrecon.solvers import SolverConfig, art_reconstruct, art_rowwise, reconstruct, stomp_reconstruct


def consistent_system(seed, m=20, n=10):
    rng = np.random.default_rng(seed)
    A = np.abs(rng.standard_normal((m, n)))
    x_true = rng.uniform(0, 1, n)
    return A, x_true, A @ x_true


def sparse_dictionary(seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((64, 256))
    A /= np.linalg.norm(A, axis=0)
    x_true = np.zeros(256)
    support = rng.choice(256, 3, replace=False)
    x_true[support] = rng.uniform(1, 3, 3)
    return A, x_true, support


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig.art(relax=2.0)
    with pytest.raises(ValueError):
        SolverConfig.art(iters=0)
    with pytest.raises(ValueError):
        SolverConfig.stomp(threshold=1.5)
    with pytest.raises(ValueError):
        SolverConfig("lsqr")


def test_art_zero_measurement_is_fixed_point():
    A, _, _ = consistent_system(0)
    res = art_reconstruct(A, np.zeros(20), SolverConfig.art(iters=50, relax=0.5))
    assert not res.x.any()


def test_art_identity_one_sweep():
    x_true = np.random.default_rng(1).uniform(0, 2, 12)
    res = art_reconstruct(np.eye(12), x_true, SolverConfig.art(iters=1, relax=1.0))
    np.testing.assert_allclose(res.x, x_true, rtol=0, atol=1e-15)


def test_art_consistent_system_residual():
    A, x_true, b = consistent_system(2)
    # the direct least-squares oracle confirms the system is consistent
    lsq, *_ = np.linalg.lstsq(A, b, rcond=None)
    assert np.linalg.norm(A @ lsq - b) <= 1e-12 * np.linalg.norm(b)
    res = art_reconstruct(A, b, SolverConfig.art(iters=10_000, relax=0.5))
    assert np.linalg.norm(A @ res.x - b) / np.linalg.norm(b) <= 1e-4


@pytest.mark.parametrize("nonneg", [True, False])
@pytest.mark.parametrize("damping", [0.0, 0.3])
def test_block_sweep_equals_rowwise(nonneg, damping):
    rng = np.random.default_rng(3)
    A = rng.standard_normal((15, 9))
    A[4] = 0.0
    b = rng.standard_normal(15)
    cfg = SolverConfig.art(iters=25, relax=0.7, nonneg=nonneg, damping=damping)
    np.testing.assert_allclose(art_reconstruct(A, b, cfg).x, art_rowwise(A, b, cfg), rtol=1e-9, atol=1e-12)


def test_art_multiple_right_hand_sides():
    A, _, _ = consistent_system(4)
    B = np.abs(np.random.default_rng(4).standard_normal((20, 3)))
    cfg = SolverConfig.art(iters=30, relax=0.3)
    joint = art_reconstruct(A, B, cfg).x
    for k in range(3):
        np.testing.assert_allclose(joint[:, k], art_reconstruct(A, B[:, k], cfg).x, rtol=1e-12, atol=1e-14)


def test_art_accepts_sparse_and_skips_empty_columns():
    A, _, b = consistent_system(5)
    A = np.hstack([A, np.zeros((20, 2))])
    res = art_reconstruct(sp.csr_matrix(A), b, SolverConfig.art(iters=20, relax=0.5))
    assert res.x.shape == (12,) and not res.x[-2:].any()


def test_art_errors():
    A, _, b = consistent_system(6)
    with pytest.raises(ValueError):
        art_reconstruct(A, b[:5], SolverConfig.art(iters=1))
    with pytest.raises(ValueError):
        art_reconstruct(np.zeros((3, 3)), np.ones(3), SolverConfig.art(iters=1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.95))
def test_art_sweeps_approach_solution(seed, relax):
    # each relaxed projection is Fejer monotone, so the distance to the solution never grows;
    # the residual norm itself may rise between sweeps
    A, x_true, b = consistent_system(seed, 8, 6)
    dist = [np.linalg.norm(x_true)]
    for k in range(1, 8):
        x = art_reconstruct(A, b, SolverConfig.art(iters=k, relax=relax, nonneg=False)).x
        dist.append(np.linalg.norm(x - x_true))
    assert np.all(np.diff(dist) <= 1e-12 * dist[0])


def test_art_deterministic_and_nonnegative():
    rng = np.random.default_rng(8)
    A = rng.standard_normal((30, 12))
    b = rng.standard_normal(30)
    cfg = SolverConfig.art(iters=40, relax=0.4)
    a1, a2 = art_reconstruct(A, b, cfg).x, art_reconstruct(A, b, cfg).x
    assert a1.tobytes() == a2.tobytes()
    assert a1.min() >= 0


def test_stomp_zero_measurement():
    A, _, _ = sparse_dictionary()
    res = stomp_reconstruct(A, np.zeros(64), SolverConfig.stomp())
    assert not res.x.any() and res.support.size == 0


def test_stomp_identity_dictionary():
    b = np.zeros(10)
    b[3] = 5.0
    res = stomp_reconstruct(np.eye(10), b, SolverConfig.stomp(iters=1, threshold=0.8))
    expected = np.zeros(10)
    expected[3] = 5.0
    np.testing.assert_array_equal(res.x, expected)


def test_stomp_recovers_sparse_signal():
    A, x_true, support = sparse_dictionary()
    res = stomp_reconstruct(A, A @ x_true, SolverConfig.stomp(iters=20, threshold=0.8))
    assert set(support) <= set(res.support)
    oracle = np.zeros(256)
    oracle[support] = np.linalg.lstsq(A[:, support], A @ x_true, rcond=None)[0]
    assert np.linalg.norm(oracle - x_true) <= 1e-12 * np.linalg.norm(x_true)
    assert np.linalg.norm(res.x - x_true) / np.linalg.norm(x_true) <= 1e-6
    off = np.setdiff1d(np.arange(256), res.support)
    assert not res.x[off].any()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 1.0), st.booleans())
def test_stomp_stage_monotonicity(seed, tau, nonneg):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((30, 60))
    b = rng.standard_normal(30)
    sizes, prev = [], np.array([], dtype=int)
    for k in range(1, 6):
        res = stomp_reconstruct(A, b, SolverConfig.stomp(iters=k, threshold=tau, nonneg=nonneg))
        assert set(prev) <= set(res.support)
        sizes.append(res.support.size)
        prev = res.support
        assert np.all(np.diff(res.residuals) <= 1e-9)
        if nonneg:
            assert res.x.min() >= 0
    assert sizes == sorted(sizes)


def test_stomp_rank_deficiency_warns():
    A = np.ones((4, 3))
    with pytest.warns(RuntimeWarning):
        res = stomp_reconstruct(A, np.ones(4), SolverConfig.stomp(iters=2, threshold=0.5, nonneg=False))
    assert res.notes
    np.testing.assert_allclose(A @ res.x, np.ones(4), atol=1e-12)


def test_reconstruct_dispatch():
    A, x_true, _ = sparse_dictionary(1)
    out = reconstruct(A, A @ x_true, SolverConfig.stomp())
    assert np.allclose(out.x, x_true, atol=1e-8)
