import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crsae.conv_ops import (
    ConvDictionary,
    ConvergenceWarning,
    apply_adjoint,
    apply_dictionary,
    apply_gram,
    correlate_code,
    dense_matrix,
    estimate_lipschitz,
    power_iteration,
    spectral_bound,
)

METHODS = ["direct", "fft", "sparse"]


def _instance(rng, C, K, W):
    h = rng.standard_normal((C, K))
    x = rng.standard_normal((C, W - K + 1))
    y = rng.standard_normal(W)
    return h, x, y


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("C,K,W", [(1, 1, 5), (1, 3, 12), (2, 8, 64), (3, 5, 17), (3, 45, 300)])
def test_forward_and_adjoint_match_dense_matrix(method, C, K, W):
    rng = np.random.default_rng(C * 1000 + K * 10 + W)
    h, x, y = _instance(rng, C, K, W)
    H = dense_matrix(h, W)
    op = ConvDictionary(h, W, method=method)
    np.testing.assert_allclose(op.forward(x), H @ x.ravel(), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(op.adjoint(y).ravel(), H.T @ y, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(op.gram(x).ravel(), H.T @ H @ x.ravel(), rtol=1e-11, atol=1e-11)


def test_sparse_backend_on_sparse_code():
    rng = np.random.default_rng(1)
    h = rng.standard_normal((3, 45))
    x = np.zeros((3, 2956))
    x[rng.integers(0, 3, 12), rng.integers(0, 2956, 12)] = rng.normal(300, 30, 12)
    ref = ConvDictionary(h, 3000, method="fft")
    for method in ("sparse", "auto"):
        op = ConvDictionary(h, 3000, method=method)
        np.testing.assert_allclose(op.forward(x), ref.forward(x), rtol=1e-10, atol=1e-9)
        np.testing.assert_allclose(op.gram(x), ref.gram(x), rtol=1e-10, atol=1e-9)


@given(
    C=st.integers(1, 3),
    K=st.integers(1, 9),
    extra=st.integers(0, 40),
    seed=st.integers(0, 2**32 - 1),
)
@settings(max_examples=60, deadline=None)
def test_adjoint_identity(C, K, extra, seed):
    rng = np.random.default_rng(seed)
    W = K + extra
    h, x, y = _instance(rng, C, K, W)
    for method in METHODS:
        op = ConvDictionary(h, W, method=method)
        lhs = float(np.dot(op.forward(x), y))
        rhs = float(np.vdot(x, op.adjoint(y)))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_batched_inputs_match_loop():
    rng = np.random.default_rng(2)
    h = rng.standard_normal((2, 6))
    xs = rng.standard_normal((4, 3, 2, 25))
    ys = rng.standard_normal((4, 3, 30))
    for method in METHODS:
        op = ConvDictionary(h, 30, method=method)
        out = op.forward(xs)
        adj = op.adjoint(ys)
        for i in range(4):
            for j in range(3):
                np.testing.assert_allclose(out[i, j], op.forward(xs[i, j]), atol=1e-12)
                np.testing.assert_allclose(adj[i, j], op.adjoint(ys[i, j]), atol=1e-12)


def test_impulse_response_places_filter():
    h = np.array([[1.0, 2.0, 3.0]])
    x = np.zeros((1, 8))
    x[0, 4] = 1.0
    y = apply_dictionary(h, x)
    expected = np.zeros(10)
    expected[4:7] = [1, 2, 3]
    np.testing.assert_array_equal(y, expected)


def test_k_equals_one_is_scaling():
    h = np.array([[2.5]])
    x = np.arange(6.0).reshape(1, 6)
    np.testing.assert_allclose(apply_dictionary(h, x), 2.5 * x[0])
    np.testing.assert_allclose(apply_adjoint(h, x[0]), 2.5 * x)


def test_zero_code_gives_zero_signal():
    h = np.ones((2, 4))
    assert not np.any(apply_dictionary(h, np.zeros((2, 7))))
    assert not np.any(apply_gram(h, np.zeros((2, 7))))


def test_correlate_matches_gradient_of_inner_product():
    rng = np.random.default_rng(3)
    h, x, y = _instance(rng, 2, 5, 20)
    op = ConvDictionary(h, 20)
    grad = op.correlate(y, x)
    for method in ("direct", "fft"):
        np.testing.assert_allclose(correlate_code(y, x, 5, method=method), grad, atol=1e-12)
    # d<y, H x>/dh[c, k] by brute force
    eps = 1e-6
    for c in range(2):
        for k in range(5):
            hp = h.copy()
            hp[c, k] += eps
            fd = (np.dot(y, apply_dictionary(hp, x)) - np.dot(y, apply_dictionary(h, x))) / eps
            assert fd == pytest.approx(grad[c, k], rel=1e-5, abs=1e-6)


@pytest.mark.parametrize(
    "filters,W",
    [
        (np.zeros((2, 0)), 10),
        (np.ones(5), 10),
        (np.array([[1.0, np.nan]]), 10),
        (np.ones((1, 8)), 5),
    ],
)
def test_rejects_bad_operator(filters, W):
    with pytest.raises(ValueError):
        ConvDictionary(filters, W)


def test_rejects_mismatched_code():
    op = ConvDictionary(np.ones((2, 3)), 10)
    with pytest.raises(ValueError):
        op.forward(np.zeros((2, 7)))
    with pytest.raises(ValueError):
        op.adjoint(np.zeros(9))


def test_unknown_method():
    with pytest.raises(ValueError):
        ConvDictionary(np.ones((1, 2)), 4, method="winograd")


def test_fft_length_never_wraps():
    op = ConvDictionary(np.ones((1, 4)), 31)
    assert op.nfft >= op.W


@pytest.mark.parametrize("seed", range(10))
def test_lipschitz_bounds_dense_eigenvalue(seed):
    rng = np.random.default_rng(seed)
    C, K = rng.integers(1, 4), rng.integers(2, 9)
    W = int(K + rng.integers(4, 40))
    h = rng.standard_normal((C, K))
    H = dense_matrix(h, W)
    sigma = np.linalg.eigvalsh(H.T @ H)[-1]
    L = estimate_lipschitz(h, W)
    assert L >= sigma
    assert L <= 1.005 * sigma * (1 + 1e-9)


def test_power_iteration_rayleigh_never_exceeds_truth():
    rng = np.random.default_rng(5)
    h = rng.standard_normal((2, 6))
    op = ConvDictionary(h, 40)
    H = dense_matrix(h, 40)
    sigma = np.linalg.eigvalsh(H.T @ H)[-1]
    for iters in (1, 3, 10):
        est, _, _ = power_iteration(op, max_iters=iters, tol=1e-15)
        assert est <= sigma * (1 + 1e-12)


def test_power_iteration_warns_when_not_converged():
    rng = np.random.default_rng(6)
    h = rng.standard_normal((3, 8))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        estimate_lipschitz(h, 1200, max_iters=2, tol=1e-14)
    assert any(issubclass(w.category, ConvergenceWarning) for w in caught)


def test_unconverged_small_operator_uses_dense_eigenvalue():
    rng = np.random.default_rng(6)
    h = rng.standard_normal((3, 8))
    H = dense_matrix(h, 64)
    sigma = np.linalg.eigvalsh(H.T @ H)[-1]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        L = estimate_lipschitz(h, 64, max_iters=2, tol=1e-14)
    assert sigma <= L <= 1.005 * sigma * (1 + 1e-9)


def test_power_iteration_zero_operator():
    est, converged, _ = power_iteration(ConvDictionary(np.zeros((1, 3)), 10))
    assert est == 0.0 and converged


def test_power_iteration_argument_checks():
    op = ConvDictionary(np.ones((1, 3)), 10)
    with pytest.raises(ValueError):
        power_iteration(op, max_iters=0)
    with pytest.raises(ValueError):
        power_iteration(op, tol=0)


@pytest.mark.parametrize("seed", range(5))
def test_spectral_bound_dominates_and_is_tight_for_long_windows(seed):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(2, 12))))
    bound = spectral_bound(h)
    for W in (h.shape[1], h.shape[1] + 7, 60):
        H = dense_matrix(h, W)
        assert np.linalg.eigvalsh(H.T @ H)[-1] <= bound * (1 + 1e-12)
    H = dense_matrix(h, 600)
    assert bound <= 1.02 * np.linalg.eigvalsh(H.T @ H)[-1]
