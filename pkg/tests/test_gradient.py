import numpy as np
import pytest

from crsae.conv_ops import ConvDictionary, dense_matrix, estimate_lipschitz
from crsae.encoder import EncoderTrace, FistaConfig, fista_encode
from crsae.gradient import (
    backprop_filter_gradient,
    backprop_untied,
    batch_gradient,
    finite_difference_gradient,
    kink_margin,
    loss_and_gradient,
    shrink_derivative,
    untied_loss_and_gradients,
)


def kink_free(C, K, W, T, lam=0.1, seed=0, step=1e-6):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((C, K))
    for _ in range(200):
        y = rng.standard_normal(W)
        cfg = FistaConfig(lam, estimate_lipschitz(h, W), T)
        _, trace = fista_encode(y, h, cfg, record=True)
        if kink_margin(trace) > 10 * step:
            return h, y, cfg
    raise RuntimeError("no kink-free draw")


def dense_unrolled_loss(y, h, lam, L, T):
    """Forward pass with explicit matrices; used as an independent oracle."""
    H = dense_matrix(h, len(y))
    x = np.zeros(H.shape[1])
    x_prev = x.copy()
    s = 0.0
    for _ in range(T):
        s_new = (1 + np.sqrt(1 + 4 * s * s)) / 2
        w = x + (s - 1) / s_new * (x - x_prev)
        v = w + H.T @ (y - H @ w) / L
        x_prev, x = x, np.sign(v) * np.maximum(np.abs(v) - lam / L, 0)
        s = s_new
    return 0.5 * np.sum((y - H @ x) ** 2)


def test_shrink_derivative_mask():
    c = np.array([-2.0, -1.0, 0.0, 1.0, 1.5])
    np.testing.assert_array_equal(shrink_derivative(c, 1.0), [1, 0, 0, 0, 1])
    with pytest.raises(ValueError):
        shrink_derivative(c, -1.0)


@pytest.mark.parametrize("shape", [(1, 3, 12, 1), (1, 3, 12, 3), (2, 8, 64, 5), (3, 8, 64, 10), (2, 5, 30, 40)])
def test_backprop_matches_central_differences(shape):
    h, y, cfg = kink_free(*shape, seed=sum(shape))
    loss, grad = loss_and_gradient(y, h, cfg)
    fd = finite_difference_gradient(y, h, cfg, 1e-6)
    rel = np.max(np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-8))
    assert rel <= 1e-5
    assert loss == pytest.approx(dense_unrolled_loss(y, h, cfg.lam, cfg.L, cfg.T), rel=1e-12)


def test_ista_mode_gradients_match_differences():
    h, y, cfg = kink_free(2, 4, 20, 6, seed=4)
    enc = h + 0.1
    loss, d_enc, d_dec, d_lam = untied_loss_and_gradients(y, enc, h, cfg, momentum=False)

    def f(e, d, lam):
        c = FistaConfig(lam, cfg.L, cfg.T)
        code, _ = fista_encode(y, e, c, momentum=False)
        return 0.5 * np.sum((y - ConvDictionary(d, 20).forward(code)) ** 2)

    eps = 1e-6
    for idx in [(0, 0), (1, 3), (0, 2)]:
        e = enc.copy()
        e[idx] += eps
        up = f(e, h, cfg.lam)
        e[idx] -= 2 * eps
        assert d_enc[idx] == pytest.approx((up - f(e, h, cfg.lam)) / (2 * eps), rel=1e-5, abs=1e-7)
        d = h.copy()
        d[idx] += eps
        up = f(enc, d, cfg.lam)
        d[idx] -= 2 * eps
        assert d_dec[idx] == pytest.approx((up - f(enc, d, cfg.lam)) / (2 * eps), rel=1e-5, abs=1e-7)
    fd_lam = (f(enc, h, cfg.lam + eps) - f(enc, h, cfg.lam - eps)) / (2 * eps)
    assert d_lam == pytest.approx(fd_lam, rel=1e-5, abs=1e-7)
    assert loss == pytest.approx(f(enc, h, cfg.lam))


def test_compiled_and_numpy_backprop_agree():
    h, y, cfg = kink_free(3, 7, 90, 30, seed=11)
    op = ConvDictionary(h, 90)
    code, trace = fista_encode(y, h, cfg, record=True, op=op)
    y_hat = op.forward(code)
    a = backprop_untied(y, op, op, trace, y_hat)
    slow = ConvDictionary(h, 90, method="fft")
    assert not slow.compiled
    b = backprop_untied(y, slow, slow, trace, y_hat)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-9, atol=1e-10)


def test_trace_mismatch_is_rejected():
    h, y, cfg = kink_free(1, 3, 12, 3)
    code, trace = fista_encode(y, h, cfg, record=True)
    other = FistaConfig(cfg.lam, cfg.L, cfg.T + 1)
    with pytest.raises(ValueError):
        backprop_filter_gradient(y, h, other, trace, y)
    bad = EncoderTrace(trace.s, trace.w, trace.c, trace.x[:, :, :-1], trace.lam, trace.L)
    with pytest.raises(ValueError):
        backprop_filter_gradient(y, h, cfg, bad, y)


def test_zero_code_gradient_is_zero():
    # everything thresholded away: loss is constant in h near this point
    rng = np.random.default_rng(3)
    h = rng.standard_normal((2, 4))
    y = rng.standard_normal(20)
    lam = 10 * np.max(np.abs(ConvDictionary(h, 20).adjoint(y)))
    _, grad = loss_and_gradient(y, h, FistaConfig(lam, estimate_lipschitz(h, 20), 5))
    assert not np.any(grad)


@pytest.mark.parametrize("jobs", [1, 2])
def test_batch_gradient_sums_windows(jobs):
    rng = np.random.default_rng(5)
    h = rng.standard_normal((2, 5))
    ys = rng.standard_normal((3, 40))
    cfg = FistaConfig(0.2, estimate_lipschitz(h, 40), 8)
    grad, mean_loss = batch_gradient(ys, h, cfg, jobs=jobs)
    parts = [loss_and_gradient(y, h, cfg) for y in ys]
    ref = parts[0][1] + parts[1][1] + parts[2][1]
    np.testing.assert_array_equal(grad, ref)
    assert mean_loss == sum(p[0] for p in parts) / 3


def test_batch_gradient_rejects_empty():
    with pytest.raises(ValueError):
        batch_gradient([], np.ones((1, 2)), FistaConfig(1, 1, 1))


def test_finite_difference_step_must_be_positive():
    with pytest.raises(ValueError):
        finite_difference_gradient(np.zeros(5), np.ones((1, 2)), FistaConfig(1, 1, 1), step=0)
