"""Hand-written reverse-mode gradient of the CRsAE loss with respect to the filters.

The backward pass replays a recorded :class:`~crsae.encoder.EncoderTrace` from
the last iteration to the first. Writing ``r_t = y - H w_t`` and ``g_t`` for
the masked adjoint of ``c_t``, each unrolled iteration contributes::

    dh += (1/L) * [ corr(r_t, g_t) - corr(H g_t, w_t) ]

where ``corr(s, x)[c, k] = sum_n s[n + k] x[c, n]``, and the decoder adds
``corr(y_hat - y, x_T)``. The adjoint of the state
``z_{t-1} = (x_{t-1}, x_{t-2})`` receives both the extrapolation path through
``w_t`` and the copy ``z_t^(2) = x_{t-1}``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .conv_ops import ConvDictionary
from .encoder import EncoderDivergence, EncoderTrace, FistaConfig, fista_encode, reconstruction_loss

try:
    from . import _kernels
except ImportError:
    _kernels = None

__all__ = [
    "backprop_filter_gradient",
    "backprop_untied",
    "batch_gradient",
    "finite_difference_gradient",
    "kink_margin",
    "loss_and_gradient",
    "shrink_derivative",
    "untied_loss_and_gradients",
]


def shrink_derivative(c, eps: float) -> np.ndarray:
    """0/1 mask of the soft-threshold derivative; 0 at the kink ``|c| = eps``."""
    if eps < 0:
        raise ValueError(f"shrinkage threshold must be non-negative, got {eps}")
    return (np.abs(np.asarray(c, dtype=np.float64)) > eps).astype(np.float64)


def _check_trace(y: np.ndarray, op: ConvDictionary, cfg: FistaConfig, trace: EncoderTrace):
    if trace.T != cfg.T or trace.lam != cfg.lam or trace.L != cfg.L:
        raise ValueError(
            f"trace recorded with (lam={trace.lam}, L={trace.L}, T={trace.T}) "
            f"but config is (lam={cfg.lam}, L={cfg.L}, T={cfg.T})"
        )
    expected = y.shape[:-1] + (op.C, op.Ne)
    if trace.x.shape[1:] != expected:
        raise ValueError(f"trace code shape {trace.x.shape[1:]} does not match {expected}")


def backprop_untied(
    y, enc_op: ConvDictionary, dec_op: ConvDictionary, trace: EncoderTrace, y_hat
) -> tuple[np.ndarray, np.ndarray, float]:
    """Gradients of ``0.5 ||y - y_hat||^2`` for an encoder/decoder pair.

    Returns ``(d_encoder_filters, d_decoder_filters, d_lam)``. For CRsAE the two
    operators share filters and the filter gradient is the sum of the first two.
    """
    y = np.asarray(y, dtype=np.float64)
    g_out = np.asarray(y_hat, dtype=np.float64) - y
    T = trace.T
    inv_L = 1.0 / trace.L
    thr = trace.threshold

    d_dec = dec_op.correlate(g_out, trace.x[T])
    gx = dec_op.adjoint(g_out)
    if enc_op.compiled and y.ndim == 1:
        d_enc = np.zeros((enc_op.C, enc_op.K))
        d_lam, status = _kernels.backprop_run(
            y, enc_op.filters, enc_op.gram_table, thr, inv_L, trace.s, trace.w, trace.c, gx, d_enc
        )
        if status:
            raise EncoderDivergence(status, "non-finite adjoint during back-propagation")
        return d_enc, d_dec, d_lam

    gx_copy = np.zeros_like(gx)
    d_enc = np.zeros((enc_op.C, enc_op.K))
    d_lam = 0.0

    for t in range(T, 0, -1):
        c = trace.c[t - 1]
        w = trace.w[t - 1]
        gc = np.where(np.abs(c) > thr, gx, 0.0)
        if np.any(gc):
            d_lam -= inv_L * float(np.vdot(gc, np.sign(c)))
            residual = y - enc_op.forward(w)
            d_enc += inv_L * (enc_op.correlate(residual, gc) - enc_op.correlate(enc_op.forward(gc), w))
            gw = gc - inv_L * enc_op.gram(gc)
        else:
            gw = gc
        a = trace.momentum(t)
        gx, gx_copy = (1.0 + a) * gw + gx_copy, -a * gw
        if not np.all(np.isfinite(gx)):
            raise EncoderDivergence(t, "non-finite adjoint during back-propagation")

    return d_enc, d_dec, d_lam


def backprop_filter_gradient(y, filters, cfg: FistaConfig, trace: EncoderTrace, y_hat, op=None) -> np.ndarray:
    """Exact ``dL/dh`` for the tied encoder/decoder, by replaying ``trace``."""
    y = np.asarray(y, dtype=np.float64)
    if op is None:
        op = ConvDictionary(filters, y.shape[-1])
    _check_trace(y, op, cfg, trace)
    d_enc, d_dec, _ = backprop_untied(y, op, op, trace, y_hat)
    grad = d_enc + d_dec
    if not np.all(np.isfinite(grad)):
        raise EncoderDivergence(0, "non-finite filter gradient")
    return grad


def loss_and_gradient(y, filters, cfg: FistaConfig) -> tuple[float, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    op = ConvDictionary(filters, y.shape[-1])
    code, trace = fista_encode(y, filters, cfg, record=True, op=op)
    y_hat = op.forward(code)
    return reconstruction_loss(y, y_hat), backprop_filter_gradient(y, filters, cfg, trace, y_hat, op=op)


def untied_loss_and_gradients(
    y, enc_filters, dec_filters, cfg: FistaConfig, momentum: bool = True
) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Loss and gradients for separate encoder/decoder filters and a trainable ``lam``."""
    y = np.asarray(y, dtype=np.float64)
    enc_op = ConvDictionary(enc_filters, y.shape[-1])
    dec_op = ConvDictionary(dec_filters, y.shape[-1])
    code, trace = fista_encode(y, enc_filters, cfg, record=True, momentum=momentum, op=enc_op)
    y_hat = dec_op.forward(code)
    d_enc, d_dec, d_lam = backprop_untied(y, enc_op, dec_op, trace, y_hat)
    return reconstruction_loss(y, y_hat), d_enc, d_dec, d_lam


def _forward_loss(y, filters, cfg: FistaConfig) -> float:
    code, _ = fista_encode(y, filters, cfg)
    return reconstruction_loss(y, ConvDictionary(filters, len(y)).forward(code))


def finite_difference_gradient(y, filters, cfg: FistaConfig, step: float = 1e-6) -> np.ndarray:
    """Central differences of the loss, one fresh forward pass per perturbation."""
    if step <= 0:
        raise ValueError("step must be positive")
    y = np.asarray(y, dtype=np.float64)
    h = np.array(filters, dtype=np.float64)
    grad = np.empty_like(h)
    for idx in np.ndindex(h.shape):
        orig = h[idx]
        h[idx] = orig + step
        up = _forward_loss(y, h, cfg)
        h[idx] = orig - step
        down = _forward_loss(y, h, cfg)
        h[idx] = orig
        grad[idx] = (up - down) / (2.0 * step)
    return grad


def kink_margin(trace: EncoderTrace) -> float:
    """Smallest distance of any ``|c_t|`` to the threshold over the whole trace."""
    return float(np.min(np.abs(np.abs(trace.c) - trace.threshold)))


def _window_job(args):
    y, filters, cfg = args
    return loss_and_gradient(y, filters, cfg)


def batch_gradient(windows, filters, cfg: FistaConfig, jobs: int = 1) -> tuple[np.ndarray, float]:
    """Summed filter gradient and mean loss over a batch of windows.

    Windows are independent; with ``jobs > 1`` they are spread over worker
    processes, but the reduction always runs in window order so results are
    bit-identical to the serial path.
    """
    windows = [np.asarray(y, dtype=np.float64) for y in windows]
    if not windows:
        raise ValueError("empty batch")
    h = np.asarray(filters, dtype=np.float64)
    if jobs > 1 and len(windows) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_window_job, [(y, h, cfg) for y in windows]))
    else:
        results = [loss_and_gradient(y, h, cfg) for y in windows]
    grad = np.zeros_like(h)
    total = 0.0
    for loss, g in results:
        grad += g
        total += loss
    mean_loss = total / len(windows)
    if not math.isfinite(mean_loss):
        raise EncoderDivergence(0, "non-finite batch loss")
    return grad, mean_loss
