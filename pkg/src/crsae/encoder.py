"""CRsAE forward pass: unrolled FISTA encoder and tied linear decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conv_ops import ConvDictionary, apply_dictionary

try:
    from . import _kernels
except ImportError:
    _kernels = None

__all__ = [
    "EncoderDivergence",
    "EncoderTrace",
    "FistaConfig",
    "decode",
    "fista_encode",
    "lasso_objective",
    "momentum_next",
    "reconstruction_loss",
    "shrink",
]

# |c_t| growing this much past its first-iteration size means L < sigma_max.
DIVERGENCE_RATIO = 1e6
_TINY = np.finfo(np.float64).tiny


class EncoderDivergence(FloatingPointError):
    """FISTA iterates blew up; usually a sign that ``L`` is too small."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class FistaConfig:
    """Sparsity weight ``lam``, step constant ``L`` and iteration count ``T``."""

    lam: float
    L: float
    T: int

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"lam must be positive and finite, got {self.lam}")
        if not (self.L > 0 and math.isfinite(self.L)):
            raise ValueError(f"L must be positive and finite, got {self.L}")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")

    @property
    def threshold(self) -> float:
        # lam * (1/L) rounds like the (1/L) * (H^T y) it is compared against
        return self.lam * (1.0 / self.L)


@dataclass
class EncoderTrace:
    """Per-iteration FISTA state kept for back-propagation.

    ``s[t]`` for t = 0..T, ``w[t-1]`` and ``c[t-1]`` for t = 1..T, and ``x[t]``
    (= z_t^(1)) for t = 0..T with ``x[0] = 0``. The second half of the state,
    z_t^(2), is ``x[t-1]`` and is not stored separately.
    """

    s: np.ndarray
    w: np.ndarray
    c: np.ndarray
    x: np.ndarray
    lam: float
    L: float

    @property
    def T(self) -> int:
        return self.w.shape[0]

    @property
    def threshold(self) -> float:
        # lam * (1/L) rounds like the (1/L) * (H^T y) it is compared against
        return self.lam * (1.0 / self.L)

    def momentum(self, t: int) -> float:
        """Extrapolation weight ``(s_{t-1} - 1) / s_t`` used to form ``w_t``."""
        return (self.s[t - 1] - 1.0) / self.s[t]

    def z(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """State ``(z_t^(1), z_t^(2)) = (x_t, x_{t-1})``; ``z_0`` is all zeros."""
        prev = self.x[t - 1] if t >= 1 else np.zeros_like(self.x[0])
        return self.x[t], prev


def shrink(v, eps: float) -> np.ndarray:
    """Soft threshold ``sgn(v) * max(|v| - eps, 0)``; ties at ``|v| = eps`` go to 0."""
    if eps < 0:
        raise ValueError(f"shrinkage threshold must be non-negative, got {eps}")
    v = np.asarray(v, dtype=np.float64)
    mag = np.abs(v) - eps
    out = np.where(mag > 0, np.copysign(mag, v), 0.0)
    # flush subnormal survivors so that zeros are genuine zeros
    out[np.abs(out) < _TINY] = 0.0
    return out


def momentum_next(s_prev: float) -> float:
    return (1.0 + math.sqrt(1.0 + 4.0 * s_prev * s_prev)) / 2.0


def fista_encode(
    y,
    filters,
    cfg: FistaConfig,
    record: bool = False,
    momentum: bool = True,
    op: ConvDictionary | None = None,
    compiled: bool | None = None,
):
    """Run ``cfg.T`` unrolled FISTA iterations on one window (or a stack of windows).

    Returns ``(code, trace)``; ``trace`` is ``None`` unless ``record`` is set.
    With ``momentum=False`` the extrapolation step is dropped (plain ISTA).
    Raises :class:`EncoderDivergence` on non-finite or exploding iterates.

    ``compiled`` selects the fused compiled loop (default: whenever the
    operator allows it) or the plain numpy iteration; both compute the same
    iterates up to rounding.
    """
    y = np.asarray(y, dtype=np.float64)
    if op is None:
        op = ConvDictionary(filters, y.shape[-1])
    elif y.shape[-1] != op.W:
        raise ValueError(f"window length {y.shape[-1]} does not match operator W={op.W}")
    if compiled is None:
        compiled = op.compiled
    elif compiled and not op.compiled:
        raise RuntimeError("compiled encoder needs numba and an 'auto' or 'sparse' operator")
    if compiled and y.ndim == 1:
        return _fista_compiled(y, op, cfg, record, momentum)
    if compiled and not record:
        flat = y.reshape(-1, op.W)
        codes = np.stack([_fista_compiled(yi, op, cfg, False, momentum)[0] for yi in flat])
        return codes.reshape(y.shape[:-1] + (op.C, op.Ne)), None
    T = cfg.T
    thr = cfg.threshold
    inv_L = 1.0 / cfg.L
    code_shape = y.shape[:-1] + (op.C, op.Ne)

    hty = op.adjoint(y)
    x_prev = np.zeros(code_shape)
    x = np.zeros(code_shape)
    s_prev = 0.0 if momentum else 1.0

    if record:
        s_hist = np.empty(T + 1)
        s_hist[0] = s_prev
        w_hist = np.empty((T,) + code_shape)
        c_hist = np.empty((T,) + code_shape)
        x_hist = np.empty((T + 1,) + code_shape)
        x_hist[0] = 0.0

    first_size = None
    for t in range(1, T + 1):
        s = momentum_next(s_prev) if momentum else 1.0
        a = (s_prev - 1.0) / s
        w = x + a * (x - x_prev)
        c = w + inv_L * (hty - op.gram(w))
        size = float(np.max(np.abs(c))) if c.size else 0.0
        if not math.isfinite(size):
            raise EncoderDivergence(t, "non-finite pre-shrinkage value (check lam/L)")
        if first_size is None:
            first_size = size
        elif first_size > 0 and size > DIVERGENCE_RATIO * first_size:
            raise EncoderDivergence(t, f"iterates grew by {size / first_size:.3g}x (L too small?)")
        x_prev, x = x, shrink(c, thr)
        s_prev = s
        if record:
            s_hist[t] = s
            w_hist[t - 1] = w
            c_hist[t - 1] = c
            x_hist[t] = x

    trace = None
    if record:
        trace = EncoderTrace(s=s_hist, w=w_hist, c=c_hist, x=x_hist, lam=cfg.lam, L=cfg.L)
    return x, trace


def _fista_compiled(y, op: ConvDictionary, cfg: FistaConfig, record: bool, momentum: bool):
    T = cfg.T
    shape = (op.C, op.Ne)
    if record:
        s_hist = np.empty(T + 1)
        w_hist = np.empty((T,) + shape)
        c_hist = np.empty((T,) + shape)
        x_hist = np.empty((T + 1,) + shape)
    else:
        s_hist = np.empty(1)
        w_hist = c_hist = x_hist = np.empty((1,) + shape)
    x = np.empty(shape)
    status = _kernels.fista_run(
        op.adjoint(y), op.gram_table, cfg.threshold, 1.0 / cfg.L, T, momentum,
        DIVERGENCE_RATIO, record, s_hist, w_hist, c_hist, x_hist, x,
    )
    if status > 0:
        raise EncoderDivergence(status, "non-finite pre-shrinkage value (check lam/L)")
    if status < 0:
        raise EncoderDivergence(-status, "iterates grew past the divergence limit (L too small?)")
    trace = EncoderTrace(s=s_hist, w=w_hist, c=c_hist, x=x_hist, lam=cfg.lam, L=cfg.L) if record else None
    return x, trace


def decode(filters, code) -> np.ndarray:
    """Decoder ``y_hat = H x``: the same operator as the encoder's dictionary."""
    return apply_dictionary(filters, code)


def reconstruction_loss(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    r = y - y_hat
    return 0.5 * float(np.vdot(r, r))


def lasso_objective(y, filters, code, lam: float) -> float:
    """``0.5 * ||y - H x||^2 + lam * ||x||_1``."""
    return reconstruction_loss(y, apply_dictionary(filters, code)) + lam * float(
        np.abs(np.asarray(code)).sum()
    )
