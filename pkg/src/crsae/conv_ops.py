"""Convolutional dictionary operators.

A filter bank ``h`` of shape ``(C, K)`` defines the block-Toeplitz operator
``H : R^{C x Ne} -> R^W`` with ``Ne = W - K + 1``::

    (H x)[n]      = sum_c sum_k h[c, k] x[c, n - k]      n = 0..W-1
    (H^T y)[c, n] = sum_k h[c, k] y[n + k]               n = 0..Ne-1

Codes live on the valid grid, so ``H x`` is the full linear convolution and
never needs padding decisions. The matrix itself is never formed.

Two interchangeable back-ends are provided: ``"direct"`` (shifted
multiply-adds, O(C K W)) and ``"fft"`` (real FFTs of length >= W, so the
circular products never wrap). Both accept arbitrary leading batch axes.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
import scipy.linalg
from scipy import fft as sp_fft

try:
    from . import _kernels
except ImportError:  # numba missing: dense back-ends only
    _kernels = None

__all__ = [
    "ConvDictionary",
    "ConvergenceWarning",
    "apply_adjoint",
    "apply_dictionary",
    "apply_gram",
    "correlate_code",
    "dense_matrix",
    "estimate_lipschitz",
    "power_iteration",
    "spectral_bound",
]

# headroom over the Rayleigh quotient; leaves L inside 1% of sigma_max even when the estimate is exact
LIPSCHITZ_SAFETY = 0.005
# largest C * Ne for which an unconverged power iteration falls back to a dense eigensolve
DENSE_EIG_LIMIT = 3000


class ConvergenceWarning(UserWarning):
    """Raised (as a warning) when an iterative estimate stops early."""


def _check_filters(filters) -> np.ndarray:
    h = np.asarray(filters, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 1:
        raise ValueError(f"filters must have shape (C, K) with C, K >= 1, got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("filters contain non-finite entries")
    return h


class ConvDictionary:
    """The operator ``H`` of a filter bank acting on windows of length ``W``.

    Spectra (and, for sparse codes, the filter cross-correlations) are cached,
    so build one instance per (filters, W) pair and reuse it inside iterative
    solvers.

    ``method`` selects the back-end: ``"direct"``, ``"fft"``, ``"sparse"``
    (compiled loops that skip zero code entries) or ``"auto"``, which picks
    per call: the sparse kernels for single codes with few non-zeros, otherwise
    FFT for large windows and direct for small ones.
    """

    def __init__(self, filters, window_len: int, method: str = "auto"):
        h = _check_filters(filters)
        C, K = h.shape
        W = int(window_len)
        if W < K:
            raise ValueError(f"window length W={W} is shorter than filter length K={K}")
        if method not in ("auto", "direct", "fft", "sparse"):
            raise ValueError(f"unknown method {method!r}")
        if method == "sparse" and _kernels is None:
            raise RuntimeError("sparse back-end requires numba")
        self.filters = np.ascontiguousarray(h)
        self.method = method
        self.C, self.K, self.W = C, K, W
        self.Ne = W - K + 1
        self.nfft = sp_fft.next_fast_len(W, real=True)
        self._dense = "fft" if K * W > 4096 else "direct"
        # skip-zero loops beat the FFT below roughly this many non-zeros
        self._sparse_limit = int(4 * W * np.log2(self.nfft) / (2 * K - 1))
        self._spec = sp_fft.rfft(h, self.nfft, axis=-1)
        self._spec_conj = np.conj(self._spec)
        self._G = None

    @property
    def compiled(self) -> bool:
        """Whether whole solver loops may run through the compiled kernels."""
        return _kernels is not None and self.method in ("auto", "sparse")

    @property
    def gram_table(self) -> np.ndarray:
        """Filter cross-correlations ``G[c, c2, d + K - 1]`` used by the sparse Gram kernel."""
        if self._G is None:
            self._G = _gram_table(self.filters)
        return self._G

    def _backend(self, code: np.ndarray) -> str:
        if self.method != "auto":
            return self.method
        if _kernels is not None and code.ndim == 2 and np.count_nonzero(code) <= self._sparse_limit:
            return "sparse"
        return self._dense

    # -- shape checks -----------------------------------------------------

    def _check_code(self, code) -> np.ndarray:
        x = np.asarray(code, dtype=np.float64)
        if x.ndim < 2 or x.shape[-2:] != (self.C, self.Ne):
            raise ValueError(
                f"code shape {x.shape} does not match (..., C={self.C}, Ne={self.Ne}) "
                f"for W={self.W}, K={self.K}"
            )
        return x

    def _check_signal(self, signal) -> np.ndarray:
        y = np.asarray(signal, dtype=np.float64)
        if y.ndim < 1 or y.shape[-1] != self.W:
            raise ValueError(f"signal shape {y.shape} does not match (..., W={self.W})")
        return y

    # -- spectral helpers -------------------------------------------------

    def rfft(self, x) -> np.ndarray:
        return sp_fft.rfft(x, self.nfft, axis=-1)

    def irfft(self, X, length: int) -> np.ndarray:
        return sp_fft.irfft(X, self.nfft, axis=-1)[..., :length]

    def forward_spectrum(self, code_spec) -> np.ndarray:
        """Spectrum of ``H x`` given the spectrum of ``x``."""
        return np.einsum("cf,...cf->...f", self._spec, code_spec)

    def adjoint_spectrum(self, signal_spec) -> np.ndarray:
        """Spectrum (before truncation) of ``H^T y`` given that of ``y``."""
        return self._spec_conj * signal_spec[..., None, :]

    # -- operators --------------------------------------------------------

    def forward(self, code) -> np.ndarray:
        x = self._check_code(code)
        backend = self._backend(x)
        if backend == "fft":
            return self.irfft(self.forward_spectrum(self.rfft(x)), self.W)
        if backend == "sparse":
            return _batched(x, (self.W,), lambda xi, out: _kernels.synth(self.filters, xi, out))
        out = np.zeros(x.shape[:-2] + (self.W,))
        for k in range(self.K):
            out[..., k : k + self.Ne] += np.einsum("c,...cn->...n", self.filters[:, k], x)
        return out

    def adjoint(self, signal) -> np.ndarray:
        y = self._check_signal(signal)
        if (self.method if self.method != "auto" else self._dense) == "fft":
            return self.irfft(self.adjoint_spectrum(self.rfft(y)), self.Ne)
        out = np.zeros(y.shape[:-1] + (self.C, self.Ne))
        for k in range(self.K):
            out += self.filters[:, k, None] * y[..., None, k : k + self.Ne]
        return out

    def gram(self, code) -> np.ndarray:
        """``H^T H x`` without materialising ``H x`` in the time domain."""
        x = self._check_code(code)
        backend = self._backend(x)
        if backend == "fft":
            S = self.forward_spectrum(self.rfft(x))
            return self.irfft(self.adjoint_spectrum(S), self.Ne)
        if backend == "sparse":
            G = self.gram_table
            return _batched(x, (self.C, self.Ne), lambda xi, out: _kernels.gram(G, xi, out))
        return self.adjoint(self.forward(x))

    def correlate(self, signal, code) -> np.ndarray:
        """Filter-shaped correlation ``out[c, k] = sum_n signal[n + k] code[c, n]``.

        This is the derivative of ``<signal, H code>`` with respect to the
        filters; leading batch axes are summed over.
        """
        y = self._check_signal(signal)
        x = self._check_code(code)
        if y.shape[:-1] != x.shape[:-2]:
            raise ValueError(f"signal {y.shape} and code {x.shape} have different batch shapes")
        backend = self._backend(x)
        if backend == "sparse":
            out = np.zeros((self.C, self.K))
            ys = np.ascontiguousarray(y.reshape(-1, self.W))
            xs = np.ascontiguousarray(x.reshape(-1, self.C, self.Ne))
            for yi, xi in zip(ys, xs):
                _kernels.correlate(yi, xi, out)
            return out
        return correlate_code(y, x, self.K, method=backend)


def _gram_table(h: np.ndarray) -> np.ndarray:
    C, K = h.shape
    G = np.zeros((C, C, 2 * K - 1))
    for d in range(-(K - 1), K):
        if d >= 0:
            G[:, :, d + K - 1] = h[:, : K - d] @ h[:, d:].T
        else:
            G[:, :, d + K - 1] = h[:, -d:] @ h[:, : K + d].T
    return G


def _batched(x: np.ndarray, tail: tuple, kernel) -> np.ndarray:
    lead = x.shape[:-2]
    xs = np.ascontiguousarray(x.reshape((-1,) + x.shape[-2:]))
    out = np.zeros((xs.shape[0],) + tail)
    for xi, oi in zip(xs, out):
        kernel(xi, oi)
    return out.reshape(lead + tail)


def correlate_code(signal, code, K: int, method: str = "direct") -> np.ndarray:
    """``out[c, k] = sum_n signal[..., n + k] * code[..., c, n]``, summed over batch axes."""
    y = np.asarray(signal, dtype=np.float64)
    x = np.asarray(code, dtype=np.float64)
    Ne = x.shape[-1]
    W = Ne + K - 1
    if y.shape[-1] != W or y.shape[:-1] != x.shape[:-2]:
        raise ValueError(f"signal {y.shape} and code {x.shape} inconsistent with K={K}")
    C = x.shape[-2]
    if method == "fft":
        nfft = sp_fft.next_fast_len(W, real=True)
        Y = sp_fft.rfft(y, nfft, axis=-1)
        X = sp_fft.rfft(x, nfft, axis=-1)
        prod = Y[..., None, :] * np.conj(X)
        prod = prod.reshape(-1, C, prod.shape[-1]).sum(axis=0)
        return sp_fft.irfft(prod, nfft, axis=-1)[:, :K]
    yb = y.reshape(-1, W)
    xb = x.reshape(-1, C, Ne)
    out = np.empty((C, K))
    for k in range(K):
        out[:, k] = np.einsum("bn,bcn->c", yb[:, k : k + Ne], xb)
    return out


def apply_dictionary(filters, code, method: str = "auto") -> np.ndarray:
    """Synthesize ``y = H x`` (length ``W = Ne + K - 1``) from codes of shape ``(..., C, Ne)``."""
    h = _check_filters(filters)
    x = np.asarray(code, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] != h.shape[0]:
        raise ValueError(f"code shape {x.shape} does not match C={h.shape[0]} filters")
    return ConvDictionary(h, x.shape[-1] + h.shape[1] - 1, method).forward(x)


def apply_adjoint(filters, signal, method: str = "auto") -> np.ndarray:
    """Correlate a signal of length ``W >= K`` with every filter: returns ``H^T y``."""
    h = _check_filters(filters)
    y = np.asarray(signal, dtype=np.float64)
    return ConvDictionary(h, y.shape[-1], method).adjoint(y)


def apply_gram(filters, code, method: str = "auto") -> np.ndarray:
    h = _check_filters(filters)
    x = np.asarray(code, dtype=np.float64)
    return ConvDictionary(h, x.shape[-1] + h.shape[1] - 1, method).gram(x)


def dense_matrix(filters, window_len: int) -> np.ndarray:
    """Explicit ``W x (C * Ne)`` block-Toeplitz matrix ``[H_1 | ... | H_C]``.

    Only meant for small test instances.
    """
    h = _check_filters(filters)
    C, K = h.shape
    Ne = window_len - K + 1
    if Ne < 1:
        raise ValueError("window shorter than filters")
    H = np.zeros((window_len, C * Ne))
    for c in range(C):
        for col in range(Ne):
            H[col : col + K, c * Ne + col] = h[c]
    return H


def power_iteration(
    op: ConvDictionary, max_iters: int = 1000, tol: float = 1e-6, seed: int = 0, target: float | None = None
) -> tuple[float, bool, int]:
    """Largest eigenvalue of ``H^T H`` by power iteration.

    Returns ``(estimate, converged, iterations)``. The estimate is a Rayleigh
    quotient, so it never exceeds the true eigenvalue. Convergence means the
    eigen-residual ``||H^T H v - mu v||`` is at most ``tol * mu``; a stalled
    estimate alone is not trusted because it stalls early when the top
    eigenvalues are close. Iteration also stops once the estimate reaches
    ``target``, if one is given.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((op.C, op.Ne))
    v /= np.linalg.norm(v)
    estimate = 0.0
    for it in range(1, max_iters + 1):
        u = op.gram(v)
        estimate = float(np.vdot(v, u))
        norm = np.linalg.norm(u)
        if norm == 0.0:
            return 0.0, True, it
        if np.linalg.norm(u - estimate * v) <= tol * estimate:
            return estimate, True, it
        if target is not None and estimate >= target:
            return estimate, True, it
        v = u / norm
    return estimate, False, max_iters


def spectral_bound(filters, oversample: int = 64) -> float:
    """Upper bound ``max_w sum_c |h_c(w)|^2`` on ``sigma_max(H^T H)`` for any window length.

    The maximum is taken on a grid of ``oversample * K`` frequencies and
    inflated by the worst-case grid loss for a trigonometric polynomial of
    degree ``K - 1``, so the result is a true bound. It is tight when the
    window is much longer than the filters.
    """
    h = _check_filters(filters)
    K = h.shape[1]
    n = max(oversample * K, 64)
    power = np.sum(np.abs(np.fft.rfft(h, n, axis=1)) ** 2, axis=0)
    return float(np.max(power)) / math.cos(math.pi * (K - 1) / n)


def estimate_lipschitz(
    filters, window_len: int, max_iters: int = 20_000, tol: float = 1e-6, seed: int = 0
) -> float:
    """Step constant ``L >= sigma_max(H^T H)`` for FISTA, within 0.5% of it.

    The :func:`spectral_bound` is returned as soon as a power-iteration
    estimate certifies it is that tight, which happens after a few steps for
    windows much longer than the filters. Otherwise ``L`` is ``1.005`` times
    the converged power-iteration estimate. If neither happens within
    ``max_iters`` steps (close top eigenvalues), small operators fall back to
    an exact dense eigenvalue. Large ones get the bound, with a
    :class:`ConvergenceWarning` when it may be more than 1% loose.
    """
    op = ConvDictionary(filters, window_len)
    bound = spectral_bound(op.filters)
    target = bound / (1.0 + LIPSCHITZ_SAFETY)
    sigma, converged, iters = power_iteration(op, max_iters, tol, seed, target=target)
    if sigma >= target:
        return bound
    if converged:
        return (1.0 + LIPSCHITZ_SAFETY) * sigma
    n = op.C * op.Ne
    if n <= DENSE_EIG_LIMIT:
        H = dense_matrix(op.filters, op.W)
        top = float(scipy.linalg.eigvalsh(H.T @ H, subset_by_index=[n - 1, n - 1])[0])
        return min((1.0 + LIPSCHITZ_SAFETY) * top, bound)
    if bound > 1.01 * sigma:
        warnings.warn(
            f"power iteration did not converge in {iters} iterations and the spectral bound "
            f"{bound:.6g} is more than 1% above its estimate {sigma:.6g}",
            ConvergenceWarning,
            stacklevel=2,
        )
    return bound
