"""Skip-zero convolution kernels for sparse codes (numba-compiled)."""

import numpy as np
from numba import njit


@njit(cache=True)
def synth(h, x, out):
    # out[n + k] += x[c, n] * h[c, k]
    C, Ne = x.shape
    K = h.shape[1]
    for c in range(C):
        for n in range(Ne):
            v = x[c, n]
            if v != 0.0:
                for k in range(K):
                    out[n + k] += v * h[c, k]


@njit(cache=True)
def correlate(s, x, out):
    # out[c, k] += x[c, n] * s[n + k]
    C, Ne = x.shape
    K = out.shape[1]
    for c in range(C):
        for n in range(Ne):
            v = x[c, n]
            if v != 0.0:
                for k in range(K):
                    out[c, k] += v * s[n + k]


@njit(cache=True)
def gram(G, x, out):
    # out[c, n] += x[c2, m] * G[c, c2, n - m + K - 1]
    C, Ne = x.shape
    K1 = (G.shape[2] - 1) // 2
    for c2 in range(C):
        for m in range(Ne):
            v = x[c2, m]
            if v != 0.0:
                lo = max(0, m - K1)
                hi = min(Ne, m + K1 + 1)
                for c in range(C):
                    for n in range(lo, hi):
                        out[c, n] += v * G[c, c2, n - m + K1]


@njit(cache=True)
def _scaled_correlate(s, x, scale, out):
    C, Ne = x.shape
    K = out.shape[1]
    for c in range(C):
        for n in range(Ne):
            v = x[c, n]
            if v != 0.0:
                v *= scale
                for k in range(K):
                    out[c, k] += v * s[n + k]


TINY = np.finfo(np.float64).tiny


@njit(cache=True)
def fista_run(hty, G, thr, inv_L, T, use_momentum, limit, record, s_hist, w_hist, c_hist, x_hist, x):
    """Whole FISTA loop for one window; returns 0 or the failing iteration (negated on blow-up)."""
    C, Ne = hty.shape
    x_prev = np.zeros((C, Ne))
    w = np.empty((C, Ne))
    c = np.empty((C, Ne))
    gw = np.empty((C, Ne))
    x[:, :] = 0.0
    s_prev = 0.0 if use_momentum else 1.0
    if record:
        s_hist[0] = s_prev
        x_hist[0, :, :] = 0.0
    first = -1.0
    for t in range(1, T + 1):
        if use_momentum:
            s = (1.0 + np.sqrt(1.0 + 4.0 * s_prev * s_prev)) / 2.0
        else:
            s = 1.0
        a = (s_prev - 1.0) / s
        for i in range(C):
            for n in range(Ne):
                w[i, n] = x[i, n] + a * (x[i, n] - x_prev[i, n])
        gw[:, :] = 0.0
        gram(G, w, gw)
        size = 0.0
        finite = True
        for i in range(C):
            for n in range(Ne):
                v = w[i, n] + inv_L * (hty[i, n] - gw[i, n])
                c[i, n] = v
                m = abs(v)
                if m > size:
                    size = m
                elif not np.isfinite(m):
                    finite = False
        if not finite or not np.isfinite(size):
            return t
        if first < 0.0:
            first = size
        elif first > 0.0 and size > limit * first:
            return -t
        for i in range(C):
            for n in range(Ne):
                x_prev[i, n] = x[i, n]
                v = c[i, n]
                mag = abs(v) - thr
                if mag > 0.0 and mag >= TINY:
                    x[i, n] = mag if v >= 0.0 else -mag
                else:
                    x[i, n] = 0.0
        s_prev = s
        if record:
            s_hist[t] = s
            w_hist[t - 1, :, :] = w
            c_hist[t - 1, :, :] = c
            x_hist[t, :, :] = x
    return 0


@njit(cache=True)
def backprop_run(y, h, G, thr, inv_L, s_hist, w_hist, c_hist, gx, d_enc):
    """Replay a recorded FISTA run backwards; accumulates into ``d_enc`` and returns ``(d_lam, status)``."""
    T = w_hist.shape[0]
    C, Ne = gx.shape
    W = y.shape[0]
    gx = gx.copy()
    gx_copy = np.zeros((C, Ne))
    gc = np.empty((C, Ne))
    ggc = np.empty((C, Ne))
    hw = np.empty(W)
    hg = np.empty(W)
    d_lam = 0.0
    for t in range(T, 0, -1):
        c = c_hist[t - 1]
        w = w_hist[t - 1]
        active = False
        dl = 0.0
        for i in range(C):
            for n in range(Ne):
                v = c[i, n]
                if abs(v) > thr and gx[i, n] != 0.0:
                    g = gx[i, n]
                    gc[i, n] = g
                    active = True
                    dl += g if v > 0.0 else -g
                else:
                    gc[i, n] = 0.0
        a = (s_hist[t - 1] - 1.0) / s_hist[t]
        if active:
            d_lam -= inv_L * dl
            hw[:] = 0.0
            synth(h, w, hw)
            for n in range(W):
                hw[n] = y[n] - hw[n]
            hg[:] = 0.0
            synth(h, gc, hg)
            _scaled_correlate(hw, gc, inv_L, d_enc)
            _scaled_correlate(hg, w, -inv_L, d_enc)
            ggc[:, :] = 0.0
            gram(G, gc, ggc)
            ok = True
            for i in range(C):
                for n in range(Ne):
                    g = gc[i, n] - inv_L * ggc[i, n]
                    gx[i, n] = (1.0 + a) * g + gx_copy[i, n]
                    gx_copy[i, n] = -a * g
                    if not np.isfinite(gx[i, n]):
                        ok = False
            if not ok:
                return d_lam, t
        else:
            for i in range(C):
                for n in range(Ne):
                    gx[i, n] = gx_copy[i, n]
                    gx_copy[i, n] = 0.0
    return d_lam, 0
