"""Dictionary-recovery error and filter matching."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["RecoveryReport", "match_filters", "recovery_err", "shift_filter", "sweep_aggregate"]

MAX_EXHAUSTIVE_C = 6


def recovery_err(h, h_hat) -> float:
    """``sqrt(1 - <h, h_hat>^2 / (||h||^2 ||h_hat||^2))``: 0 when collinear, 1 when orthogonal."""
    h = np.asarray(h, dtype=np.float64).ravel()
    h_hat = np.asarray(h_hat, dtype=np.float64).ravel()
    if h.shape != h_hat.shape:
        raise ValueError(f"length mismatch: {h.shape} vs {h_hat.shape}")
    nh, nhh = np.linalg.norm(h), np.linalg.norm(h_hat)
    if nh == 0 or nhh == 0:
        raise ValueError("recovery error is undefined for a zero filter")
    cos = float(np.dot(h / nh, h_hat / nhh))
    return math.sqrt(max(0.0, 1.0 - min(1.0, cos * cos)))


def shift_filter(h, s: int) -> np.ndarray:
    """Delay ``h`` by ``s`` samples (advance for negative ``s``), zero-filling the vacated end."""
    h = np.asarray(h, dtype=np.float64)
    out = np.zeros_like(h)
    K = len(h)
    if abs(s) >= K:
        return out
    if s >= 0:
        out[s:] = h[: K - s]
    else:
        out[: K + s] = h[-s:]
    return out


def _best_shift(h, h_hat, max_shift: int) -> tuple[float, int]:
    best, best_s = recovery_err(h, h_hat), 0
    for s in range(-max_shift, max_shift + 1):
        if s == 0:
            continue
        moved = shift_filter(h_hat, s)
        if not np.any(moved):
            continue
        e = recovery_err(h, moved)
        if e < best:
            best, best_s = e, s
    return best, best_s


@dataclass
class RecoveryReport:
    """Matching of learned filters to true ones.

    ``assignment[c]`` is the learned index matched to true filter ``c``;
    ``err`` are shift-corrected errors (equal to ``raw_err`` when
    ``max_shift == 0``) and ``raw_err`` use the same assignment without shifts,
    with ``raw_assignment`` the permutation that is optimal for raw errors.
    """

    assignment: list[int]
    err: list[float]
    shift: list[int]
    sign_flip: list[bool]
    raw_assignment: list[int]
    raw_err: list[float]
    max_shift: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def mean_err(self) -> float:
        return float(np.mean(self.err))

    @property
    def max_err(self) -> float:
        return float(np.max(self.err))

    @property
    def mean_raw_err(self) -> float:
        return float(np.mean(self.raw_err))

    @property
    def max_raw_err(self) -> float:
        return float(np.max(self.raw_err))

    def to_dict(self) -> dict:
        return {
            "assignment": list(self.assignment),
            "err": list(self.err),
            "shift": list(self.shift),
            "sign_flip": list(self.sign_flip),
            "raw_assignment": list(self.raw_assignment),
            "raw_err": list(self.raw_err),
            "max_shift": self.max_shift,
            "mean_err": self.mean_err,
            "max_err": self.max_err,
            "mean_raw_err": self.mean_raw_err,
            "max_raw_err": self.max_raw_err,
        }


def _best_assignment(cost: np.ndarray) -> list[int]:
    C = cost.shape[0]
    best, best_perm = math.inf, None
    for perm in itertools.permutations(range(C)):
        total = sum(cost[c, p] for c, p in enumerate(perm))
        if total < best - 1e-15:
            best, best_perm = total, perm
    return list(best_perm)


def _greedy_assignment(cost: np.ndarray) -> list[int]:
    C = cost.shape[0]
    out = [-1] * C
    free_true, free_learned = set(range(C)), set(range(C))
    for flat in np.argsort(cost, axis=None, kind="stable"):
        c, p = divmod(int(flat), C)
        if c in free_true and p in free_learned:
            out[c] = p
            free_true.discard(c)
            free_learned.discard(p)
    return out


def match_filters(true_bank, learned_bank, max_shift: int = 0, greedy: bool = False) -> RecoveryReport:
    """Pair learned filters with true ones, minimising the mean recovery error.

    Searches all ``C!`` permutations (``C <= 6``) and, per pair, shifts in
    ``[-max_shift, max_shift]``. Recovery error is already sign-invariant; the
    sign of the matched inner product is reported for convenience.
    """
    H = np.asarray(true_bank, dtype=np.float64)
    G = np.asarray(learned_bank, dtype=np.float64)
    if H.shape != G.shape or H.ndim != 2:
        raise ValueError(f"filter banks differ in shape: {H.shape} vs {G.shape}")
    C = H.shape[0]
    if C > MAX_EXHAUSTIVE_C and not greedy:
        raise ValueError(f"exhaustive matching limited to C <= {MAX_EXHAUSTIVE_C}; pass greedy=True")
    assign = _greedy_assignment if greedy else _best_assignment

    raw = np.array([[recovery_err(H[c], G[p]) for p in range(C)] for c in range(C)])
    shifted = np.empty_like(raw)
    shifts = np.zeros((C, C), dtype=int)
    for c in range(C):
        for p in range(C):
            shifted[c, p], shifts[c, p] = _best_shift(H[c], G[p], max_shift) if max_shift else (raw[c, p], 0)

    perm = assign(shifted)
    raw_perm = assign(raw)
    return RecoveryReport(
        assignment=perm,
        err=[float(shifted[c, p]) for c, p in enumerate(perm)],
        shift=[int(shifts[c, p]) for c, p in enumerate(perm)],
        sign_flip=[bool(np.dot(H[c], shift_filter(G[p], shifts[c, p])) < 0) for c, p in enumerate(perm)],
        raw_assignment=raw_perm,
        raw_err=[float(raw[c, p]) for c, p in enumerate(raw_perm)],
        max_shift=max_shift,
    )


def sweep_aggregate(reports) -> list[dict]:
    """Per-SNR mean and (population) std of recovery errors across seeds.

    ``reports`` is an iterable of ``(snr, seed, RecoveryReport)``. One row per
    (snr, filter) plus a pooled row with ``filter == "all"`` that averages the
    per-seed mean errors.
    """
    by_snr: dict[float, list[RecoveryReport]] = {}
    for snr, _seed, rep in reports:
        by_snr.setdefault(float(snr), []).append(rep)
    if not by_snr:
        raise ValueError("nothing to aggregate")
    rows = []
    for snr in sorted(by_snr):
        reps = by_snr[snr]
        errs = np.array([r.raw_err for r in reps])
        for c in range(errs.shape[1]):
            rows.append(
                {"snr": snr, "filter": str(c + 1), "mean_err": float(errs[:, c].mean()),
                 "std_err": float(errs[:, c].std()), "n": len(reps)}
            )
        pooled = errs.mean(axis=1)
        rows.append(
            {"snr": snr, "filter": "all", "mean_err": float(pooled.mean()),
             "std_err": float(pooled.std()), "n": len(reps)}
        )
    return rows
