"""Synthetic extracellular recordings with known spike templates and spike trains.

Each electrode is an independent realisation: every neuron fires as a Poisson
process with a dead time of one filter length, spikes are scaled copies of
the neuron's template, and i.i.d. Gaussian noise is added. Spike onsets are
restricted to positions whose template fits entirely inside a window, so each
window satisfies ``y_j = H x_j + v_j`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conv_ops import apply_dictionary

__all__ = [
    "SimConfig",
    "SimulatedData",
    "SpikeEventSet",
    "compute_snr",
    "discretize_and_synthesize",
    "electrode_events",
    "event_codes",
    "generate_events",
    "make_filter_bank",
    "pairwise_correlations",
    "simulate",
    "window_signal",
]

PAPER_AMPLITUDES = ((362.0, 20.0), (388.0, 25.0), (360.0, 30.0))


@dataclass(frozen=True)
class SimConfig:
    C: int = 3
    K: int = 45
    fs: float = 30_000.0
    T0: float = 18.0
    rate: float = 30.0
    amplitude_means: tuple[float, ...] = tuple(m for m, _ in PAPER_AMPLITUDES)
    amplitude_stds: tuple[float, ...] = tuple(s for _, s in PAPER_AMPLITUDES)
    snr_db: float | None = 16.0
    noise_sigma: float | None = None
    window_len: int = 3000
    electrodes: int = 4
    correlation_range: tuple[float, float] = (-0.087, 0.455)
    seed: int = 0

    def __post_init__(self):
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        if self.C < 1 or self.K < 1:
            raise ValueError("C and K must be positive")
        if self.rate < 0 or self.rate * self.K / self.fs >= 1:
            raise ValueError(f"rate={self.rate} Hz is infeasible with a {self.K}-sample refractory period")
        if self.window_len <= self.K:
            raise ValueError("window_len must exceed K")
        if self.electrodes < 1:
            raise ValueError("need at least one electrode")
        if len(self.amplitude_means) < self.C or len(self.amplitude_stds) < self.C:
            raise ValueError("need an amplitude (mean, std) pair per neuron")
        if self.snr_db is not None and self.noise_sigma is not None:
            raise ValueError("give either snr_db or noise_sigma, not both")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def n_samples(self) -> int:
        # sample count is T0 * fs (the printed floor(T0 / fs) is dimensionally off)
        return int(math.floor(self.T0 * self.fs + 1e-9))

    @property
    def windows_per_electrode(self) -> int:
        return self.n_samples // self.window_len

    @property
    def code_len(self) -> int:
        return self.window_len - self.K + 1


@dataclass
class SpikeEventSet:
    """Continuous-time events of one recording: per neuron, onset times (s) and amplitudes."""

    times: list[np.ndarray]
    amplitudes: list[np.ndarray]
    T0: float

    @property
    def counts(self) -> list[int]:
        return [len(t) for t in self.times]


@dataclass
class SimulatedData:
    filters: np.ndarray
    windows: np.ndarray  # (J, W) noisy
    clean: np.ndarray  # (J, W)
    codes: np.ndarray  # (J, C, Ne)
    electrode: np.ndarray  # (J,) electrode index of each window
    events: list[SpikeEventSet]
    noise_sigma: np.ndarray  # (electrodes,)
    snr_db: np.ndarray  # (electrodes,) measured on the full recordings
    config: SimConfig = field(repr=False)

    @property
    def noise(self) -> np.ndarray:
        return self.windows - self.clean


def _template(K: int, rng: np.random.Generator) -> np.ndarray:
    """Spike-like waveform: sharp trough on a broad base, then a slow repolarisation tail.

    The waveform is nonzero at both ends of the K samples, so shifting it by a
    sample changes what the filter can reproduce.
    """
    u = np.arange(K, dtype=np.float64) / (K - 1)
    trough = rng.uniform(0.15, 0.5)
    width = rng.uniform(0.04, 0.09)
    base = rng.uniform(0.15, 0.3)
    tau = rng.uniform(0.25, 0.45)
    rebound = rng.uniform(0.25, 0.7)
    r = np.clip((u - trough) / tau, 0.0, None)
    h = (
        -np.exp(-0.5 * ((u - trough) / width) ** 2)
        - base * np.exp(-0.5 * ((u - trough) / 0.35) ** 2)
        + rebound * r * np.exp(1.0 - r)
    )
    return h / np.linalg.norm(h)


def pairwise_correlations(filters) -> np.ndarray:
    """Inner products of the normalised filters for every pair c < c'."""
    h = np.asarray(filters, dtype=np.float64)
    h = h / np.linalg.norm(h, axis=1, keepdims=True)
    G = h @ h.T
    return G[np.triu_indices(len(h), k=1)]


def make_filter_bank(
    C: int,
    K: int,
    correlation_range: tuple[float, float] = (-0.087, 0.455),
    rng: np.random.Generator | None = None,
    max_tries: int = 20_000,
) -> np.ndarray:
    """Unit-norm biphasic action-potential-like templates with bounded pairwise correlation.

    Filters are drawn by rejection sampling. Raises ``RuntimeError`` (reporting
    the tightest range seen) if ``max_tries`` draws never satisfy the bounds.
    """
    if K < 4:
        raise ValueError("templates need K >= 4")
    lo, hi = correlation_range
    if lo > hi:
        raise ValueError("empty correlation range")
    rng = np.random.default_rng(rng)
    best, best_excess = None, math.inf
    for _ in range(max_tries):
        bank = np.stack([_template(K, rng) for _ in range(C)])
        if C == 1:
            return bank
        corr = pairwise_correlations(bank)
        excess = max(0.0, lo - corr.min()) + max(0.0, corr.max() - hi)
        if excess == 0.0:
            return bank
        if excess < best_excess:
            best, best_excess = corr, excess
    raise RuntimeError(
        f"no filter bank within [{lo}, {hi}] after {max_tries} draws; "
        f"closest had correlations in [{best.min():.3f}, {best.max():.3f}]"
    )


def generate_events(cfg: SimConfig, rng: np.random.Generator | None = None) -> SpikeEventSet:
    """Poisson spike trains with a dead time of ``K / fs`` for every neuron.

    Onsets are drawn uniformly over the admissible positions (a template must
    fit inside its window), which is the same as rejecting and re-drawing
    events that would straddle a window boundary or run off the end.
    """
    rng = np.random.default_rng(rng)
    W, Ne, fs = cfg.window_len, cfg.code_len, cfg.fs
    J = cfg.windows_per_electrode
    span = J * Ne / fs
    dead = cfg.K / fs
    times, amps = [], []
    for c in range(cfg.C):
        n = rng.poisson(cfg.rate * span) if cfg.rate > 0 else 0
        u = np.sort(rng.uniform(0.0, span, n)) * fs
        j = np.floor(u / Ne)
        off = np.clip(u - j * Ne, 0.0, np.nextafter(Ne, 0))
        tau = (j * W + off) / fs
        keep = np.zeros(len(tau), dtype=bool)
        last = -math.inf
        for i, t in enumerate(tau):
            if t - last >= dead:
                keep[i] = True
                last = t
        tau = tau[keep]
        times.append(tau)
        amps.append(rng.normal(cfg.amplitude_means[c], cfg.amplitude_stds[c], len(tau)))
    return SpikeEventSet(times=times, amplitudes=amps, T0=cfg.T0)


def event_codes(events: SpikeEventSet, cfg: SimConfig) -> np.ndarray:
    """Ground-truth code matrices, one ``(C, Ne)`` block per window."""
    J, W, Ne = cfg.windows_per_electrode, cfg.window_len, cfg.code_len
    codes = np.zeros((J, cfg.C, Ne))
    for c, (tau, amp) in enumerate(zip(events.times, events.amplitudes)):
        n = np.floor(tau * cfg.fs + 1e-9).astype(np.int64)
        j, p = np.divmod(n, W)
        if np.any(p >= Ne) or np.any(j >= J):
            raise ValueError("event support leaves its window")
        codes[j, c, p] += amp
    return codes


def discretize_and_synthesize(
    events: SpikeEventSet,
    filters,
    cfg: SimConfig,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample-grid recording from continuous events.

    Returns ``(clean, noisy, codes)`` where ``clean`` and ``noisy`` have
    ``cfg.n_samples`` samples and ``codes`` has shape ``(J, C, Ne)``.
    The noise level is ``cfg.noise_sigma`` or, if ``cfg.snr_db`` is set,
    back-computed from the clean signal power.
    """
    rng = np.random.default_rng(rng)
    filters = np.asarray(filters, dtype=np.float64)
    if filters.shape != (cfg.C, cfg.K):
        raise ValueError(f"filters shape {filters.shape} != ({cfg.C}, {cfg.K})")
    codes = event_codes(events, cfg)
    J, W = len(codes), cfg.window_len
    clean = np.zeros(cfg.n_samples)
    if J:
        clean[: J * W] = apply_dictionary(filters, codes, method="direct").reshape(-1)
    sigma = noise_level(clean, cfg)
    noisy = clean + sigma * rng.standard_normal(cfg.n_samples) if sigma > 0 else clean.copy()
    return clean, noisy, codes


def noise_level(clean, cfg: SimConfig) -> float:
    if cfg.snr_db is None:
        return float(cfg.noise_sigma or 0.0)
    power = float(np.vdot(clean, clean)) / len(clean)
    return math.sqrt(power / 10.0 ** (cfg.snr_db / 10.0))


def window_signal(signal, W: int) -> np.ndarray:
    """Non-overlapping length-``W`` windows as rows; the trailing remainder is dropped."""
    signal = np.asarray(signal)
    if W < 1:
        raise ValueError("window length must be positive")
    J = len(signal) // W
    return signal[: J * W].reshape(J, W).copy()


def compute_snr(clean, noise) -> float:
    """``10 log10(||clean||^2 / ||noise||^2)`` in dB."""
    noise = np.asarray(noise, dtype=np.float64)
    pn = float(np.vdot(noise, noise))
    if pn == 0.0:
        raise ValueError("noise is identically zero; SNR is infinite")
    clean = np.asarray(clean, dtype=np.float64)
    pc = float(np.vdot(clean, clean))
    return 10.0 * math.log10(pc / pn) if pc > 0 else -math.inf


def _streams(cfg: SimConfig) -> list:
    # [filter bank, then (events, noise) per electrode]
    return np.random.SeedSequence(cfg.seed).spawn(1 + 2 * cfg.electrodes)


def electrode_events(cfg: SimConfig) -> list[SpikeEventSet]:
    """The spike events :func:`simulate` draws for each electrode, without synthesising signals."""
    seeds = _streams(cfg)
    return [generate_events(cfg, np.random.default_rng(seeds[1 + 2 * e])) for e in range(cfg.electrodes)]


def simulate(cfg: SimConfig, filters=None) -> SimulatedData:
    """Full dataset: filter bank (unless given) and every electrode's windows."""
    seeds = _streams(cfg)
    if filters is None:
        filters = make_filter_bank(cfg.C, cfg.K, cfg.correlation_range, np.random.default_rng(seeds[0]))
    filters = np.asarray(filters, dtype=np.float64)
    windows, clean_w, codes, elec, events, sigmas, snrs = [], [], [], [], [], [], []
    for e, ev in enumerate(electrode_events(cfg)):
        clean, noisy, x = discretize_and_synthesize(ev, filters, cfg, np.random.default_rng(seeds[2 + 2 * e]))
        windows.append(window_signal(noisy, cfg.window_len))
        clean_w.append(window_signal(clean, cfg.window_len))
        codes.append(x)
        elec.append(np.full(len(x), e))
        events.append(ev)
        sigmas.append(noise_level(clean, cfg))
        noise = noisy - clean
        snrs.append(compute_snr(clean, noise) if np.any(noise) else math.inf)
    return SimulatedData(
        filters=filters,
        windows=np.concatenate(windows),
        clean=np.concatenate(clean_w),
        codes=np.concatenate(codes),
        electrode=np.concatenate(elec),
        events=events,
        noise_sigma=np.array(sigmas),
        snr_db=np.array(snrs),
        config=cfg,
    )
