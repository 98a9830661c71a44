"""End-to-end experiment steps shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig
from .conv_ops import estimate_lipschitz
from .encoder import FistaConfig
from .metrics import RecoveryReport, match_filters
from .simulator import SimulatedData, simulate
from .trainer import (
    TrainReport,
    init_perturbed_dictionary,
    lambda_from_data,
    project_unit_ball,
    split_counts,
    train,
    train_lcsc_baseline,
)

__all__ = [
    "Dataset",
    "RunResult",
    "initial_dictionary",
    "make_dataset",
    "resolve_fista",
    "run_experiment",
    "split_indices",
]

# stream tags mixed into seeds so that different uses never share draws
_SPLIT_STREAM = 1
_INIT_STREAM = 2


@dataclass
class Dataset:
    filters: np.ndarray
    windows: dict  # split name -> (n, W)
    codes: dict  # split name -> (n, C, Ne)
    indices: dict  # split name -> window indices into the simulation
    sim: SimulatedData | None = None


@dataclass
class RunResult:
    report: TrainReport
    recovery: RecoveryReport | None
    init_filters: np.ndarray
    fista: FistaConfig


def split_indices(total: int, split, seed: int) -> dict:
    """Seeded shuffle of ``range(total)`` cut into train/val/test."""
    counts = split_counts(total) if split is None else tuple(int(n) for n in split)
    if sum(counts) > total:
        raise ValueError(f"split {counts} needs {sum(counts)} windows but only {total} exist")
    perm = np.random.default_rng([seed, _SPLIT_STREAM]).permutation(total)
    a, b = counts[0], counts[0] + counts[1]
    return {"train": perm[:a], "val": perm[a:b], "test": perm[b : b + counts[2]]}


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    sim = simulate(cfg.simulation)
    idx = split_indices(len(sim.windows), cfg.split, cfg.simulation.seed)
    return Dataset(
        filters=sim.filters,
        windows={k: sim.windows[v] for k, v in idx.items()},
        codes={k: sim.codes[v] for k, v in idx.items()},
        indices=idx,
        sim=sim,
    )


def initial_dictionary(true_filters, cfg: ExperimentConfig) -> np.ndarray:
    """Starting filters per ``cfg.init``, drawn from a stream of the training seed."""
    rng = np.random.default_rng([cfg.training.seed, _INIT_STREAM])
    H = np.asarray(true_filters, dtype=np.float64)
    kind = cfg.init.kind
    if kind == "perturbed":
        return init_perturbed_dictionary(H, cfg.init.err_range, rng)
    if kind == "gaussian":
        G = rng.standard_normal(H.shape)
        return G / np.linalg.norm(G, axis=1, keepdims=True)
    return project_unit_ball(H)


def resolve_fista(cfg: ExperimentConfig, init_filters, train_windows, train_codes) -> FistaConfig:
    """Fill in ``lam`` (noise heuristic on the initial dictionary's residual) and ``L``."""
    enc = cfg.encoder
    W = np.asarray(train_windows).shape[-1]
    L = enc.L if enc.L is not None else estimate_lipschitz(init_filters, W)
    if enc.lam is not None:
        lam = enc.lam
    else:
        lam = lambda_from_data(train_windows, train_codes, init_filters, enc.noise_mode, enc.lambda_scale)
        # rounding leaves a tiny residual even when the data are noise-free
        if not lam > 1e-9 * float(np.sqrt(np.mean(np.square(train_windows)))):
            raise ValueError("noise heuristic gave lam = 0 (noise-free data?); set encoder.lam explicitly")
    return FistaConfig(lam=float(lam), L=float(L), T=enc.T)


def run_experiment(cfg: ExperimentConfig, data: Dataset, arch: str = "crsae", jobs: int = 1) -> RunResult:
    """Initialise, pick ``lam``/``L`` and train one architecture on ``data``."""
    if arch not in ("crsae", "lcsc3"):
        raise ValueError(f"unknown architecture {arch!r}")
    init = initial_dictionary(data.filters, cfg)
    fista = resolve_fista(cfg, init, data.windows["train"], data.codes["train"])
    tcfg = replace(cfg.training, jobs=jobs)
    runner = train if arch == "crsae" else train_lcsc_baseline
    report = runner(data.windows["train"], data.windows["val"], init, fista, tcfg, ground_truth=data.filters)
    recovery = match_filters(data.filters, report.filters, max_shift=cfg.eval.max_shift)
    return RunResult(report=report, recovery=recovery, init_filters=init, fista=fista)
