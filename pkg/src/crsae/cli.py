"""Command-line driver: ``crsae {simulate,train,sweep,gradcheck,eval}``.

Every command writes its outputs plus a ``manifest.json`` that embeds the
full configuration, so ``--config <dir>/manifest.json`` reruns it exactly.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig
from .conv_ops import apply_dictionary, estimate_lipschitz
from .encoder import FistaConfig, fista_encode
from .gradient import backprop_filter_gradient, finite_difference_gradient, kink_margin
from .metrics import RecoveryReport, match_filters, shift_filter, sweep_aggregate
from .pipeline import Dataset, make_dataset, run_experiment
from .trainer import TrainingDiverged
from .storage import (
    config_hash,
    read_json,
    read_tensor,
    write_csv,
    write_json,
    write_tensor,
)

__all__ = ["cmd_eval", "cmd_gradcheck", "cmd_simulate", "cmd_sweep", "cmd_train", "main", "resolve_jobs"]

log = logging.getLogger("crsae")

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
U64_MAX = 2**64 - 1


# -- helpers ----------------------------------------------------------------


def _versions() -> dict:
    import scipy

    out = {"crsae": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:
        out["numba"] = None
    return out


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _manifest(kind: str, cfg: ExperimentConfig, **extra) -> dict:
    data = cfg.to_dict()
    return {
        "manifest_version": MANIFEST_VERSION,
        "kind": kind,
        "config": data,
        "config_hash": config_hash(data),
        "versions": _versions(),
        **extra,
    }


def load_config(path) -> ExperimentConfig:
    """Read a config file, or the configuration embedded in a manifest."""
    if path is None:
        return ExperimentConfig()
    data = read_json(path)
    if isinstance(data, dict) and "manifest_version" in data:
        data = data["config"]
    return ExperimentConfig.from_dict(data)


def resolve_jobs(jobs: int | None) -> int:
    """``--jobs`` if given, else ``CRSAE_JOBS``, else 1."""
    if jobs is None:
        env = os.environ.get("CRSAE_JOBS")
        if env is None or env.strip() == "":
            return 1
        try:
            jobs = int(env)
        except ValueError:
            raise ConfigError(f"CRSAE_JOBS must be an integer, got {env!r}") from None
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    return jobs


def _with_seed(cfg: ExperimentConfig, seed: int | None, sections) -> ExperimentConfig:
    if seed is None:
        return cfg
    return cfg.with_overrides(**{s: {"seed": seed} for s in sections})


# -- dataset files ------------------------------------------------------------


def save_dataset(out: Path, data: Dataset, cfg: ExperimentConfig) -> dict:
    write_tensor(out / "filters.tensor", data.filters)
    for split in SPLITS:
        write_tensor(out / f"{split}_windows.tensor", data.windows[split])
        write_tensor(out / f"{split}_codes.tensor", data.codes[split])
    sim = data.sim
    manifest = _manifest(
        "dataset",
        cfg,
        seed=cfg.simulation.seed,
        windows={s: int(len(data.windows[s])) for s in SPLITS},
        window_indices={s: [int(i) for i in data.indices[s]] for s in SPLITS},
        measured_snr_db=[_finite_or_none(v) for v in sim.snr_db],
        noise_sigma=[float(v) for v in sim.noise_sigma],
        events_per_window=float(np.count_nonzero(sim.codes) / max(len(sim.codes), 1)),
    )
    write_json(out / "manifest.json", manifest)
    return manifest


def load_dataset(path) -> tuple[Dataset, dict]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{path} is not a dataset directory (no manifest.json)")
    manifest = read_json(manifest_path)
    data = Dataset(
        filters=read_tensor(path / "filters.tensor"),
        windows={s: read_tensor(path / f"{s}_windows.tensor") for s in SPLITS},
        codes={s: read_tensor(path / f"{s}_codes.tensor") for s in SPLITS},
        indices={s: np.asarray(manifest["window_indices"][s], dtype=int) for s in SPLITS},
    )
    return data, manifest


# -- commands -----------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, out) -> dict:
    out = Path(out)
    data = make_dataset(cfg)
    manifest = save_dataset(out, data, cfg)
    log.info("simulated %d windows into %s", sum(manifest["windows"].values()), out)
    return manifest


def _history_rows(report, C: int):
    rows = []
    for rec in report.history:
        errs = list(rec.errors) if rec.errors else [math.nan] * C
        rows.append([rec.epoch, rec.train_loss, rec.val_loss, *errs])
    return rows


def cmd_train(cfg: ExperimentConfig, data_dir, out, arch: str = "crsae", jobs: int = 1) -> dict:
    """Train on a dataset directory; writes filters, history CSV, report and manifest."""
    out = Path(out)
    data, data_manifest = load_dataset(data_dir)
    result = run_experiment(cfg, data, arch=arch, jobs=jobs)
    rep = result.report
    C = data.filters.shape[0]
    write_tensor(out / "filters.tensor", rep.filters)
    write_tensor(out / "initial_filters.tensor", result.init_filters)
    if rep.encoder_filters is not None:
        write_tensor(out / "encoder_filters.tensor", rep.encoder_filters)
    header = ["epoch", "train_loss", "val_loss"] + [f"err_{c + 1}" for c in range(C)]
    write_csv(out / "history.csv", header, _history_rows(rep, C))
    summary = {
        "arch": arch,
        "best_epoch": rep.best_epoch,
        "best_val_loss": rep.best_val_loss,
        "epochs_run": rep.history[-1].epoch,
        "lam": rep.lam,
        "initial_lam": result.fista.lam,
        "L": result.fista.L,
        "T": result.fista.T,
        "recovery": result.recovery.to_dict() if result.recovery else None,
    }
    write_json(out / "report.json", summary)
    write_json(
        out / "manifest.json",
        _manifest("train", cfg, arch=arch, seed=cfg.training.seed,
                  dataset=str(Path(data_dir)), dataset_config_hash=data_manifest.get("config_hash")),
    )
    log.info("best epoch %d, recovery err %s", rep.best_epoch, summary["recovery"]["raw_err"])
    return summary


def _cell_name(snr: float, seed: int) -> str:
    return f"snr{snr:g}_seed{seed}"


def _sweep_cell(args) -> dict:
    cfg, snr, seed = args
    cell_cfg = cfg.with_overrides(simulation={"snr_db": snr, "noise_sigma": None, "seed": seed},
                                  training={"seed": seed})
    if cfg.sweep.max_epochs is not None:
        cell_cfg = cell_cfg.with_overrides(training={"max_epochs": cfg.sweep.max_epochs})
    data = make_dataset(cell_cfg)
    result = run_experiment(cell_cfg, data, arch="crsae", jobs=1)
    return {
        "snr": snr,
        "seed": seed,
        "config_hash": config_hash(cell_cfg.to_dict()),
        "best_epoch": result.report.best_epoch,
        "recovery": result.recovery.to_dict(),
        "measured_snr_db": [_finite_or_none(v) for v in data.sim.snr_db],
    }


def cmd_sweep(cfg: ExperimentConfig, out, jobs: int = 1) -> list[dict]:
    """Simulate and train every (SNR, seed) cell; completed cells are skipped on rerun."""
    out = Path(out)
    cells_dir = out / "cells"
    cells = [(float(snr), int(seed)) for snr in cfg.sweep.snr_db for seed in cfg.sweep.seeds]
    todo, results = [], {}
    for snr, seed in cells:
        marker = cells_dir / f"{_cell_name(snr, seed)}.json"
        if marker.exists():
            done = read_json(marker)
            if done.get("sweep_hash") == config_hash(cfg.to_dict()):
                results[(snr, seed)] = done
                continue
        todo.append((snr, seed))
    write_json(out / "manifest.json", _manifest("sweep", cfg, cells=[_cell_name(*c) for c in cells]))
    log.info("sweep: %d of %d cells already complete", len(cells) - len(todo), len(cells))

    def finish(cell: dict):
        cell["sweep_hash"] = config_hash(cfg.to_dict())
        write_json(cells_dir / f"{_cell_name(cell['snr'], cell['seed'])}.json", cell)
        results[(cell["snr"], cell["seed"])] = cell
        log.info("cell %s done: err %s", _cell_name(cell["snr"], cell["seed"]), cell["recovery"]["raw_err"])

    args = [(cfg, snr, seed) for snr, seed in todo]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell in pool.map(_sweep_cell, args):
                finish(cell)
    else:
        for a in args:
            finish(_sweep_cell(a))

    rows, reports = [], []
    for snr, seed in cells:
        cell = results[(snr, seed)]
        errs = cell["recovery"]["raw_err"]
        rows.extend([snr, seed, c + 1, e] for c, e in enumerate(errs))
        reports.append((snr, seed, _report_from_dict(cell["recovery"])))
    write_csv(out / "sweep.csv", ["snr", "seed", "filter", "err"], rows)
    agg = sweep_aggregate(reports)
    write_csv(out / "sweep_aggregate.csv", ["snr", "filter", "mean_err", "std_err", "n"],
              [[r["snr"], r["filter"], r["mean_err"], r["std_err"], r["n"]] for r in agg])
    return agg


def _report_from_dict(d: dict) -> RecoveryReport:
    return RecoveryReport(
        assignment=d["assignment"], err=d["err"], shift=d["shift"], sign_flip=d["sign_flip"],
        raw_assignment=d["raw_assignment"], raw_err=d["raw_err"], max_shift=d["max_shift"],
    )


def _gradcheck_instance(shape, lam: float, step: float, seed: int, index: int):
    """Random filters and window whose trace keeps clear of the shrinkage kinks."""
    C, K, W, T = shape
    rng = np.random.default_rng([seed, index])
    h = rng.standard_normal((C, K))
    for _ in range(100):
        y = rng.standard_normal(W)
        cfg = FistaConfig(lam, estimate_lipschitz(h, W), T)
        code, trace = fista_encode(y, h, cfg, record=True)
        if kink_margin(trace) > 10 * step:
            return h, y, cfg, code, trace
    raise RuntimeError(f"no kink-free instance found for shape {shape}")


def cmd_gradcheck(cfg: ExperimentConfig, seed: int = 0, corrupt: float = 0.0, out=None) -> tuple[bool, list]:
    """Back-propagated vs central-difference gradients on small random instances.

    ``corrupt`` adds a constant to the back-propagated gradient; it exists only
    to exercise the failure path.
    """
    gc = cfg.gradcheck
    lines, ok = [], True
    for i, shape in enumerate(gc.shapes):
        h, y, fcfg, code, trace = _gradcheck_instance(tuple(shape), gc.lam, gc.step, seed, i)
        bp = backprop_filter_gradient(y, h, fcfg, trace, apply_dictionary(h, code)) + corrupt
        fd = finite_difference_gradient(y, h, fcfg, gc.step)
        rel = float(np.max(np.abs(bp - fd) / np.maximum(np.abs(fd), 1e-8)))
        passed = rel <= gc.tol
        ok &= passed
        lines.append({"shape": list(shape), "max_rel_err": rel, "kink_margin": kink_margin(trace),
                      "passed": passed})
        print(f"C={shape[0]} K={shape[1]} W={shape[2]} T={shape[3]}  max rel err {rel:.3e}  "
              f"{'PASS' if passed else 'FAIL'}")
    if out is not None:
        out = Path(out)
        write_json(out / "gradcheck.json", {"passed": ok, "tol": gc.tol, "step": gc.step, "checks": lines})
        write_json(out / "manifest.json", _manifest("gradcheck", cfg, seed=seed))
    return ok, lines


def cmd_eval(learned_path, true_path, out, max_shift: int = 0) -> dict:
    """Match learned filters to true ones; writes report.json and an overlay CSV."""
    learned = read_tensor(learned_path)
    true = read_tensor(true_path)
    rep = match_filters(true, learned, max_shift=max_shift)
    out = Path(out)
    rows = []
    for c, p in enumerate(rep.assignment):
        g = shift_filter(learned[p], rep.shift[c]) if rep.shift[c] else learned[p].copy()
        norm = np.linalg.norm(g)
        if norm > 0:
            g = g / norm
        if rep.sign_flip[c]:
            g = -g
        t = true[c] / np.linalg.norm(true[c])
        rows.extend([c + 1, k, t[k], g[k]] for k in range(true.shape[1]))
    write_csv(out / "overlay.csv", ["filter", "sample", "true", "learned"], rows)
    report = rep.to_dict()
    write_json(out / "report.json", report)
    write_json(out / "manifest.json", {
        "manifest_version": MANIFEST_VERSION, "kind": "eval", "learned": str(learned_path),
        "true": str(true_path), "max_shift": max_shift, "versions": _versions(),
    })
    return report


# -- argument parsing ---------------------------------------------------------


def _u64(text: str) -> int:
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _bounded_int(low: int):
    def parse(text: str) -> int:
        try:
            v = int(text, 10)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
        if v < low:
            raise argparse.ArgumentTypeError(f"must be >= {low}")
        return v

    return parse


_positive_int = _bounded_int(1)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crsae", description="Convolutional dictionary learning with CRsAE.")
    p.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="experiment JSON (or a previous run's manifest.json)")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")
        sp.add_argument("--seed", type=_u64, help="override the seed")

    sp = sub.add_parser("simulate", help="simulate a dataset")
    common(sp)

    sp = sub.add_parser("train", help="train on a simulated dataset")
    common(sp)
    sp.add_argument("--data", type=Path, required=True, help="dataset directory written by simulate")
    sp.add_argument("--arch", choices=("crsae", "lcsc3"), default="crsae")
    sp.add_argument("--init", choices=("perturbed", "gaussian", "true"), help="initial dictionary")
    sp.add_argument("--lr", type=float, help="override the learning rate")
    sp.add_argument("--epochs", type=_positive_int, help="override the maximum number of epochs")
    sp.add_argument("--jobs", type=_positive_int, help="worker processes for batch gradients (env CRSAE_JOBS)")

    sp = sub.add_parser("sweep", help="error-vs-SNR sweep (resumable)")
    common(sp)
    sp.add_argument("--jobs", type=_positive_int, help="cells run in parallel (env CRSAE_JOBS)")

    sp = sub.add_parser("gradcheck", help="compare back-propagation with finite differences")
    common(sp, out_required=False)
    sp.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)

    sp = sub.add_parser("eval", help="score learned filters against true ones")
    sp.add_argument("--learned", type=Path, required=True)
    sp.add_argument("--true", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--config", type=Path, help="experiment JSON supplying eval.max_shift")
    sp.add_argument("--max-shift", type=_bounded_int(0), help="largest shift searched when matching")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.command == "simulate":
            cfg = _with_seed(cfg, args.seed, ["simulation"])
            m = cmd_simulate(cfg, args.out)
            print(f"wrote {sum(m['windows'].values())} windows to {args.out}")
        elif args.command == "train":
            cfg = _with_seed(cfg, args.seed, ["training"])
            if args.init is not None:
                cfg = cfg.with_overrides(init={"kind": args.init})
            if args.lr is not None:
                cfg = cfg.with_overrides(training={"learning_rate": args.lr})
            if args.epochs is not None:
                cfg = cfg.with_overrides(training={"max_epochs": args.epochs})
            s = cmd_train(cfg, args.data, args.out, arch=args.arch, jobs=resolve_jobs(args.jobs))
            print(f"best epoch {s['best_epoch']}  recovery err {s['recovery']['raw_err']}")
        elif args.command == "sweep":
            if args.seed is not None:
                cfg = cfg.with_overrides(sweep={"seeds": [args.seed]})
            agg = cmd_sweep(cfg, args.out, jobs=resolve_jobs(args.jobs))
            for r in agg:
                if r["filter"] == "all":
                    print(f"snr {r['snr']:g} dB  mean err {r['mean_err']:.4f}  std {r['std_err']:.4f}")
        elif args.command == "gradcheck":
            ok, _ = cmd_gradcheck(cfg, seed=args.seed or 0, corrupt=args.corrupt_gradient, out=args.out)
            return 0 if ok else 1
        elif args.command == "eval":
            shift = args.max_shift if args.max_shift is not None else cfg.eval.max_shift
            rep = cmd_eval(args.learned, args.true, args.out, max_shift=shift)
            print(f"mean err {rep['mean_err']:.4f}  max err {rep['max_err']:.4f}  assignment {rep['assignment']}")
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
