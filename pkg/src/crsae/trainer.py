"""Training loops: projected ADAM for CRsAE and the untied LCSC(3) baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .conv_ops import ConvDictionary, apply_dictionary, estimate_lipschitz
from .encoder import EncoderDivergence, FistaConfig, fista_encode
from .gradient import batch_gradient, untied_loss_and_gradients
from .metrics import match_filters, recovery_err

__all__ = [
    "AdamState",
    "EpochRecord",
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "adam_step",
    "evaluate_loss",
    "init_perturbed_dictionary",
    "lambda_from_data",
    "lambda_heuristic",
    "lr_range_test",
    "noise_std_estimate",
    "project_unit_ball",
    "select_learning_rate",
    "train",
    "train_lcsc_baseline",
]

log = logging.getLogger(__name__)

LCSC_ITERATIONS = 3
_EVAL_CHUNK = 32


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, cause: str):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {cause}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    max_epochs: int = 60
    patience: int = 10
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # lambda decays geometrically per epoch when < 1; 1.0 keeps it fixed
    lambda_decay: float = 1.0
    recompute_lipschitz: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and non-negative")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.lambda_decay <= 1:
            raise ValueError("lambda_decay must lie in (0, 1]")


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(
    state: AdamState, grad, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected ADAM update; returns the new state and the parameter increment."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != state.first_moment.shape:
        raise ValueError(f"gradient shape {g.shape} != state shape {state.first_moment.shape}")
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * g
    v = beta2 * state.second_moment + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    delta = -lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m, v, t), delta


def project_unit_ball(filters) -> np.ndarray:
    """Rescale every filter with norm above one back onto the unit sphere."""
    h = np.array(filters, dtype=np.float64)
    norms = np.linalg.norm(h, axis=1)
    outside = norms > 1.0
    h[outside] /= norms[outside, None]
    return h


def noise_std_estimate(residual, mode: str = "paper") -> float:
    """Noise scale from a residual window.

    ``"paper"`` returns ``||n||_2 / N`` as printed in the λ rule; ``"rms"`` returns
    the per-sample standard deviation ``||n||_2 / sqrt(N)``.
    """
    n = np.asarray(residual, dtype=np.float64).ravel()
    if n.size == 0:
        raise ValueError("empty residual")
    norm = float(np.linalg.norm(n))
    if mode == "paper":
        return norm / n.size
    if mode == "rms":
        return norm / math.sqrt(n.size)
    raise ValueError(f"unknown noise mode {mode!r}")


def lambda_heuristic(sigma_n: float, C: int, N_e: int, scale: float = 1.0) -> float:
    """``scale * sigma_n * sqrt(2 ln(C * N_e))``."""
    if sigma_n < 0:
        raise ValueError("sigma_n must be non-negative")
    if scale <= 0:
        raise ValueError("scale must be positive")
    return scale * sigma_n * math.sqrt(2.0 * math.log(C * N_e))


def lambda_from_data(windows, codes, init_filters, mode: str = "rms", scale: float = 1.0) -> float:
    """λ from the residual ``y_j - H_0 x_j`` of the initial dictionary, averaged over windows."""
    windows = np.asarray(windows, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    resid = windows - apply_dictionary(init_filters, codes)
    sigma = float(np.mean([noise_std_estimate(r, mode) for r in resid]))
    C, N_e = codes.shape[-2:]
    return lambda_heuristic(sigma, C, N_e, scale)


def init_perturbed_dictionary(true_filters, err_range=(0.4, 0.5), rng=None) -> np.ndarray:
    """Randomly perturbed copy of ``true_filters`` with per-filter recovery error in ``err_range``.

    Each filter is rotated by a random angle towards a random direction
    orthogonal to it, so the error equals the drawn target exactly.
    """
    lo, hi = err_range
    if not 0 <= lo <= hi < 1:
        raise ValueError("err_range must satisfy 0 <= lo <= hi < 1")
    rng = np.random.default_rng(rng)
    H = np.asarray(true_filters, dtype=np.float64)
    out = np.empty_like(H)
    for c, h in enumerate(H):
        u = h / np.linalg.norm(h)
        d = rng.standard_normal(h.shape)
        d -= np.dot(d, u) * u
        d /= np.linalg.norm(d)
        e = rng.uniform(lo, hi)
        out[c] = math.sqrt(1.0 - e * e) * u + e * d
    return project_unit_ball(out)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    errors: list[float] = field(default_factory=list)
    lam: float = math.nan


@dataclass
class TrainReport:
    """Learning curves plus the filters from the epoch with minimum validation loss."""

    history: list[EpochRecord]
    best_epoch: int
    filters: np.ndarray
    lam: float
    L: float
    arch: str = "crsae"
    encoder_filters: np.ndarray | None = None

    @property
    def best_val_loss(self) -> float:
        return next(r.val_loss for r in self.history if r.epoch == self.best_epoch)

    @property
    def final_errors(self) -> list[float]:
        return next(r.errors for r in self.history if r.epoch == self.best_epoch)


def evaluate_loss(windows, filters, cfg: FistaConfig, momentum: bool = True, dec_filters=None) -> float:
    """Mean reconstruction loss over windows, forward pass only."""
    windows = np.asarray(windows, dtype=np.float64)
    W = windows.shape[-1]
    enc_op = ConvDictionary(filters, W)
    dec_op = enc_op if dec_filters is None else ConvDictionary(dec_filters, W)
    total = 0.0
    for start in range(0, len(windows), _EVAL_CHUNK):
        y = windows[start : start + _EVAL_CHUNK]
        code, _ = fista_encode(y, None, cfg, momentum=momentum, op=enc_op)
        r = y - dec_op.forward(code)
        total += 0.5 * float(np.einsum("jn,jn->", r, r))
    return total / len(windows)


def _errors(ground_truth, filters) -> list[float]:
    if ground_truth is None:
        return []
    return match_filters(ground_truth, filters).raw_err


def _check_splits(train_windows, val_windows):
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ValueError("training and validation splits must be non-empty")


def train(
    train_windows,
    val_windows,
    init_filters,
    fista_cfg: FistaConfig,
    train_cfg: TrainConfig,
    ground_truth=None,
) -> TrainReport:
    """Mini-batch projected ADAM on the tied CRsAE loss.

    Every epoch shuffles the training windows with a seeded generator, takes
    one ADAM step per mini-batch followed by projection onto the unit ball,
    and then evaluates the validation loss. Training stops after
    ``patience`` epochs without improvement; the report carries the filters
    of the best epoch (epoch 0 is the initial dictionary).
    """
    _check_splits(train_windows, val_windows)
    train_windows = np.asarray(train_windows, dtype=np.float64)
    val_windows = np.asarray(val_windows, dtype=np.float64)
    h = project_unit_ball(init_filters)
    cfg = fista_cfg
    rng = np.random.default_rng(train_cfg.seed)
    adam = AdamState.zeros(h.shape)
    B = train_cfg.batch_size

    try:
        start = (evaluate_loss(train_windows, h, cfg), evaluate_loss(val_windows, h, cfg))
    except EncoderDivergence as exc:
        raise TrainingDiverged(0, -1, str(exc)) from exc
    history = [EpochRecord(0, *start, _errors(ground_truth, h), cfg.lam)]
    best_epoch, best_val, best_h = 0, history[0].val_loss, h.copy()
    log.info("epoch 0: val %.6g err %s", best_val, history[0].errors)

    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(len(train_windows))
        total = 0.0
        for b, start in enumerate(range(0, len(order), B)):
            idx = order[start : start + B]
            try:
                grad, loss = batch_gradient(train_windows[idx], h, cfg, jobs=train_cfg.jobs)
            except EncoderDivergence as exc:
                raise TrainingDiverged(epoch, b, str(exc)) from exc
            adam, delta = adam_step(adam, grad, train_cfg.learning_rate, train_cfg.adam_beta1, train_cfg.adam_beta2,
                                    train_cfg.adam_eps)
            h = project_unit_ball(h + delta)
            total += loss * len(idx)
        if train_cfg.lambda_decay != 1.0:
            cfg = replace(cfg, lam=cfg.lam * train_cfg.lambda_decay)
        if train_cfg.recompute_lipschitz:
            cfg = replace(cfg, L=estimate_lipschitz(h, train_windows.shape[-1]))
        try:
            val = evaluate_loss(val_windows, h, cfg)
        except EncoderDivergence as exc:
            raise TrainingDiverged(epoch, -1, str(exc)) from exc
        if not math.isfinite(val):
            raise TrainingDiverged(epoch, -1, "non-finite validation loss")
        rec = EpochRecord(epoch, total / len(order), val, _errors(ground_truth, h), cfg.lam)
        history.append(rec)
        log.info("epoch %d: train %.6g val %.6g err %s", epoch, rec.train_loss, val, rec.errors)
        if val < best_val:
            best_epoch, best_val, best_h = epoch, val, h.copy()
        elif epoch - best_epoch >= train_cfg.patience:
            break

    return TrainReport(history, best_epoch, best_h, cfg.lam, cfg.L)


def select_learning_rate(lrs, val_drops) -> float:
    """Learning rate with the largest validation-loss drop; ties go to the smaller rate.

    Non-finite drops (diverged runs) never win.
    """
    if len(lrs) < 2 or len(lrs) != len(val_drops):
        raise ValueError("need at least two (lr, drop) pairs")
    pairs = sorted(zip(lrs, val_drops))
    best_lr, best_drop = None, -math.inf
    for lr, drop in pairs:
        if math.isfinite(drop) and drop > best_drop:
            best_lr, best_drop = lr, drop
    return pairs[0][0] if best_lr is None else best_lr


def lr_range_test(
    train_windows, val_windows, init_filters, fista_cfg: FistaConfig, train_cfg: TrainConfig,
    lrs=(1e-5, 1e-4, 1e-3, 1e-2, 1e-1),
) -> tuple[float, list[tuple[float, float]]]:
    """One epoch per candidate rate from the same start; picks the sharpest validation drop."""
    drops = []
    for lr in lrs:
        cfg = replace(train_cfg, learning_rate=lr, max_epochs=1)
        try:
            rep = train(train_windows, val_windows, init_filters, fista_cfg, cfg)
            drop = rep.history[0].val_loss - rep.history[-1].val_loss
        except TrainingDiverged:
            drop = -math.inf
        drops.append(drop)
        log.info("lr %.3g: validation drop %.6g", lr, drop)
    return select_learning_rate(list(lrs), drops), list(zip(lrs, drops))


def train_lcsc_baseline(
    train_windows,
    val_windows,
    init_filters,
    fista_cfg: FistaConfig,
    train_cfg: TrainConfig,
    ground_truth=None,
    train_lambda: bool = True,
    tied: bool = False,
) -> TrainReport:
    """LCSC(3): three ISTA steps with encoder filters, an untied linear decoder, trainable λ.

    Encoder and decoder start from the same filters but are updated
    independently and without norm constraints; ``fista_cfg.T`` is ignored in
    favour of three iterations. ``tied=True`` with ``train_lambda=False``
    reduces the model to momentum-free CRsAE (used as a consistency check).
    Recovery errors refer to the decoder filters.
    """
    _check_splits(train_windows, val_windows)
    train_windows = np.asarray(train_windows, dtype=np.float64)
    val_windows = np.asarray(val_windows, dtype=np.float64)
    enc = np.array(init_filters, dtype=np.float64)
    dec = enc.copy()
    lam, L = float(fista_cfg.lam), float(fista_cfg.L)
    rng = np.random.default_rng(train_cfg.seed)
    st_enc, st_dec = AdamState.zeros(enc.shape), AdamState.zeros(dec.shape)
    st_lam = AdamState.zeros(())
    B, lr = train_cfg.batch_size, train_cfg.learning_rate
    betas = (train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)

    def cfg_of(lam_value):
        return FistaConfig(lam_value, L, LCSC_ITERATIONS)

    def val_loss():
        return evaluate_loss(val_windows, enc, cfg_of(lam), momentum=False, dec_filters=dec)

    try:
        start = (evaluate_loss(train_windows, enc, cfg_of(lam), momentum=False, dec_filters=dec), val_loss())
    except EncoderDivergence as exc:
        raise TrainingDiverged(0, -1, str(exc)) from exc
    history = [EpochRecord(0, *start, _errors(ground_truth, dec), lam)]
    best = (0, history[0].val_loss, enc.copy(), dec.copy(), lam)

    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(len(train_windows))
        total = 0.0
        for b, start in enumerate(range(0, len(order), B)):
            idx = order[start : start + B]
            g_enc, g_dec, g_lam, loss_sum = np.zeros_like(enc), np.zeros_like(dec), 0.0, 0.0
            cfg = cfg_of(lam)
            try:
                for y in train_windows[idx]:
                    loss, de, dd, dl = untied_loss_and_gradients(y, enc, dec, cfg, momentum=False)
                    g_enc += de
                    g_dec += dd
                    g_lam += dl
                    loss_sum += loss
            except EncoderDivergence as exc:
                raise TrainingDiverged(epoch, b, str(exc)) from exc
            if not math.isfinite(loss_sum):
                raise TrainingDiverged(epoch, b, "non-finite loss")
            if tied:
                g_enc = g_dec = g_enc + g_dec
            st_enc, d_enc = adam_step(st_enc, g_enc, lr, *betas)
            st_dec, d_dec = adam_step(st_dec, g_dec, lr, *betas)
            enc = enc + d_enc
            dec = enc.copy() if tied else dec + d_dec
            if train_lambda:
                st_lam, d_lam = adam_step(st_lam, g_lam, lr, *betas)
                lam = max(lam + float(d_lam), 1e-12)
            total += loss_sum
        try:
            val = val_loss()
        except EncoderDivergence as exc:
            raise TrainingDiverged(epoch, -1, str(exc)) from exc
        if not math.isfinite(val):
            raise TrainingDiverged(epoch, -1, "non-finite validation loss")
        history.append(EpochRecord(epoch, total / len(order), val, _errors(ground_truth, dec), lam))
        log.info("lcsc epoch %d: val %.6g err %s lam %.4g", epoch, val, history[-1].errors, lam)
        if val < best[1]:
            best = (epoch, val, enc.copy(), dec.copy(), lam)
        elif epoch - best[0] >= train_cfg.patience:
            break

    epoch, _, best_enc, best_dec, best_lam = best
    return TrainReport(history, epoch, best_dec, best_lam, L, arch="lcsc3", encoder_filters=best_enc)


def split_counts(total: int, fractions=(630, 70, 20)) -> tuple[int, int, int]:
    """Train/val/test sizes in the proportions 630:70:20 (exactly those for 720 windows)."""
    s = sum(fractions)
    n_val = int(round(total * fractions[1] / s))
    n_test = int(round(total * fractions[2] / s))
    return total - n_val - n_test, n_val, n_test


def recovery_errors(ground_truth, filters) -> list[float]:
    return [recovery_err(g, f) for g, f in zip(ground_truth, filters)]
