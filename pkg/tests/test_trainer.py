import math

import numpy as np
import pytest

from crsae.conv_ops import apply_dictionary, estimate_lipschitz
from crsae.encoder import FistaConfig
from crsae.metrics import recovery_err
from crsae.trainer import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    evaluate_loss,
    init_perturbed_dictionary,
    lambda_from_data,
    lambda_heuristic,
    lr_range_test,
    noise_std_estimate,
    project_unit_ball,
    select_learning_rate,
    split_counts,
    train,
    train_lcsc_baseline,
)


def toy_problem(seed=0, n=24, C=2, K=8, W=120, spikes=3, sigma=0.05):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((C, K))
    h /= np.linalg.norm(h, axis=1, keepdims=True)
    x = np.zeros((n, C, W - K + 1))
    for j in range(n):
        for c in range(C):
            pos = rng.choice(W - K + 1, spikes, replace=False)
            x[j, c, pos] = rng.uniform(2, 4, spikes)
    y = apply_dictionary(h, x) + sigma * rng.standard_normal((n, W))
    return h, x, y


def test_adam_first_step_is_signed_lr():
    st = AdamState.zeros((3,))
    st, delta = adam_step(st, np.array([2.0, -0.5, 0.0]), 0.1)
    np.testing.assert_allclose(delta, [-0.1, 0.1, 0.0], atol=1e-7)
    assert st.step_count == 1
    with pytest.raises(ValueError):
        adam_step(st, np.zeros(2), 0.1)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((5, 4))
    st = AdamState.zeros((4,))
    m = v = np.zeros(4)
    for t, g in enumerate(grads, start=1):
        st, delta = adam_step(st, g, 0.01, 0.8, 0.99, 1e-6)
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        ref = -0.01 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-6)
        np.testing.assert_allclose(delta, ref, rtol=1e-14)


def test_project_unit_ball_only_shrinks():
    h = np.array([[3.0, 4.0], [0.3, 0.4], [0.0, 0.0]])
    p = project_unit_ball(h)
    np.testing.assert_allclose(p, [[0.6, 0.8], [0.3, 0.4], [0.0, 0.0]])
    assert p is not h


def test_noise_std_modes():
    r = np.full(100, 2.0)
    assert noise_std_estimate(r, "rms") == pytest.approx(2.0)
    assert noise_std_estimate(r, "paper") == pytest.approx(0.2)
    with pytest.raises(ValueError):
        noise_std_estimate(r, "mad")
    with pytest.raises(ValueError):
        noise_std_estimate([], "rms")


def test_lambda_heuristic_value():
    assert lambda_heuristic(2.0, 3, 2956) == pytest.approx(2.0 * math.sqrt(2 * math.log(3 * 2956)))
    assert lambda_heuristic(1.0, 1, 10, scale=2.0) == pytest.approx(2 * math.sqrt(2 * math.log(10)))
    with pytest.raises(ValueError):
        lambda_heuristic(-1.0, 1, 10)
    with pytest.raises(ValueError):
        lambda_heuristic(1.0, 1, 10, scale=0)


def test_lambda_from_data_uses_init_residual():
    h, x, y = toy_problem(sigma=0.0)
    # exact filters and no noise: zero residual
    assert lambda_from_data(y, x, h) == 0.0
    h0 = init_perturbed_dictionary(h, (0.3, 0.3), np.random.default_rng(1))
    resid = y - apply_dictionary(h0, x)
    sigma = np.mean([np.sqrt(np.mean(r**2)) for r in resid])
    assert lambda_from_data(y, x, h0) == pytest.approx(lambda_heuristic(sigma, 2, x.shape[-1]))


@pytest.mark.parametrize("lo,hi", [(0.4, 0.5), (0.1, 0.1), (0.0, 0.0)])
def test_perturbed_init_hits_error_range(lo, hi):
    h, _, _ = toy_problem()
    h0 = init_perturbed_dictionary(h, (lo, hi), np.random.default_rng(2))
    np.testing.assert_allclose(np.linalg.norm(h0, axis=1), 1.0)
    for a, b in zip(h, h0):
        assert lo - 1e-12 <= recovery_err(a, b) <= hi + 1e-12
    with pytest.raises(ValueError):
        init_perturbed_dictionary(h, (0.5, 0.4))


@pytest.mark.parametrize("bad", [dict(batch_size=0), dict(learning_rate=-1), dict(learning_rate=math.inf),
                                 dict(max_epochs=0), dict(patience=0), dict(lambda_decay=0.0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_split_counts():
    assert split_counts(720) == (630, 70, 20)
    assert split_counts(180) == (157, 18, 5)
    assert sum(split_counts(37)) == 37


@pytest.fixture(scope="module")
def toy_run():
    h, x, y = toy_problem()
    h0 = init_perturbed_dictionary(h, (0.3, 0.35), np.random.default_rng(3))
    cfg = FistaConfig(0.3, estimate_lipschitz(h0, y.shape[1]), 50)
    tcfg = TrainConfig(batch_size=4, learning_rate=1e-2, max_epochs=15, patience=15, seed=5)
    return h, h0, y, cfg, tcfg, train(y[:20], y[20:], h0, cfg, tcfg, ground_truth=h)


def test_training_lowers_loss_and_error(toy_run):
    h, h0, y, cfg, tcfg, rep = toy_run
    first, best = rep.history[0], rep.history[rep.best_epoch]
    assert best.val_loss < first.val_loss
    assert max(best.errors) < min(first.errors)
    assert rep.history[0].val_loss == evaluate_loss(y[20:], h0, cfg)
    np.testing.assert_array_less(np.linalg.norm(rep.filters, axis=1), 1 + 1e-12)
    assert rep.best_val_loss == best.val_loss
    assert rep.final_errors == best.errors


def test_training_is_deterministic(toy_run):
    h, h0, y, cfg, tcfg, rep = toy_run
    again = train(y[:20], y[20:], h0, cfg, tcfg, ground_truth=h)
    np.testing.assert_array_equal(again.filters, rep.filters)
    assert [r.val_loss for r in again.history] == [r.val_loss for r in rep.history]


def test_parallel_batches_match_serial():
    h, x, y = toy_problem(n=10)
    cfg = FistaConfig(0.3, estimate_lipschitz(h, y.shape[1]), 20)
    tcfg = TrainConfig(batch_size=5, learning_rate=1e-2, max_epochs=2)
    a = train(y[:8], y[8:], h, cfg, tcfg)
    b = train(y[:8], y[8:], h, cfg, TrainConfig(batch_size=5, learning_rate=1e-2, max_epochs=2, jobs=2))
    np.testing.assert_array_equal(a.filters, b.filters)


def test_early_stopping_with_zero_learning_rate():
    h, x, y = toy_problem(n=8)
    cfg = FistaConfig(0.3, estimate_lipschitz(h, y.shape[1]), 10)
    rep = train(y[:6], y[6:], h, cfg, TrainConfig(batch_size=3, learning_rate=0.0, max_epochs=20, patience=2))
    assert rep.best_epoch == 0
    assert len(rep.history) == 3
    np.testing.assert_array_equal(rep.filters, h)


def test_lambda_decay_and_lipschitz_refresh():
    h, x, y = toy_problem(n=8)
    cfg = FistaConfig(0.3, estimate_lipschitz(h, y.shape[1]), 10)
    tcfg = TrainConfig(batch_size=3, learning_rate=1e-2, max_epochs=2, lambda_decay=0.5, recompute_lipschitz=True)
    rep = train(y[:6], y[6:], h, cfg, tcfg)
    assert [r.lam for r in rep.history] == [0.3, 0.15, 0.075]
    assert rep.L != cfg.L


def test_divergence_raises():
    h, x, y = toy_problem(n=6)
    cfg = FistaConfig(1e-4, estimate_lipschitz(h, y.shape[1]) / 100, 300)
    with pytest.raises(TrainingDiverged):
        train(y[:4], y[4:], h, cfg, TrainConfig(batch_size=2, max_epochs=1))


def test_empty_split_rejected():
    h, x, y = toy_problem(n=4)
    cfg = FistaConfig(0.3, 10.0, 3)
    with pytest.raises(ValueError):
        train(y, y[:0], h, cfg, TrainConfig())


def test_select_learning_rate():
    assert select_learning_rate([1e-3, 1e-2, 1e-1], [1.0, 5.0, -math.inf]) == 1e-2
    assert select_learning_rate([1e-2, 1e-3], [2.0, 2.0]) == 1e-3
    assert select_learning_rate([1e-2, 1e-3], [-math.inf, math.nan]) == 1e-3
    with pytest.raises(ValueError):
        select_learning_rate([1e-3], [1.0])


def test_lr_range_test_runs_each_rate():
    h, x, y = toy_problem(n=8)
    cfg = FistaConfig(0.3, estimate_lipschitz(h, y.shape[1]), 10)
    h0 = init_perturbed_dictionary(h, (0.3, 0.3), np.random.default_rng(0))
    lr, drops = lr_range_test(y[:6], y[6:], h0, cfg, TrainConfig(batch_size=3), lrs=(1e-4, 1e-2))
    assert [d[0] for d in drops] == [1e-4, 1e-2]
    assert lr in (1e-4, 1e-2)


def test_lcsc_baseline_fits_and_reports_decoder():
    h, x, y = toy_problem()
    h0 = init_perturbed_dictionary(h, (0.3, 0.35), np.random.default_rng(3))
    cfg = FistaConfig(0.3, estimate_lipschitz(h0, y.shape[1]), 50)
    tcfg = TrainConfig(batch_size=4, learning_rate=1e-2, max_epochs=8, patience=8)
    rep = train_lcsc_baseline(y[:20], y[20:], h0, cfg, tcfg, ground_truth=h)
    assert rep.arch == "lcsc3"
    assert rep.encoder_filters.shape == h.shape
    assert rep.history[rep.best_epoch].val_loss < rep.history[0].val_loss
    lams = [r.lam for r in rep.history]
    assert lams[0] == 0.3 and len(set(lams)) > 1


def test_lcsc_fixed_lambda_keeps_lambda():
    h, x, y = toy_problem(n=8)
    cfg = FistaConfig(0.3, estimate_lipschitz(h, y.shape[1]), 50)
    rep = train_lcsc_baseline(y[:6], y[6:], h, cfg, TrainConfig(batch_size=3, max_epochs=2),
                              train_lambda=False, tied=True)
    assert all(r.lam == 0.3 for r in rep.history)
    np.testing.assert_array_equal(rep.encoder_filters, rep.filters)
