import math
from dataclasses import replace

import numpy as np
import pytest

from covbalance import (BalanceWeights, Dataset, GameConfig, LinearBall,
                        RngStream, SignSlope, WeightedSample, dd, deepmatch,
                        fw_balance, game_terms, link_loss, objective_eval,
                        phi_range)
from covbalance.numerics import DenseSpec, init_params, mlp

LOG2 = math.log(2.0)


def toy_data(seed=3, n1=4, n0=6, dim=2):
    gen = RngStream(seed).generator()
    x = gen.normal(size=(n1 + n0, dim))
    return Dataset(x, np.array([1] * n1 + [0] * n0))


def small_game_config(**kw):
    base = dict(psi=0.0, lam=1.0, epochs_stage1=3, epochs_stage2=2,
                batch_size=20, restarts=1, tolerance=0.2, grid_size=3,
                learning_rate=1e-3, seed=5)
    base.update(kw)
    return GameConfig(**base)


# ---------------------------------------------------------------------------
# Weight container
# ---------------------------------------------------------------------------

def test_balance_weights_conventions():
    w = BalanceWeights(np.array([0.25, 0.75]), "unit_sum")
    w.validate()
    ext = w.to_treated_count(4)
    ext.validate(4)
    assert np.allclose(ext.control_weights, [1.0, 3.0])
    back = ext.to_unit_sum(4)
    assert np.allclose(back.control_weights, w.control_weights)
    full = ext.full_weights(np.array([1, 0, 1, 0]))
    assert np.allclose(full, [1.0, 1.0, 1.0, 3.0])


def test_balance_weights_validation_errors():
    with pytest.raises(ValueError):
        BalanceWeights(np.array([-0.1, 1.1]), "unit_sum")
    bad = BalanceWeights(np.array([0.2, 0.2]), "unit_sum")
    with pytest.raises(ValueError):
        bad.validate()
    raw = BalanceWeights(np.array([5.0, 7.0]), "raw")
    with pytest.raises(ValueError):
        raw.to_treated_count(4)


# ---------------------------------------------------------------------------
# Conditional gradient
# ---------------------------------------------------------------------------

def test_fw_zero_iterations_uniform():
    data = toy_data()
    w = fw_balance(data, LinearBall(), 1.0, 0.0, 0)
    w.validate(data.n1)
    assert np.allclose(w.control_weights, data.n1 / data.n0)


def test_fw_duplicated_arms_reaches_penalty_floor():
    gen = RngStream(6).generator()
    xt = gen.normal(size=(4, 2))
    data = Dataset(np.vstack([xt, xt]), np.array([1] * 4 + [0] * 4))
    w = fw_balance(data, LinearBall(), 1.0, 0.0, 500)
    achieved = objective_eval(w, data, LinearBall(), 0.0, 1.0)
    floor = 1.0 * 4 / 16  # uniform weights kill the distance term entirely
    assert achieved <= floor + 1e-3


def test_fw_beats_simplex_grid():
    gen = RngStream(100).generator()
    n1 = 3
    x = np.vstack([gen.normal(size=(n1, 2)), gen.normal(size=(3, 2))])
    data = Dataset(x, np.array([1] * n1 + [0] * 3))
    lam = 1.0
    w = fw_balance(data, LinearBall(), lam, 0.0, 500)
    achieved = objective_eval(w, data, LinearBall(), 0.0, lam)
    best = math.inf
    k = 100
    for i in range(k + 1):
        for j in range(k + 1 - i):
            v = np.array([i, j, k - i - j], dtype=float) / k
            bw = BalanceWeights(v * n1, "treated_count")
            best = min(best, objective_eval(bw, data, LinearBall(), 0.0, lam))
    assert achieved <= best + 1e-3


def test_fw_requires_exact_oracle_family():
    from covbalance import NeuralClass
    with pytest.raises(ValueError):
        fw_balance(toy_data(), NeuralClass(mlp(2, (2,))), 1.0, 0.0, 10)


# ---------------------------------------------------------------------------
# Game terms
# ---------------------------------------------------------------------------

def _const_nets(f_value, g_logit):
    arch_f = (DenseSpec(2, 1, "identity"),)
    arch_g = (DenseSpec(2, 1, "exp"),)
    tf = init_params(arch_f, RngStream(0))
    tf.weights[0][:] = 0.0
    tf.biases[0][:] = f_value
    tg = init_params(arch_g, RngStream(1))
    tg.weights[0][:] = 0.0
    tg.biases[0][:] = g_logit
    return tf, tg


def test_game_terms_treated_zero_score():
    tf, tg = _const_nets(0.0, 0.5)
    u, gf, gg = game_terms(tf, tg, np.zeros(2), True, 10, 0.0, 1.0, 0.2)
    assert u == 0.0
    assert all(np.all(a == 0) for a in gg.arrays())


def test_game_terms_control_zero_everything():
    tf, tg = _const_nets(0.0, 0.0)
    u, _, _ = game_terms(tf, tg, np.zeros(2), False, 10, 0.0, 0.0, 0.0)
    assert u == 0.0


def test_game_terms_control_hand_value():
    tf, tg = _const_nets(1.0, 0.5)
    u, _, _ = game_terms(tf, tg, np.array([0.3, 0.4]), False, 10, 0.0, 1.0, 0.2)
    expected = (math.exp(0.5) * link_loss(-1.0) / 10.0
                + math.e / 100.0 + 0.2 * math.exp(0.5) / 10.0)
    assert abs(u - expected) < 1e-14


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def test_objective_matchable_arms_leaves_penalty_only():
    gen = RngStream(8).generator()
    xt = gen.normal(size=(3, 2))
    data = Dataset(np.vstack([xt, xt]), np.array([1] * 3 + [0] * 3))
    w = BalanceWeights(np.ones(3), "treated_count")
    val = objective_eval(w, data, LinearBall(), 0.0, 2.0)
    assert abs(val - 2.0 * 3 / 9) < 1e-10


def test_objective_midpoint_convexity():
    data = toy_data(seed=21, n1=3, n0=4)
    gen = RngStream(22).generator()
    for _ in range(20):
        w1 = gen.dirichlet(np.ones(4)) * 3
        w2 = gen.dirichlet(np.ones(4)) * 3
        mid = 0.5 * (w1 + w2)
        f = lambda w: objective_eval(BalanceWeights(w, "treated_count"),
                                     data, LinearBall(), 0.5, 0.7)
        assert f(mid) <= 0.5 * (f(w1) + f(w2)) + 1e-8


def test_objective_matches_fw_internal():
    data = toy_data(seed=30, n1=3, n0=4)
    lam = 1.0
    w = fw_balance(data, LinearBall(), lam, 0.0, 160)
    v = w.control_weights / data.n1
    s_plus = WeightedSample(np.full(data.n1, 1.0 / data.n1), data.x_treated)
    s_minus = WeightedSample(v, data.x_control)
    internal = dd(LinearBall(), s_plus, s_minus, 0.0).squared_value \
        + lam * float(v @ v)
    assert abs(objective_eval(w, data, LinearBall(), 0.0, lam) - internal) < 1e-12

    def test_rejects_unit_sum():
        pass
    with pytest.raises(ValueError):
        objective_eval(w.to_unit_sum(data.n1), data, LinearBall(), 0.0, lam)


# ---------------------------------------------------------------------------
# Adversarial weights
# ---------------------------------------------------------------------------

def test_deepmatch_constant_covariates_exactly_uniform():
    for seed in range(5):
        data = Dataset(np.ones((40, 3)), np.array([1] * 10 + [0] * 30))
        w, trace = deepmatch(data, small_game_config(seed=seed))
        w.validate(10)
        assert np.allclose(w.control_weights, 10 / 30, rtol=1e-10)


def test_deepmatch_output_invariants():
    data = toy_data(seed=40, n1=8, n0=22, dim=3)
    cfg = small_game_config(batch_size=10, seed=9)
    w, trace = deepmatch(data, cfg)
    assert np.all(w.control_weights >= 0)
    assert abs(w.control_weights.sum() - data.n1) < 1e-9
    full = w.full_weights(data.t)
    assert np.all(full[data.t == 1] == 1.0)
    assert len(trace.objective) == cfg.epochs_stage1
    assert len(trace.weight_sums) == cfg.epochs_stage1
    assert math.isfinite(trace.selected_v)


def test_deepmatch_deterministic():
    data = toy_data(seed=41, n1=6, n0=14, dim=2)
    cfg = small_game_config(seed=123, batch_size=10)
    w1, t1 = deepmatch(data, cfg)
    w2, t2 = deepmatch(data, cfg)
    assert np.array_equal(w1.control_weights, w2.control_weights)
    assert t1.selected_v == t2.selected_v


def test_deepmatch_batch_size_precondition():
    data = toy_data(seed=42, n1=3, n0=4)
    with pytest.raises(ValueError):
        deepmatch(data, small_game_config(batch_size=100))


def test_game_config_validation():
    with pytest.raises(ValueError):
        GameConfig(psi=-0.1)
    with pytest.raises(ValueError):
        GameConfig(tolerance=1.5)
    with pytest.raises(ValueError):
        GameConfig(epochs_stage1=0)


# ---------------------------------------------------------------------------
# Multiplier bracketing
# ---------------------------------------------------------------------------

def test_phi_range_reports_endpoint_sums():
    data = toy_data(seed=50, n1=10, n0=20, dim=2)
    cfg = small_game_config(batch_size=10, tolerance=0.3, grid_size=5,
                            learning_rate=0.05, epochs_stage1=10)
    span = phi_range(data, cfg)
    eta, n1 = cfg.tolerance, data.n1
    assert len(span.grid) == cfg.grid_size
    assert span.grid[0] == pytest.approx(span.phi_low)
    assert span.grid[-1] == pytest.approx(span.phi_high)
    assert span.phi_low <= span.phi_high
    # the stated endpoint bounds
    assert span.sum_low >= eta * n1
    assert span.sum_high <= n1 / eta


def test_phi_range_monotone_majority_over_seeds():
    wins = 0
    for seed in range(5):
        data = toy_data(seed=60 + seed, n1=10, n0=20, dim=2)
        cfg = small_game_config(batch_size=10, tolerance=0.25, grid_size=3,
                                learning_rate=0.05, epochs_stage1=10,
                                seed=seed)
        span = phi_range(data, cfg)
        if span.sum_high <= span.sum_low:
            wins += 1
    assert wins >= 3
