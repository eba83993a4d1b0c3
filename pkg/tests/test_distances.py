import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covbalance import (BoundViolationError, KernelSpec, LinearBall,
                        NeuralClass, NeuralDDConfig, RngStream, SignSlope,
                        WeightedSample, binary_entropy_gap, bound_check, dd,
                        dd_dual, ipm, link_loss, mlp)
from covbalance.distances import class_bound
from covbalance.properties import random_weighted_pair

LOG2 = math.log(2.0)


def sample(weights, points):
    return WeightedSample(np.asarray(weights, float), np.asarray(points, float))


# ---------------------------------------------------------------------------
# Link functions
# ---------------------------------------------------------------------------

def test_link_loss_values():
    assert link_loss(0.0) == 0.0
    assert abs(link_loss(700.0) - LOG2) < 1e-12
    assert abs(link_loss(math.log(3.0)) - math.log(1.5)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(min_value=-700, max_value=700))
def test_link_loss_bounded_and_monotone(z):
    val = link_loss(z)
    assert val <= LOG2
    assert val >= link_loss(z - 1.0)


def test_binary_entropy_gap_values():
    assert binary_entropy_gap(0.5) == 0.0
    assert abs(binary_entropy_gap(0.0) - LOG2) < 1e-12
    assert abs(binary_entropy_gap(1.0) - LOG2) < 1e-12
    expected = 0.75 * math.log(0.75) + 0.25 * math.log(0.25) + LOG2
    assert abs(binary_entropy_gap(0.75) - expected) < 1e-12
    assert abs(expected - 0.130812035941137) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(min_value=0.0, max_value=1.0))
def test_binary_entropy_gap_range(p):
    val = binary_entropy_gap(p)
    assert -1e-15 <= val <= LOG2 + 1e-15


def test_binary_entropy_gap_rejects_outside():
    with pytest.raises(ValueError):
        binary_entropy_gap(1.2)


# ---------------------------------------------------------------------------
# IPM
# ---------------------------------------------------------------------------

def test_ipm_identical_samples_zero():
    s = sample([0.3, 0.7], [[1.0, 2.0], [0.5, -1.0]])
    assert ipm(LinearBall(), s, s) == 0.0
    assert ipm(KernelSpec("rbf", 1.0), s, s) < 1e-12


def test_ipm_linear_mean_gap():
    s_plus = sample([1.0], [[0.05]])
    s_minus = sample([1.0], [[-0.05]])
    assert abs(ipm(LinearBall(), s_plus, s_minus) - 0.1) < 1e-15


def test_ipm_linear_unequal_totals_flagged_infinite():
    s_plus = sample([1.0], [[0.0]])
    s_minus = sample([0.5], [[0.0]])
    assert math.isinf(ipm(LinearBall(), s_plus, s_minus))


def test_ipm_rbf_singletons():
    h = 0.8
    s_plus = sample([1.0], [[0.0, 0.0]])
    s_minus = sample([1.0], [[h * math.sqrt(2.0), 0.0]])
    expected = math.sqrt(2.0 - 2.0 * math.exp(-1.0))
    assert abs(ipm(KernelSpec("rbf", h), s_plus, s_minus) - expected) < 1e-12


def test_ipm_rejects_neural_family():
    s = sample([1.0], [[0.0]])
    with pytest.raises(ValueError):
        ipm(NeuralClass(mlp(1, (2,))), s, s)


# ---------------------------------------------------------------------------
# Discriminative distance, closed-form families
# ---------------------------------------------------------------------------

def test_example_one_point_masses():
    s1 = sample([1.0], [[1.0]])
    s2 = sample([1.0], [[-1.0]])
    s3 = sample([0.5, 0.5], [[1.0], [-1.0]])
    d12 = dd(SignSlope(), s1, s2, 0.0)
    assert abs(d12.value - math.sqrt(2.0 * LOG2)) < 1e-9
    assert d12.saturated
    d13 = dd(SignSlope(), s1, s3, 0.0)
    assert abs(d13.value - math.sqrt(math.log(27.0 / 16.0) / 2.0)) < 1e-9
    # independent 1-D calculus oracle: the optimum sits at t = log 3
    assert abs(d13.discriminator["t"] - math.log(3.0)) < 1e-6
    d32 = dd(SignSlope(), s3, s2, 0.0)
    total = d13.value + d32.value
    assert abs(total - math.sqrt(2.0 * math.log(27.0 / 16.0))) < 1e-9
    assert total < d12.value  # the triangle inequality fails


def test_example_two_distance_stays_while_metric_vanishes():
    for delta in (1e-3, 1e-2, 0.1, 1.0):
        s_plus = sample([1.0], [[delta / 2.0]])
        s_minus = sample([1.0], [[-delta / 2.0]])
        assert abs(ipm(LinearBall(), s_plus, s_minus) - delta) < 1e-15
        val = dd(SignSlope(), s_plus, s_minus, 0.0).value
        assert abs(val - math.sqrt(2.0 * LOG2)) < 1e-9


def test_identical_samples_give_zero_distance():
    s = sample([0.4, 0.6], [[0.3, -1.0], [1.0, 0.2]])
    for psi in (0.0, 0.7, 3.0):
        assert dd(LinearBall(), s, s, psi).squared_value < 1e-12


def test_linear_distance_matches_generic_optimizer():
    from scipy.optimize import minimize
    cls, sp, sm = random_weighted_pair(RngStream(31), "linear")
    psi = 0.8
    ours = dd(cls, sp, sm, psi).squared_value
    x = np.vstack([sp.points, sm.points])
    w = np.concatenate([sp.weights, sm.weights])
    s = np.concatenate([np.ones(sp.size), -np.ones(sm.size)])

    def negobj(theta):
        z = s * (theta[0] + x @ theta[1:])
        return -(w @ link_loss(z) - 0.5 * psi * float(theta[1:] @ theta[1:]))

    best = min(minimize(negobj, np.zeros(x.shape[1] + 1), method="Nelder-Mead",
                        options={"maxiter": 5000, "xatol": 1e-10,
                                 "fatol": 1e-12}).fun,
               minimize(negobj, 0.1 * np.ones(x.shape[1] + 1),
                        method="Nelder-Mead",
                        options={"maxiter": 5000, "xatol": 1e-10,
                                 "fatol": 1e-12}).fun)
    assert abs(ours - (-best)) < 1e-6


def test_separable_linear_at_zero_psi_saturates():
    s_plus = sample([1.0, 1.0], [[1.0, 0.0], [2.0, 1.0]])
    s_minus = sample([0.5, 1.5], [[-1.0, 0.0], [-2.0, -1.0]])
    res = dd(LinearBall(), s_plus, s_minus, 0.0)
    assert res.saturated
    w_bar = s_plus.total() + s_minus.total()
    assert abs(res.squared_value - w_bar * LOG2) < 1e-12


def test_distance_range_bound():
    for k in range(25):
        family = "sign" if k % 2 == 0 else "linear"
        cls, sp, sm = random_weighted_pair(RngStream(500 + k), family)
        for psi in (0.0, 1.0):
            val = dd(cls, sp, sm, psi).squared_value
            assert -1e-12 <= val <= (sp.total() + sm.total()) * LOG2 + 1e-12


def test_scale_equivariance():
    cls, sp, sm = random_weighted_pair(RngStream(77), "linear")
    base = dd(cls, sp, sm, 0.6).squared_value
    scaled = dd(cls, sp.scaled(2.5), sm.scaled(2.5), 2.5 * 0.6).squared_value
    assert abs(scaled - 2.5 * base) < 1e-9


def test_neural_distance_is_nonnegative_estimate():
    gen = RngStream(99).generator()
    sp = sample(gen.uniform(0.2, 1, 4), gen.normal(size=(4, 2)))
    sm = sample(gen.uniform(0.2, 1, 4), gen.normal(size=(4, 2)) + 2.0)
    cls = NeuralClass(mlp(2, (2, 2)))
    cfg = NeuralDDConfig(epochs=20, batch_size=8, learning_rate=1e-2,
                         restarts=1, rng=RngStream(1))
    res = dd(cls, sp, sm, 0.1, cfg)
    assert res.squared_value >= 0.0
    assert res.squared_value <= (sp.total() + sm.total()) * LOG2 + 1e-9
    assert res.iterations > 0


# ---------------------------------------------------------------------------
# Dual verifier
# ---------------------------------------------------------------------------

def test_dual_identical_samples_zero():
    s = sample([0.5, 0.5], [[1.0], [-1.0]])
    assert dd_dual(SignSlope(), s, s, 1.0) < 1e-9


def test_dual_matches_primal_example_one():
    s1 = sample([1.0], [[1.0]])
    s2 = sample([1.0], [[-1.0]])
    primal = dd(SignSlope(), s1, s2, 1.0).squared_value
    dual = dd_dual(SignSlope(), s1, s2, 1.0)
    assert abs(primal - dual) < 1e-4


def test_dual_matches_primal_random_three_point():
    gen = RngStream(123).generator()
    sp = sample(gen.uniform(0.2, 1.0, 3), gen.normal(size=(3, 1)))
    sm = sample(gen.uniform(0.2, 1.0, 3), gen.normal(size=(3, 1)))
    primal = dd(SignSlope(), sp, sm, 0.5).squared_value
    dual = dd_dual(SignSlope(), sp, sm, 0.5)
    assert abs(primal - dual) < 1e-4


def test_dual_rejects_zero_psi_and_large_instances():
    s = sample([1.0], [[1.0]])
    with pytest.raises(ValueError):
        dd_dual(SignSlope(), s, s, 0.0)
    big = sample(np.ones(13), np.zeros((13, 1)))
    with pytest.raises(ValueError):
        dd_dual(SignSlope(), big, s, 1.0)


# ---------------------------------------------------------------------------
# Ratio bounds
# ---------------------------------------------------------------------------

def test_bound_check_example_one():
    s1 = sample([1.0], [[1.0]])
    s2 = sample([1.0], [[-1.0]])
    chk = bound_check(SignSlope(), s1, s2, 1.0)
    assert chk.lower <= chk.ipm_value <= chk.upper
    assert abs(chk.lower - 2.0 * math.sqrt(2.0) * chk.dd_value) < 1e-12


def test_bound_scaled_distance_converges_from_below():
    gen = RngStream(55).generator()
    sp = sample(gen.uniform(0.2, 1, 3), gen.uniform(-2, 2, size=(3, 1)))
    sm = sample(gen.uniform(0.2, 1, 4), gen.uniform(-2, 2, size=(4, 1)))
    metric = ipm(SignSlope(), sp, sm)
    m = class_bound(SignSlope(), sp, sm)
    w_bar = sp.total() + sm.total()
    prev = -1.0
    for psi in np.geomspace(1.0, 1e4, 12) * w_bar * m * m:
        scaled = 2.0 * math.sqrt(2.0 * psi) * dd(SignSlope(), sp, sm, psi).value
        assert scaled >= prev - 1e-8
        assert scaled <= metric + 1e-9
        prev = scaled
    assert abs(metric - prev) / metric < 0.01


def test_bound_check_identical_all_zero():
    s = sample([0.5, 0.5], [[1.0], [-1.0]])
    chk = bound_check(SignSlope(), s, s, 1.0)
    assert chk.ipm_value == 0.0
    assert chk.dd_value < 1e-9
    assert chk.lower < 1e-8 and chk.upper < 1e-8


def test_bound_violation_raises(monkeypatch):
    import covbalance.distances as distances
    s1 = sample([1.0], [[1.0]])
    s2 = sample([1.0], [[-1.0]])

    def broken(cls, sp, sm, psi, config=None, warm_start=None):
        from covbalance.distances import DDResult
        return DDResult(1e-12, 0.0, {"kind": "sign_slope", "t": 0.0}, True, 0)

    monkeypatch.setattr(distances, "dd", broken)
    with pytest.raises(BoundViolationError):
        distances.bound_check(SignSlope(), s1, s2, 1.0)
