"""Executable theorem-property suites.

Each suite checks one proved statement about the discriminative distance or
the balancing objective on randomized instances and returns its worst
margin. The command-line ``verify`` subcommand runs them all; the
acceptance tests assert on the same functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics
from .balancing import (BalanceWeights, GameConfig, direct_balance, fw_balance,
                        game_terms, lagrangian_balance, objective_eval)
from .distances import (LOG2, LinearBall, SignSlope, WeightedSample,
                        bound_check, class_bound, dd, dd_dual, ipm, link_loss,
                        link_slope)
from .errors import BoundViolationError
from .estimators import Dataset
from .numerics import RngStream, finite_difference_check, mlp


@dataclass
class SuiteResult:
    name: str
    passed: bool
    margin: float
    detail: str

    def line(self) -> str:
        flag = "pass" if self.passed else "FAIL"
        return f"[{flag}] {self.name}: margin {self.margin:.3g} ({self.detail})"


# ---------------------------------------------------------------------------
# Instance generators
# ---------------------------------------------------------------------------

def random_weighted_pair(rng: RngStream, family: str, max_points: int = 5,
                         max_dim: int = 3):
    """A random weighted-sample pair; equal totals for the affine family."""
    gen = rng.generator()
    n_plus = int(gen.integers(1, max_points + 1))
    n_minus = int(gen.integers(1, max_points + 1))
    if family == "sign":
        dim = 1
        cls = SignSlope()
    else:
        dim = int(gen.integers(1, max_dim + 1))
        cls = LinearBall()
    wp = gen.uniform(0.1, 1.0, n_plus)
    wm = gen.uniform(0.1, 1.0, n_minus)
    if family != "sign":
        wm *= wp.sum() / wm.sum()
    sp = WeightedSample(wp, gen.uniform(-2.0, 2.0, size=(n_plus, dim)))
    sm = WeightedSample(wm, gen.uniform(-2.0, 2.0, size=(n_minus, dim)))
    return cls, sp, sm


def random_balance_instance(rng: RngStream, n1: int = 4, n0: int = 5,
                            dim: int = 2) -> Dataset:
    gen = rng.generator()
    x = gen.normal(size=(n1 + n0, dim))
    t = np.array([1] * n1 + [0] * n0)
    return Dataset(x, t)


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def suite_range(instances: int = 200, seed: int = 101) -> SuiteResult:
    """Squared distance lies in [0, total weight * log 2] on every input."""
    worst = math.inf
    rng = RngStream(seed)
    for k in range(instances):
        family = "sign" if k % 2 == 0 else "linear"
        cls, sp, sm = random_weighted_pair(rng.child(k), family)
        psi = [0.0, 0.5, 5.0][k % 3]
        val = dd(cls, sp, sm, psi).squared_value
        cap = (sp.total() + sm.total()) * LOG2
        worst = min(worst, val, cap - val)
    return SuiteResult("range of squared distance", worst >= -1e-12, worst,
                       f"{instances} instances, both families")


def suite_zero_equivalence(instances: int = 60, seed: int = 202,
                           tol: float = 1e-8) -> SuiteResult:
    """Distance vanishes exactly when the metric does, and conversely."""
    worst = 0.0
    rng = RngStream(seed)
    for k in range(instances):
        gen = rng.child(k).generator()
        family = "sign" if k % 2 == 0 else "linear"
        dim = 1 if family == "sign" else 2
        cls = SignSlope() if family == "sign" else LinearBall()
        pts = gen.uniform(-2, 2, size=(3, dim))
        w = gen.uniform(0.2, 1.0, 3)
        # same distribution split differently: metric is exactly zero
        sp = WeightedSample(np.concatenate([w, w]), np.vstack([pts, pts]))
        sm = WeightedSample(2.0 * w, pts)
        assert ipm(cls, sp, sm) < 1e-12
        worst = max(worst, dd(cls, sp, sm, 0.5).squared_value)
        # generic pair: metric positive implies distance positive
        cls2, sp2, sm2 = random_weighted_pair(rng.child(1000 + k), family)
        if ipm(cls2, sp2, sm2) > 1e-3:
            if dd(cls2, sp2, sm2, 0.5).squared_value < 1e-12:
                worst = max(worst, 1.0)
    return SuiteResult("zero equivalence with the metric", worst <= tol, worst,
                       f"{instances} paired checks at tolerance {tol}")


def suite_sandwich(instances: int = 1000, seed: int = 303,
                   tol: float = 1e-6) -> SuiteResult:
    """Two-sided ratio bound between the metric and the distance."""
    worst = math.inf
    rng = RngStream(seed)
    violations = 0
    for k in range(instances):
        family = "sign" if k % 2 == 0 else "linear"
        cls, sp, sm = random_weighted_pair(rng.child(k), family,
                                           max_points=5, max_dim=3)
        for psi in (0.1, 1.0, 10.0):
            try:
                chk = bound_check(cls, sp, sm, psi)
                worst = min(worst, chk.slack)
            except BoundViolationError:
                violations += 1
    return SuiteResult("metric/distance sandwich", violations == 0
                       and worst >= -tol, worst,
                       f"{instances} instances x 3 psi, {violations} violations")


def suite_scaling_limit(instances: int = 20, seed: int = 404,
                        step_tol: float = 1e-8,
                        gap_frac: float = 0.01) -> SuiteResult:
    """The scaled distance rises to the metric from below as psi grows."""
    rng = RngStream(seed)
    worst_gap = 0.0
    worst_step = 0.0
    for k in range(instances):
        family = "sign" if k % 2 == 0 else "linear"
        cls, sp, sm = random_weighted_pair(rng.child(k), family)
        metric = ipm(cls, sp, sm)
        if metric < 0.05:
            continue
        m = class_bound(cls, sp, sm)
        w_bar = sp.total() + sm.total()
        prev = -math.inf
        scaled = 0.0
        for psi in np.geomspace(1e-2 * w_bar * m * m, 1e4 * w_bar * m * m, 25):
            scaled = 2.0 * math.sqrt(2.0 * psi) * dd(cls, sp, sm, psi).value
            worst_step = max(worst_step, prev - scaled)
            prev = scaled
            if scaled > metric + 1e-9:
                worst_gap = max(worst_gap, scaled - metric)
        worst_gap = max(worst_gap, abs(metric - scaled) / metric)
    passed = worst_step <= step_tol and worst_gap <= gap_frac
    return SuiteResult("scaled distance converges to the metric", passed,
                       max(worst_step, worst_gap),
                       f"{instances} instances, final gap and monotone steps")


def suite_dual_gap(instances: int = 50, seed: int = 505,
                   tol: float = 1e-4) -> SuiteResult:
    """Primal value equals the convex dual at verifier scale."""
    rng = RngStream(seed)
    worst = 0.0
    count = 0
    k = 0
    while count < instances:
        family = "sign" if k % 2 == 0 else "linear"
        cls, sp, sm = random_weighted_pair(rng.child(k), family, max_points=5)
        k += 1
        if sp.size + sm.size > 12:
            continue
        psi = (0.5, 1.0, 5.0)[count % 3]
        primal = dd(cls, sp, sm, psi).squared_value
        dual = dd_dual(cls, sp, sm, psi)
        worst = max(worst, abs(primal - dual))
        count += 1
    return SuiteResult("primal-dual agreement", worst <= tol, worst,
                       f"{instances} instances, psi in (0.5, 1, 5)")


def suite_convexity(pairs: int = 200, seed: int = 606,
                    tol: float = 1e-8) -> SuiteResult:
    """Midpoint inequality of the balance objective in the weights."""
    rng = RngStream(seed)
    worst = 0.0
    for k in range(pairs):
        gen = rng.child(k).generator()
        data = random_balance_instance(rng.child(10000 + k), n1=3, n0=4)
        psi = (0.0, 0.5)[k % 2]
        lam = float(gen.uniform(0.0, 1.0))
        w1 = gen.dirichlet(np.ones(data.n0)) * data.n1
        w2 = gen.dirichlet(np.ones(data.n0)) * data.n1
        mid = 0.5 * (w1 + w2)
        f1 = objective_eval(BalanceWeights(w1, "treated_count"), data,
                            LinearBall(), psi, lam)
        f2 = objective_eval(BalanceWeights(w2, "treated_count"), data,
                            LinearBall(), psi, lam)
        fm = objective_eval(BalanceWeights(mid, "treated_count"), data,
                            LinearBall(), psi, lam)
        worst = max(worst, fm - 0.5 * (f1 + f2))
    return SuiteResult("balance objective convexity", worst <= tol, worst,
                       f"{pairs} midpoint checks")


def suite_fw_optimality(instances: int = 20, seed: int = 707,
                        tol: float = 1e-3,
                        iterations: int = 800) -> SuiteResult:
    """Conditional gradient reaches the simplex-grid minimum."""
    rng = RngStream(seed)
    worst = -math.inf
    grid = _simplex_grid_3(0.01)
    for k in range(instances):
        gen = rng.child(k).generator()
        family = "sign" if k % 2 == 0 else "linear"
        dim = 1 if family == "sign" else 2
        cls = SignSlope() if family == "sign" else LinearBall()
        n1 = int(gen.integers(2, 5))
        x = np.vstack([gen.normal(size=(n1, dim)), gen.normal(size=(3, dim))])
        data = Dataset(x, np.array([1] * n1 + [0] * 3))
        lam = float(gen.uniform(0.5, 1.5))
        psi = (0.0, 0.3)[k % 2]
        w = fw_balance(data, cls, lam, psi, iterations)
        achieved = objective_eval(w, data, cls, psi, lam)
        best = math.inf
        warm = None
        for v in grid:
            bw = BalanceWeights(v * n1, "treated_count")
            s_plus = WeightedSample(np.full(n1, 1.0 / n1), data.x_treated)
            s_minus = WeightedSample(v, data.x_control)
            res = dd(cls, s_plus, s_minus, psi, warm_start=warm)
            if family != "sign":
                warm = np.concatenate([[res.discriminator["intercept"]],
                                       res.discriminator["slope"]])
            best = min(best, res.squared_value + lam * float(v @ v))
        worst = max(worst, achieved - best)
    return SuiteResult("conditional-gradient optimality", worst <= tol, worst,
                       f"{instances} instances vs 0.01-spaced simplex grid")


def _simplex_grid_3(step: float) -> list[np.ndarray]:
    k = round(1.0 / step)
    out = []
    for i in range(k + 1):
        for j in range(k + 1 - i):
            out.append(np.array([i, j, k - i - j], dtype=float) / k)
    return out


def suite_lagrangian_consistency(seed: int = 808,
                                 tol: float = 1e-3) -> SuiteResult:
    """The best normalized penalized solution matches the direct minimizer.

    The multiplier of the equality weight-sum constraint is free-signed, so
    the grid runs through negative values and zero as well.
    """
    data = random_balance_instance(RngStream(seed), n1=3, n0=4, dim=2)
    cls = LinearBall()
    psi, lam = 0.5, 0.5
    _, direct_obj = direct_balance(data, cls, psi, lam, iterations=1500)
    best = math.inf
    half = np.geomspace(1e-3, 10.0, 30)
    for phi in np.concatenate([-half[::-1], [0.0], half]):
        w = lagrangian_balance(data, cls, psi, lam, float(phi), iterations=800)
        total = w.sum()
        if total <= 1e-12:
            continue
        w_norm = w * (data.n1 / total)
        obj = objective_eval(BalanceWeights(w_norm, "treated_count"), data,
                             cls, psi, lam)
        best = min(best, obj)
    gap = abs(best - direct_obj)
    return SuiteResult("penalized-grid consistency", gap <= tol, gap,
                       "dense signed multiplier grid vs direct minimizer")


def suite_gradients(configs: int = 50, seed: int = 909,
                    tol: float = 1e-5) -> SuiteResult:
    """Analytic game gradients match central finite differences."""
    rng = RngStream(seed)
    worst = 0.0
    done = 0
    attempt = 0
    while done < configs and attempt < configs * 20:
        attempt += 1
        sub = rng.child(attempt)
        gen = sub.child(0).generator()
        dim = int(gen.integers(2, 7))
        arch_f = mlp(dim, (2, 2), "identity")
        arch_g = mlp(dim, (2, 2), "exp")
        theta_f = numerics.init_params(arch_f, sub.child(1), 1.0, 0.3)
        theta_g = numerics.init_params(arch_g, sub.child(2), 1.0, 0.3)
        n = int(gen.integers(6, 14))
        x = gen.uniform(-2, 2, size=(n, dim))
        t = (gen.uniform(size=n) < 0.5).astype(int)
        if t.sum() == 0 or t.sum() == n:
            continue
        if _near_kink(theta_f, x) or _near_kink(theta_g, x):
            continue
        n1 = int(t.sum())
        psi, lam, phi = 0.3, 0.7, 0.2
        w_full = np.ones(n)
        w_full[t == 0] = gen.uniform(0.5, 2.0, size=n - n1)

        def game_loss(params, which):
            tf = params if which == "f" else theta_f
            tg = params if which == "g" else theta_g
            total = 0.0
            grads = numerics.zeros_like_params(params)
            for i in range(n):
                u, gf, gg = game_terms(tf, tg, x[i], bool(t[i] == 1),
                                       n1, psi, lam, phi)
                total += u
                part = gf if which == "f" else gg
                for acc, piece in zip(grads.arrays(), part.arrays()):
                    acc += piece
            if which == "f":
                total -= 0.5 * psi * tf.weight_sum_squares()
                for gw, pw in zip(grads.weights, tf.weights):
                    gw -= psi * pw
            return total, grads

        rep_f = finite_difference_check(lambda p: game_loss(p, "f"), theta_f)
        rep_g = finite_difference_check(lambda p: game_loss(p, "g"), theta_g)

        def stage2_loss(params):
            scores = numerics.net_forward_batch(params, x)
            signs = np.where(t == 1, 1.0, -1.0)
            val = float((w_full * link_loss(signs * scores)).sum() / n1
                        - 0.5 * psi * params.weight_sum_squares())
            up = w_full * signs * link_slope(signs * scores) / n1
            grads = numerics.net_gradient_batch(params, x, up)
            for gw, pw in zip(grads.weights, params.weights):
                gw -= psi * pw
            return val, grads

        rep_s2 = finite_difference_check(stage2_loss, theta_f)
        worst = max(worst, rep_f.max_rel_error, rep_g.max_rel_error,
                    rep_s2.max_rel_error)
        done += 1
    return SuiteResult("game gradient checks", worst < tol and done == configs,
                       worst, f"{done} random configurations")


def _near_kink(params, x, margin: float = 1e-3) -> bool:
    """True when any rectifier pre-activation sits within the kink margin."""
    a = x
    for spec, w, b in zip(params.arch, params.weights, params.biases):
        z = a @ w + b
        if spec.activation == "relu" and np.any(np.abs(z) < margin):
            return True
        a = numerics._act(z, spec.activation)
    return False


def suite_scale_equivariance(instances: int = 40, seed: int = 1010,
                             tol: float = 1e-9) -> SuiteResult:
    """Scaling all weights by c (and psi by c) scales the squared value by c."""
    rng = RngStream(seed)
    worst = 0.0
    for k in range(instances):
        family = "sign" if k % 2 == 0 else "linear"
        cls, sp, sm = random_weighted_pair(rng.child(k), family)
        gen = rng.child(5000 + k).generator()
        c = float(gen.uniform(0.3, 3.0))
        psi = float(gen.uniform(0.1, 2.0))
        base = dd(cls, sp, sm, psi).squared_value
        scaled = dd(cls, sp.scaled(c), sm.scaled(c), c * psi).squared_value
        worst = max(worst, abs(scaled - c * base) / max(1.0, abs(c * base)))
    return SuiteResult("weight-scale equivariance", worst <= tol, worst,
                       f"{instances} instances")


ALL_SUITES = (
    suite_range,
    suite_zero_equivalence,
    suite_sandwich,
    suite_scaling_limit,
    suite_dual_gap,
    suite_convexity,
    suite_fw_optimality,
    suite_lagrangian_consistency,
    suite_gradients,
    suite_scale_equivariance,
)


def run_all(quick: bool = False) -> list[SuiteResult]:
    """Run every suite; ``quick`` shrinks instance counts for smoke use."""
    if not quick:
        return [suite() for suite in ALL_SUITES]
    return [
        suite_range(instances=40),
        suite_zero_equivalence(instances=10),
        suite_sandwich(instances=60),
        suite_scaling_limit(instances=4),
        suite_dual_gap(instances=6),
        suite_convexity(pairs=20),
        suite_fw_optimality(instances=2, iterations=400),
        suite_lagrangian_consistency(),
        suite_gradients(configs=6),
        suite_scale_equivariance(instances=8),
    ]
