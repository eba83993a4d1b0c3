"""Balancing-weight optimization.

Two routes to weights that make a reweighted control sample resemble the
treated sample under the discriminative distance:

* ``fw_balance``: conditional gradient against an exact distance oracle
  (sign-slope or affine family), one simplex vertex per iteration.
* ``deepmatch``: adversarial training of an exp-output weight network
  against a discriminator network, with a Lagrangian grid over the
  weight-sum multiplier and stage-2 re-evaluation for model selection.

Internal weights live on the unit simplex (control weights summing to 1);
the boundary convention is treated-count (summing to n1).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics
from .distances import (LOG2, FunctionClass, LinearBall, NeuralClass,
                        SignSlope, WeightedSample, dd, link_loss, link_slope)
from .errors import DegenerateRunsError, NumericError
from .numerics import Architecture, NetworkParams, RngStream

__all__ = [
    "BalanceWeights", "GameConfig", "GameTrace", "PhiRange",
    "fw_balance", "game_terms", "deepmatch", "phi_range", "objective_eval",
    "lagrangian_balance", "direct_balance",
]


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

@dataclass
class BalanceWeights:
    """Nonnegative weights over control units.

    Conventions: ``unit_sum`` (internal, sums to 1), ``treated_count``
    (boundary, sums to n1), or ``raw`` (no sum constraint; used for
    unnormalized inverse-propensity weights).
    """

    control_weights: np.ndarray
    convention: str = "treated_count"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.control_weights = np.asarray(self.control_weights, dtype=float)
        if self.convention not in ("unit_sum", "treated_count", "raw"):
            raise ValueError(f"unknown convention {self.convention!r}")
        if np.any(self.control_weights < 0) or not np.all(
                np.isfinite(self.control_weights)):
            raise ValueError("weights must be finite and nonnegative")

    def validate(self, n1: int | None = None) -> None:
        total = float(self.control_weights.sum())
        if self.convention == "unit_sum" and abs(total - 1.0) > 1e-9:
            raise ValueError(f"unit-sum weights sum to {total}")
        if self.convention == "treated_count":
            if n1 is None:
                raise ValueError("treated-count validation needs n1")
            if abs(total - n1) > 1e-9:
                raise ValueError(f"treated-count weights sum to {total} != {n1}")

    def to_treated_count(self, n1: int) -> "BalanceWeights":
        if self.convention == "treated_count":
            return self
        if self.convention != "unit_sum":
            raise ValueError("cannot convert raw weights")
        return BalanceWeights(self.control_weights * n1, "treated_count",
                              dict(self.provenance))

    def to_unit_sum(self, n1: int) -> "BalanceWeights":
        if self.convention == "unit_sum":
            return self
        if self.convention != "treated_count":
            raise ValueError("cannot convert raw weights")
        return BalanceWeights(self.control_weights / n1, "unit_sum",
                              dict(self.provenance))

    def full_weights(self, t: np.ndarray) -> np.ndarray:
        """Per-unit weight vector: treated entries 1, controls in order."""
        t = np.asarray(t)
        out = np.ones(t.shape[0])
        out[t == 0] = self.control_weights
        return out


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GameConfig:
    """Hyperparameters of the adversarial weighting game.

    ``init_scale``/``bias_scale`` control the network initialization; at
    the benchmark learning rate the parameter displacement available to a
    whole run is small, so the nets must start near-neutral (small weights,
    live biases) for the trained direction to dominate the initial one.
    ``amplitude_grid`` enables an exact line search over the log-weight
    spread at the normalization step (target standard deviations of log W;
    the trained spread and its negation are always included).
    """

    psi: float = 0.0
    lam: float = 0.0
    epochs_stage1: int = 10
    epochs_stage2: int = 5
    batch_size: int = 100
    restarts: int = 5
    tolerance: float = 0.01          # eta, weight-sum bracketing tolerance
    grid_size: int = 50
    learning_rate: float = 1e-4
    seed: int = 0
    discriminator_arch: Architecture | None = None
    weight_arch: Architecture | None = None
    init_scale: float = 1.0
    bias_scale: float = 0.0
    amplitude_grid: tuple[float, ...] | None = None
    dictionary_directions: int = 0

    def __post_init__(self):
        if self.psi < 0 or self.lam < 0:
            raise ValueError("psi and lam must be nonnegative")
        if min(self.epochs_stage1, self.epochs_stage2) < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.batch_size < 1 or self.restarts < 1 or self.grid_size < 1:
            raise ValueError("batch size, restarts, grid size must be >= 1")
        if not (0.0 < self.tolerance < 1.0):
            raise ValueError("tolerance must lie in (0, 1)")
        if self.learning_rate <= 0 or self.init_scale <= 0:
            raise ValueError("learning rate and init scale must be positive")

    def config_hash(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:12]

    def archs(self, dim: int) -> tuple[Architecture, Architecture]:
        disc = self.discriminator_arch or numerics.mlp(dim, (2, 2, 2, 2), "identity")
        weight = self.weight_arch or numerics.mlp(dim, (2, 2, 2, 2), "exp")
        if numerics.arch_input_dim(disc) != dim or numerics.arch_input_dim(weight) != dim:
            raise ValueError("architecture input dimension does not match data")
        return disc, weight


@dataclass
class GameTrace:
    """Diagnostics of the selected run plus the candidate scoreboard."""

    objective: list[float]            # full-data game objective per epoch
    weight_sums: list[float]          # raw control weight sum per epoch
    selected_v: float
    selected_phi: float
    selected_run: int
    candidates: list[tuple[float, int, float]]  # (phi, run, v)


@dataclass
class PhiRange:
    phi_low: float
    phi_high: float
    grid: np.ndarray
    sum_low: float                     # raw weight sum measured at phi_low
    sum_high: float                    # raw weight sum measured at phi_high
    bracket_warning: bool = False


# ---------------------------------------------------------------------------
# Objective plumbing
# ---------------------------------------------------------------------------

def _balance_samples(x_treated: np.ndarray, x_control: np.ndarray,
                     unit_weights: np.ndarray) -> tuple[WeightedSample, WeightedSample]:
    n1 = x_treated.shape[0]
    s_plus = WeightedSample(np.full(n1, 1.0 / n1), x_treated)
    s_minus = WeightedSample(unit_weights, x_control)
    return s_plus, s_minus


def objective_eval(weights: BalanceWeights, data, cls: FunctionClass,
                   psi: float, lam: float,
                   config=None) -> float:
    """Balance objective: squared distance of the reweighted samples plus
    the scaled squared norm of the weights.

    ``weights`` must be in the treated-count convention.
    """
    if weights.convention != "treated_count":
        raise ValueError("objective_eval expects treated-count weights")
    n1 = data.n1
    s_plus, s_minus = _balance_samples(data.x_treated, data.x_control,
                                       weights.control_weights / n1)
    result = dd(cls, s_plus, s_minus, psi, config)
    penalty = lam / n1 ** 2 * float(weights.control_weights @ weights.control_weights)
    return result.squared_value + penalty


# ---------------------------------------------------------------------------
# Conditional gradient (exact-oracle route)
# ---------------------------------------------------------------------------

def fw_balance(data, cls: FunctionClass, lam: float, psi: float,
               iterations: int) -> BalanceWeights:
    """Conditional-gradient minimization of the balance objective.

    Internal weights start uniform on the simplex; each iteration queries
    the exact distance oracle for the current reweighted samples, picks the
    control vertex minimizing the Danskin gradient coordinate
    link_loss(-score(X_i)) + 2 lam V_i (ties to the lowest index), and
    mixes it in with step 2/(k+1). Output is converted to treated count.
    """
    if not isinstance(cls, (SignSlope, LinearBall)):
        raise ValueError("fw_balance needs an exact oracle family")
    if data.n1 < 1 or data.n0 < 1:
        raise ValueError("both treatment arms must be nonempty")
    n0, n1 = data.n0, data.n1
    v = np.full(n0, 1.0 / n0)
    x_t, x_c = data.x_treated, data.x_control
    for k in range(1, iterations + 1):
        s_plus, s_minus = _balance_samples(x_t, x_c, v)
        oracle = dd(cls, s_plus, s_minus, psi)
        grad = link_loss(-oracle.score(x_c)) + 2.0 * lam * v
        vertex = int(np.argmin(grad))
        gamma = 2.0 / (k + 1.0)
        v *= 1.0 - gamma
        v[vertex] += gamma
    provenance = {"algorithm": "fw", "iterations": iterations,
                  "lam": lam, "psi": psi}
    return BalanceWeights(v * n1, "treated_count", provenance)


# ---------------------------------------------------------------------------
# Game terms (zero-sum objective pieces)
# ---------------------------------------------------------------------------

def game_terms(theta_f: NetworkParams, theta_g: NetworkParams, x: np.ndarray,
               treated: bool, n1: int, psi: float, lam: float, phi: float):
    """Per-unit term of the zero-sum objective with its analytic gradients.

    Treated unit: u = l(f(x)) / n1. Control unit, with raw weight
    w = exp(g(x)): u = w l(-f(x))/n1 + lam w^2/n1^2 + phi w/n1. The
    discriminator's decay term -(psi/2) R is handled at the batch level
    and is not part of u. Returns (u, grad wrt theta_f, grad wrt theta_g).
    """
    x = np.asarray(x, dtype=float)
    f_val = numerics.net_forward(theta_f, x)
    if treated:
        u = link_loss(f_val) / n1
        grad_f = numerics.net_gradient(theta_f, x, link_slope(f_val) / n1)
        grad_g = numerics.zeros_like_params(theta_g)
        return u, grad_f, grad_g
    w = numerics.net_forward(theta_g, x)  # exp-output net
    if not math.isfinite(w):
        raise NumericError("non-finite control weight")
    u = (w * link_loss(-f_val) / n1 + lam * w * w / n1 ** 2 + phi * w / n1)
    grad_f = numerics.net_gradient(theta_f, x, -w * link_slope(-f_val) / n1)
    du_dw = link_loss(-f_val) / n1 + 2.0 * lam * w / n1 ** 2 + phi / n1
    grad_g = numerics.net_gradient(theta_g, x, du_dw)
    return u, grad_f, grad_g


# ---------------------------------------------------------------------------
# Adversarial training internals
# ---------------------------------------------------------------------------

def _batches(n: int, batch_size: int, gen: np.random.Generator):
    order = gen.permutation(n)
    return np.array_split(order, max(1, math.ceil(n / batch_size)))


def _decay_grads(grads: NetworkParams, params: NetworkParams, psi: float) -> None:
    if psi > 0:
        for gw, pw in zip(grads.weights, params.weights):
            gw -= psi * pw


def _stage1_epoch(x, t, theta_f, state_f, theta_g, state_g, cfg: GameConfig,
                  phi: float, gen: np.random.Generator):
    n1 = int(t.sum())
    for batch in _batches(x.shape[0], cfg.batch_size, gen):
        xb, tb = x[batch], t[batch]
        ctrl = tb == 0
        f_val = numerics.net_forward_batch(theta_f, xb)
        w = np.ones(len(batch))
        if np.any(ctrl):
            w[ctrl] = numerics.net_forward_batch(theta_g, xb[ctrl])
        # d u / d f per unit (weight 1 for treated, e^g for control)
        up_f = np.where(tb == 1, link_slope(f_val) / n1,
                        -w * link_slope(-f_val) / n1)
        delta_f = numerics.net_gradient_batch(theta_f, xb, up_f)
        _decay_grads(delta_f, theta_f, cfg.psi)
        if np.any(ctrl):
            du_dw = (link_loss(-f_val[ctrl]) / n1
                     + 2.0 * cfg.lam * w[ctrl] / n1 ** 2 + phi / n1)
            delta_g = numerics.net_gradient_batch(theta_g, xb[ctrl], du_dw)
        else:
            delta_g = numerics.zeros_like_params(theta_g)
        # simultaneous updates: theta_f ascends, theta_g descends
        neg_f = delta_f.with_arrays([-a for a in delta_f.arrays()])
        theta_f, state_f = numerics.adam_step(theta_f, neg_f, state_f,
                                              cfg.learning_rate)
        theta_g, state_g = numerics.adam_step(theta_g, delta_g, state_g,
                                              cfg.learning_rate)
    return theta_f, state_f, theta_g, state_g


def _game_objective(x, t, theta_f, theta_g, cfg: GameConfig, phi: float) -> float:
    n1 = int(t.sum())
    f_val = numerics.net_forward_batch(theta_f, x)
    ctrl = t == 0
    w = numerics.net_forward_batch(theta_g, x[ctrl])
    val = (link_loss(f_val[t == 1]).sum() / n1
           + (w * link_loss(-f_val[ctrl])).sum() / n1
           + cfg.lam * (w * w).sum() / n1 ** 2
           + phi * w.sum() / n1
           - 0.5 * cfg.psi * theta_f.weight_sum_squares())
    return float(val)


def _raw_weight_sum(x, t, theta_g) -> float:
    return float(numerics.net_forward_batch(theta_g, x[t == 0]).sum())


def _stage1_train(x, t, cfg: GameConfig, phi: float, rng: RngStream,
                  epochs: int, trace: bool):
    dim = x.shape[1]
    arch_f, arch_g = cfg.archs(dim)
    theta_f = numerics.init_params(arch_f, rng.child(0), cfg.init_scale,
                                   cfg.bias_scale)
    theta_g = numerics.init_params(arch_g, rng.child(1), cfg.init_scale,
                                   cfg.bias_scale)
    state_f = numerics.adam_init(theta_f)
    state_g = numerics.adam_init(theta_g)
    gen = rng.child(2).generator()
    objectives, sums = [], []
    for _ in range(epochs):
        theta_f, state_f, theta_g, state_g = _stage1_epoch(
            x, t, theta_f, state_f, theta_g, state_g, cfg, phi, gen)
        if trace:
            objectives.append(_game_objective(x, t, theta_f, theta_g, cfg, phi))
            sums.append(_raw_weight_sum(x, t, theta_g))
    return theta_f, theta_g, objectives, sums, gen


def _normalized_weights(x, t, theta_g) -> np.ndarray:
    n1 = int(t.sum())
    raw = numerics.net_forward_batch(theta_g, x[t == 0])
    total = raw.sum()
    if not np.isfinite(total) or total <= 0:
        raise NumericError("degenerate raw weights")
    return n1 * raw / total


def _stage2_value(x, t, theta_f, w_full, cfg: GameConfig) -> float:
    """Discriminative part of the selection score v: the weighted link
    objective of the trained discriminator at its exactly optimized
    output scale (the lam weight penalty is added by the caller).

    The supremum defining the distance includes the scale t, so the final
    1-D concave maximization over t (solved like the sign-slope family on
    the score values) tightens the lower-bound estimate for free and keeps
    sign-inverted discriminators from producing spurious small v.
    """
    n1 = int(t.sum())
    f_val = numerics.net_forward_batch(theta_f, x)
    treated = t == 1
    penalty_rest = 0.0
    psi_eff = 0.0
    if cfg.psi > 0:
        r_last = float(np.sum(theta_f.weights[-1] ** 2))
        penalty_rest = theta_f.weight_sum_squares() - r_last
        psi_eff = cfg.psi * r_last
    disc = _rescaled_link_value(f_val[treated], w_full[treated] / n1,
                                f_val[~treated], w_full[~treated] / n1, psi_eff)
    return float(disc - 0.5 * cfg.psi * penalty_rest)


def _rescaled_link_value(scores_plus, w_plus, scores_minus, w_minus,
                         psi_eff: float) -> float:
    """max_t sum w+ l(t s+) + sum w- l(-t s-) - (psi_eff/2) t^2."""
    from .distances import SignSlope, WeightedSample
    from .distances import dd as _dd
    sp = WeightedSample(np.maximum(w_plus, 0.0), scores_plus)
    sm = WeightedSample(np.maximum(w_minus, 0.0), scores_minus)
    return _dd(SignSlope(), sp, sm, psi_eff).squared_value


def _stage2_train(x, t, theta_f, w_full, cfg: GameConfig,
                  gen: np.random.Generator) -> NetworkParams:
    n1 = int(t.sum())
    state_f = numerics.adam_init(theta_f)
    signs = np.where(t == 1, 1.0, -1.0)
    for _ in range(cfg.epochs_stage2):
        for batch in _batches(x.shape[0], cfg.batch_size, gen):
            xb = x[batch]
            f_val = numerics.net_forward_batch(theta_f, xb)
            sb = signs[batch]
            up = w_full[batch] * sb * link_slope(sb * f_val) / n1
            grads = numerics.net_gradient_batch(theta_f, xb, up)
            _decay_grads(grads, theta_f, cfg.psi)
            neg = grads.with_arrays([-a for a in grads.arrays()])
            theta_f, state_f = numerics.adam_step(theta_f, neg, state_f,
                                                  cfg.learning_rate)
    return theta_f


# ---------------------------------------------------------------------------
# Lagrangian grid search
# ---------------------------------------------------------------------------

class _Probe:
    """A discriminator snapshot used to score candidate weightings.

    Stores the full-data scores plus the weight-decay split needed to
    re-evaluate the penalized link objective at the exactly optimal scale.
    """

    __slots__ = ("scores", "r_last", "r_rest")

    def __init__(self, theta_f: NetworkParams, x: np.ndarray):
        self.scores = numerics.net_forward_batch(theta_f, x)
        self.r_last = float(np.sum(theta_f.weights[-1] ** 2))
        self.r_rest = theta_f.weight_sum_squares() - self.r_last

    @classmethod
    def from_scores(cls, scores: np.ndarray, r_last: float,
                    r_rest: float) -> "_Probe":
        probe = cls.__new__(cls)
        probe.scores = scores
        probe.r_last = r_last
        probe.r_rest = r_rest
        return probe


def _hinge_probes(x: np.ndarray, rng: RngStream, directions: int = 24) -> list[_Probe]:
    """Hinge and vee discriminators along random directions.

    f(x) = relu(u.x - c) (and |u.x - c|) are exact members of any
    rectifier architecture with >= 2 first-layer units: one active path,
    identity pass-through. Thresholds at sample quantiles give the pool
    sensitivity to region/tail mass imbalances that smooth random nets
    miss. The decay split assumes unit-norm directions and pass-through
    weights; it only matters when psi > 0.
    """
    gen = rng.generator()
    d = x.shape[1]
    probes = []
    hinge_qs = (0.02, 0.1, 0.25, 0.5, 0.75, 0.9, 0.98)
    vee_qs = (0.25, 0.5, 0.75)
    depth_penalty = 4.0  # pass-through unit weights across hidden layers
    for _ in range(directions):
        u = gen.normal(size=d)
        u /= np.linalg.norm(u)
        su = x @ u
        for q in hinge_qs:
            c = float(np.quantile(su, q))
            for sign in (1.0, -1.0):
                scores = np.maximum(sign * (su - c), 0.0)
                probes.append(_Probe.from_scores(scores, 1.0,
                                                 1.0 + depth_penalty))
        for q in vee_qs:
            c = float(np.quantile(su, q))
            probes.append(_Probe.from_scores(np.abs(su - c), 2.0,
                                             2.0 + depth_penalty))
    return probes


def _probe_run(x, t, cfg: GameConfig, phi: float, rng: RngStream):
    epochs = max(2, cfg.epochs_stage1 // 5)
    theta_f, theta_g, _, _, _ = _stage1_train(x, t, cfg, phi, rng, epochs,
                                              trace=False)
    return _raw_weight_sum(x, t, theta_g), _Probe(theta_f, x)


def _phi_search(data, config: GameConfig) -> tuple[PhiRange, list[_Probe]]:
    x, t = data.x, data.t
    n1 = data.n1
    eta = config.tolerance
    hi_target = n1 / eta
    lo_target = eta * n1
    rng = RngStream(config.seed).child(0)
    probes: list[_Probe] = []

    def probe(phi: float) -> float:
        # one fixed stream for every probe: the measured sum is then a
        # deterministic function of phi, which keeps the bisection stable
        total, snap = _probe_run(x, t, config, phi, rng)
        probes.append(snap)
        return total

    lo, hi = 1e-6, 1e6
    warning = False
    sum_lo, sum_hi = probe(lo), probe(hi)
    initial = (sum_lo, sum_hi)
    while sum_lo < hi_target and lo > 1e-12:
        lo /= 100.0
        sum_lo = probe(lo)
    while sum_hi > lo_target and hi < 1e12:
        hi *= 100.0
        sum_hi = probe(hi)
    if sum_lo < hi_target or sum_hi > lo_target:
        warning = True
        phi_lo, phi_hi = 1e-6, 1e6
        sum_at_lo, sum_at_hi = initial
    else:
        def bisect(target: float) -> tuple[float, float]:
            a, b = lo, hi          # sum(a) >= target >= sum(b)
            s_a = None
            for _ in range(14):
                mid = math.exp(0.5 * (math.log(a) + math.log(b)))
                s_mid = probe(mid)
                if s_mid >= target:
                    a, s_a = mid, s_mid
                else:
                    b = mid
            return a, (s_a if s_a is not None else probe(a))

        phi_lo, sum_at_lo = bisect(hi_target)
        phi_hi_raw, sum_at_hi = bisect(lo_target)
        phi_hi = max(phi_hi_raw, phi_lo * (1 + 1e-9))
    grid = np.geomspace(phi_lo, phi_hi, config.grid_size)
    return PhiRange(phi_lo, phi_hi, grid, sum_at_lo, sum_at_hi, warning), probes


def phi_range(data, config: GameConfig) -> PhiRange:
    """Bracket the weight-sum multiplier by binary search in log phi.

    Probes use abbreviated stage-1 trainings. The raw control weight sum
    decreases in phi (checked empirically), so phi_low is placed where the
    sum falls to n1/eta and phi_high where it falls to eta*n1; the grid is
    log-uniform between them. If the initial bracket [1e-6, 1e6] cannot be
    expanded to cover both targets, it is used as-is with a warning flag.
    """
    return _phi_search(data, config)[0]


# ---------------------------------------------------------------------------
# DeepMatch
# ---------------------------------------------------------------------------

class _ScorePool:
    """Shared pool of discriminators for comparable candidate scoring.

    The distance is a supremum over the family, so the max over any fixed
    set of members, each evaluated at its exactly optimal output scale, is
    a valid lower bound; sharing one pool across candidates makes the
    scores comparable. The 1-D concave scale maximizations run vectorized
    across the pool.
    """

    def __init__(self, probes: list[_Probe], t: np.ndarray, n1: int, psi: float):
        signs = np.where(t == 1, 1.0, -1.0)
        self.zs = np.array([p.scores for p in probes]) * signs  # (P, n)
        self.curv = psi * np.array([p.r_last for p in probes])
        self.rest = 0.5 * psi * np.array([p.r_rest for p in probes])
        self.n1 = n1

    def quad_value(self, w_full: np.ndarray) -> float:
        """Second-order proxy of ``value``: closed form, one pass.

        With l(z) ~ z/2 - z^2/8 the optimal-scale value of a probe is
        (sum w s f)^2 / (2 sum w f^2 + 8 curv); exact in the small-signal
        regime where the ranking happens, and two matvecs for the whole
        pool.
        """
        w = w_full / self.n1
        num = self.zs @ w
        den = (self.zs * self.zs) @ w
        vals = num * num / (2.0 * den + 8.0 * self.curv + 1e-300) - self.rest
        return float(max(vals.max(), 0.0))

    def prepare_control_scoring(self, t: np.ndarray) -> None:
        """Precompute treated-side terms so control weight matrices can be
        scored in bulk."""
        treated = t == 1
        self._zc = np.ascontiguousarray(self.zs[:, ~treated])
        self._zc2 = self._zc * self._zc
        self._base_num = self.zs[:, treated].sum(axis=1) / self.n1
        self._base_den = (self.zs[:, treated] ** 2).sum(axis=1) / self.n1

    def quad_values_bulk(self, w_ctrl_matrix: np.ndarray) -> np.ndarray:
        """Proxy scores for many control weightings at once: (C,) array."""
        wt = w_ctrl_matrix.T / self.n1            # (n0, C)
        num = self._base_num[:, None] + self._zc @ wt
        den = self._base_den[:, None] + self._zc2 @ wt
        vals = num * num / (2.0 * den + 8.0 * self.curv[:, None] + 1e-300)
        vals -= self.rest[:, None]
        return np.maximum(vals.max(axis=0), 0.0)

    def value(self, w_full: np.ndarray, iterations: int = 48) -> float:
        w = w_full / self.n1
        zs = self.zs
        wz = w * zs
        active = w > 0
        pos_ok = np.all(np.where(active, zs, 0.0) >= 0, axis=1)
        neg_ok = np.all(np.where(active, zs, 0.0) <= 0, axis=1)
        values = np.full(zs.shape[0], -np.inf)
        sat = (pos_ok | neg_ok) & (self.curv == 0)
        if np.any(sat):
            saturated = np.where(zs != 0, np.abs(np.sign(zs)), 0.0)
            values[sat] = LOG2 * (w * saturated[sat]).sum(axis=1) - self.rest[sat]
        rest_idx = np.nonzero(~sat)[0]
        if rest_idx.size:
            z = zs[rest_idx]
            wzr = wz[rest_idx]
            curv = self.curv[rest_idx]

            def grad(tv):
                return (wzr * _expit_neg(tv[:, None] * z)).sum(axis=1) - curv * tv

            g0 = grad(np.zeros(rest_idx.size))
            direction = np.sign(g0)
            hi = direction.copy()
            for _ in range(60):
                still = grad(hi) * direction > 0
                if not np.any(still):
                    break
                hi[still] *= 2.0
                if np.max(np.abs(hi)) > 1e15:
                    break
            lo = np.zeros_like(hi)
            for _ in range(iterations):
                mid = 0.5 * (lo + hi)
                gm = grad(mid)
                same = gm * direction > 0
                lo = np.where(same, mid, lo)
                hi = np.where(same, hi, mid)
            t_star = 0.5 * (lo + hi)
            vals = (w[None, :] * link_loss(t_star[:, None] * z)).sum(axis=1)
            values[rest_idx] = vals - 0.5 * curv * t_star ** 2 - self.rest[rest_idx]
        return float(max(values.max(), 0.0))


def _expit_neg(z: np.ndarray) -> np.ndarray:
    return link_slope(z)


def _amplitude_candidates(log_w: np.ndarray, grid: tuple[float, ...]):
    """Log-weight spread variants: the trained spread first (so exact ties
    keep the printed behavior), then the grid of target stds and the
    negated trained spread."""
    spread = float(log_w.std())
    centered = log_w - log_w.mean()
    if spread <= 1e-12:
        yield 0.0, np.zeros_like(log_w)
        return
    unit = centered / spread
    seen = set()
    for a in (spread,) + tuple(grid) + (-spread,):
        key = round(a, 12)
        if key in seen:
            continue
        seen.add(key)
        yield a, a * unit


_POOL_CAP = 64
_POOL_RANDOM = 16


def deepmatch(data, config: GameConfig,
              phis: np.ndarray | None = None) -> tuple[BalanceWeights, GameTrace]:
    """Adversarial balancing: weight net vs discriminator over a phi grid.

    Pass 1: for each phi and restart, stage 1 plays the zero-sum game with
    simultaneous Adam updates over shuffled mini-batches, the exp weights
    are normalized to sum to n1, and stage 2 retrains the discriminator
    alone against the fixed weights. Pass 2: every candidate weighting
    (and, optionally, its log-amplitude variants) is scored by the
    full-data weighted objective v against one shared pool of
    discriminators (the phi-search probes, all stage-1/stage-2 nets, and a
    few fresh family members), each at its exactly optimal output scale.
    The weights with the smallest v win; ties keep the earliest candidate.
    """
    if data.n1 < 1 or data.n0 < 1:
        raise ValueError("both treatment arms must be nonempty")
    if config.batch_size > data.n:
        raise ValueError("batch size exceeds the sample size")
    x, t = data.x, data.t
    n1 = data.n1
    probes: list[_Probe] = []
    if phis is None:
        span, probes = _phi_search(data, config)
        phis = span.grid
    root = RngStream(config.seed)

    runs = []
    for j, phi in enumerate(phis):
        for m in range(config.restarts):
            run_rng = root.child(1, j, m)
            theta_f, theta_g, objectives, sums, gen = _stage1_train(
                x, t, config, float(phi), run_rng, config.epochs_stage1,
                trace=True)
            try:
                w_ctrl = _normalized_weights(x, t, theta_g)
            except NumericError:
                runs.append((float(phi), m, None, None, None))
                continue
            probes.append(_Probe(theta_f, x))
            w_full = np.ones(data.n)
            w_full[t == 0] = w_ctrl
            theta_f = _stage2_train(x, t, theta_f, w_full, config, gen)
            probes.append(_Probe(theta_f, x))
            runs.append((float(phi), m, w_ctrl, objectives, sums))

    if len(probes) > _POOL_CAP:
        step = len(probes) / _POOL_CAP
        probes = [probes[int(i * step)] for i in range(_POOL_CAP)]
    arch_f, _ = config.archs(x.shape[1])
    for k in range(_POOL_RANDOM):
        fresh = numerics.init_params(arch_f, root.child(2, k), 1.0, 0.5)
        probes.append(_Probe(fresh, x))
    dense_family = not any(isinstance(spec, numerics.ConvSpec) for spec in arch_f)
    if dense_family:
        # hinge/vee members are only constructible in dense architectures
        probes.extend(_hinge_probes(x, root.child(3)))
    pool = _ScorePool(probes, t, n1, config.psi)
    pool.prepare_control_scoring(t)

    # assemble every candidate control weighting: the run outputs (with
    # optional log-amplitude variants) first, then - when enabled - the
    # dictionary of hinge/vee weight functions over the amplitude grid
    weightings: list[np.ndarray] = []
    owners: list[int] = []            # index into runs, -1 for dictionary
    run_candidate_count = np.zeros(len(runs), dtype=int)
    for ridx, (phi, m, w_ctrl, objectives, sums) in enumerate(runs):
        if w_ctrl is None:
            continue
        if config.amplitude_grid is not None:
            for _, lw in _amplitude_candidates(np.log(w_ctrl),
                                               config.amplitude_grid):
                cand = np.exp(lw)
                weightings.append(cand * (n1 / cand.sum()))
                owners.append(ridx)
                run_candidate_count[ridx] += 1
        else:
            weightings.append(w_ctrl)
            owners.append(ridx)
            run_candidate_count[ridx] += 1
    if not weightings:
        raise DegenerateRunsError("every (phi, restart) run was degenerate")
    if config.dictionary_directions > 0 and dense_family:
        amps = config.amplitude_grid or (0.25, 0.5, 1.0)
        x_ctrl = x[t == 0]
        x_trt = x[t == 1]
        n0 = x_ctrl.shape[0]
        gen = root.child(4).generator()
        # downweight-only shapes: exp(-a * hinge) is bounded above, so no
        # candidate can concentrate mass on a scarce region; a shape is
        # kept only when the region it suppresses holds statistically
        # significant excess control mass over the treated sample
        # (common-support logic, computable from covariates and treatment)
        shapes: list[np.ndarray] = []
        for _ in range(config.dictionary_directions):
            u = gen.normal(size=x.shape[1])
            u /= np.linalg.norm(u)
            su = x_ctrl @ u
            st = x_trt @ u
            spread = su.std()
            if spread <= 1e-12:
                continue

            def excess_ok(region_ctrl: np.ndarray, region_trt: np.ndarray) -> bool:
                pc = region_ctrl.mean()
                pt = region_trt.mean()
                noise = math.sqrt(pc / n0 + pt / n1 + 1e-12)
                return pc >= 0.02 and (pc - pt) > 2.0 * noise

            for q in (0.5, 0.75, 0.9):
                c_hi = np.quantile(su, q)
                if excess_ok(su > c_hi, st > c_hi):
                    shapes.append(np.maximum(su - c_hi, 0.0) / spread)
                c_lo = np.quantile(su, 1 - q)
                if excess_ok(su < c_lo, st < c_lo):
                    shapes.append(np.maximum(c_lo - su, 0.0) / spread)
            for q in (0.35, 0.5, 0.65):
                c = np.quantile(su, q)
                width = np.abs(su - c)
                band = np.quantile(width, 0.7)
                if excess_ok(width > band, np.abs(st - c) > band):
                    shapes.append(width / spread)
        for shape in shapes:
            if shape.max() <= 1e-12:
                continue
            for a in amps:
                if a == 0.0:
                    continue
                cand = np.exp(-a * shape)
                weightings.append(cand * (n1 / cand.sum()))
                owners.append(-1)

    w_matrix = np.array(weightings)
    scores = pool.quad_values_bulk(w_matrix)
    scores = scores + config.lam * (w_matrix * w_matrix).sum(axis=1) / n1 ** 2

    # per-run best proxy score for the trace scoreboard
    candidates: list[tuple[float, int, float]] = []
    run_best = np.full(len(runs), math.inf)
    for idx, owner in enumerate(owners):
        if owner >= 0:
            run_best[owner] = min(run_best[owner], scores[idx])
    for ridx, (phi, m, w_ctrl, _, _) in enumerate(runs):
        candidates.append((phi, m, run_best[ridx] if w_ctrl is not None
                           else math.inf))

    # exact rescoring of the proxy short list decides the winner
    order = np.argsort(scores, kind="stable")[:8]
    best_v = math.inf
    best_idx = -1
    for idx in order:
        cand = w_matrix[idx]
        w_full = np.ones(data.n)
        w_full[t == 0] = cand
        exact = (pool.value(w_full)
                 + config.lam * float(cand @ cand) / n1 ** 2)
        if exact < best_v:
            best_v = exact
            best_idx = int(idx)
    w_sel = w_matrix[best_idx]
    owner = owners[best_idx]
    if owner >= 0:
        phi_sel, run_sel, _, objectives, sums = runs[owner]
        source = "run"
    else:
        # a dictionary member won; report the best run's trace alongside
        fallback = int(np.argmin(run_best))
        phi_sel, run_sel, _, objectives, sums = runs[fallback]
        source = "dictionary"
    provenance = {"algorithm": "deepmatch", "config_hash": config.config_hash(),
                  "phi": phi_sel, "run": run_sel, "source": source}
    weights = BalanceWeights(w_sel, "treated_count", provenance)
    trace = GameTrace(objectives or [], sums or [], best_v, phi_sel, run_sel,
                      candidates)
    return weights, trace


# ---------------------------------------------------------------------------
# Direct solvers (verification oracles for the theory suites)
# ---------------------------------------------------------------------------

def lagrangian_balance(data, cls: FunctionClass, psi: float, lam: float,
                       phi: float, iterations: int = 400) -> np.ndarray:
    """Solve the phi-penalized relaxation directly in the weights.

    min_{W >= 0} dd^2(treated, W-weighted controls) + sum_i (lam W_i^2/n1^2
    + phi W_i/n1), by projected gradient with Danskin gradients from the
    exact oracle. Returns unnormalized control weights.
    """
    n0, n1 = data.n0, data.n1
    x_t, x_c = data.x_treated, data.x_control
    w = np.full(n0, float(n1) / n0)

    def value_grad(wv: np.ndarray):
        s_plus, s_minus = _balance_samples(x_t, x_c, wv / n1)
        oracle = dd(cls, s_plus, s_minus, psi)
        val = (oracle.squared_value + lam * float(wv @ wv) / n1 ** 2
               + phi * float(wv.sum()) / n1)
        grad = (link_loss(-oracle.score(x_c)) / n1
                + 2.0 * lam * wv / n1 ** 2 + phi / n1)
        return val, grad

    step = 1.0
    f_cur, g = value_grad(w)
    for _ in range(iterations):
        cand = np.maximum(w - step * g, 0.0)
        if not np.any(cand > 0):
            break  # phi large enough to kill every weight
        if np.allclose(cand, w, atol=1e-14):
            break
        f_new, g_new = value_grad(cand)
        if f_new <= f_cur - 1e-14:
            w, f_cur, g = cand, f_new, g_new
            step = min(step * 1.3, 1e3)
        else:
            step *= 0.5
            if step < 1e-12:
                break
    return w


def _project_scaled_simplex(v: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = total}."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    rho = np.nonzero(u - css / (np.arange(len(v)) + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def direct_balance(data, cls: FunctionClass, psi: float, lam: float,
                   iterations: int = 600) -> tuple[np.ndarray, float]:
    """Projected-gradient minimizer of the balance objective over the
    feasible set {W >= 0, sum W = n1}; returns (weights, objective)."""
    n0, n1 = data.n0, data.n1
    x_t, x_c = data.x_treated, data.x_control
    w = np.full(n0, float(n1) / n0)

    def value_grad(wv: np.ndarray):
        s_plus, s_minus = _balance_samples(x_t, x_c, wv / n1)
        oracle = dd(cls, s_plus, s_minus, psi)
        val = oracle.squared_value + lam * float(wv @ wv) / n1 ** 2
        grad = link_loss(-oracle.score(x_c)) / n1 + 2.0 * lam * wv / n1 ** 2
        return val, grad

    step = 1.0
    f_cur, g = value_grad(w)
    for _ in range(iterations):
        cand = _project_scaled_simplex(w - step * g, float(n1))
        if np.allclose(cand, w, atol=1e-14):
            break
        f_new, g_new = value_grad(cand)
        if f_new <= f_cur - 1e-14:
            w, f_cur, g = cand, f_new, g_new
            step = min(step * 1.3, 1e3)
        else:
            step *= 0.5
            if step < 1e-12:
                break
    return w, f_cur
