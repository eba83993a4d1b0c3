"""Discriminator families, integral probability metrics, and the
discriminative distance between weighted samples.

The squared discriminative distance of two weighted samples S+ and S- with
regularization psi >= 0 over a family F is

    sup_{f in F, t in R}  sum_i w_i^+ l(t f(x_i^+)) + sum_i w_i^- l(-t f(x_i^-))
                          - (psi/2) t^2,

with the relative log-likelihood link l(z) = log(sigmoid(z)) + log 2. Exact
solvers are provided for the sign-slope and affine-unit-ball families, a
stochastic lower-bound estimate for neural discriminators, and the convex
dual as an independent numeric verifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit

from . import numerics
from .errors import BoundViolationError, NumericError
from .numerics import Architecture, NetworkParams, RngStream

LOG2 = math.log(2.0)
EQUAL_TOTAL_TOL = 1e-9


# ---------------------------------------------------------------------------
# Link functions
# ---------------------------------------------------------------------------

def link_loss(z):
    """l(z) = log(sigmoid(z)) + log 2, elementwise and overflow-safe.

    Ranges over (-inf, log 2] with l(0) = 0.
    """
    z = np.asarray(z, dtype=float)
    out = LOG2 - np.logaddexp(0.0, -z)
    return float(out) if out.ndim == 0 else out


def link_slope(z):
    """Derivative of link_loss: sigmoid(-z)."""
    z = np.asarray(z, dtype=float)
    out = expit(-z)
    return float(out) if out.ndim == 0 else out


def binary_entropy_gap(p):
    """h(p) = p log p + (1-p) log(1-p) + log 2, with 0 log 0 := 0.

    Nonnegative on [0, 1], zero exactly at p = 1/2, log 2 at the endpoints.
    """
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        q = 1.0 - p
        b = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    out = a + b + LOG2
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Weighted samples and discriminator families
# ---------------------------------------------------------------------------

class WeightedSample:
    """Nonnegative weights attached to points sharing one dimension."""

    def __init__(self, weights, points):
        w = np.asarray(weights, dtype=float)
        x = np.asarray(points, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if w.ndim != 1 or x.ndim != 2 or w.shape[0] != x.shape[0]:
            raise ValueError("weights and points must align")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(x))):
            raise ValueError("non-finite sample entries")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if not np.any(w > 0):
            raise ValueError("at least one weight must be positive")
        self.weights = w
        self.points = x

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def total(self) -> float:
        return float(self.weights.sum())

    def scaled(self, c: float) -> "WeightedSample":
        return WeightedSample(self.weights * c, self.points)


@dataclass(frozen=True)
class SignSlope:
    """Scalar family {x -> x, x -> -x}; requires 1-D points."""


@dataclass(frozen=True)
class LinearBall:
    """Affine family {x -> a + b.x : ||b||_2 <= 1} with free intercept."""


@dataclass(frozen=True)
class KernelSpec:
    """RKHS unit ball. kind 'rbf' uses k(x,y) = exp(-||x-y||^2 / (2 h^2))."""

    kind: str = "rbf"
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise ValueError("kernel kind must be 'rbf' or 'linear'")
        if self.kind == "rbf" and (self.bandwidth is None or self.bandwidth <= 0):
            raise ValueError("rbf kernel needs bandwidth > 0")


@dataclass(frozen=True)
class NeuralClass:
    """Neural discriminators of a fixed scalar-output architecture.

    The degree-2 regularizer is the sum of squared weight-matrix entries
    (biases excluded).
    """

    arch: Architecture
    regularizer: str = "weight_sum_squares"


FunctionClass = SignSlope | LinearBall | KernelSpec | NeuralClass


@dataclass
class DDResult:
    squared_value: float
    scale: float
    discriminator: dict
    converged: bool
    iterations: int
    saturated: bool = False

    @property
    def value(self) -> float:
        return math.sqrt(max(self.squared_value, 0.0))

    def score(self, points: np.ndarray) -> np.ndarray:
        """t* f*(x) for each row: the fitted discriminant at optimal scale."""
        x = np.atleast_2d(np.asarray(points, dtype=float))
        kind = self.discriminator["kind"]
        if kind == "sign_slope":
            return self.discriminator["t"] * x[:, 0]
        if kind == "affine":
            return self.discriminator["intercept"] + x @ self.discriminator["slope"]
        if kind == "neural":
            return numerics.net_forward_batch(self.discriminator["params"], x)
        raise ValueError(f"unknown discriminator kind {kind!r}")


@dataclass(frozen=True)
class NeuralDDConfig:
    """Stochastic-ascent settings for the neural-family lower bound."""

    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 1e-3
    restarts: int = 2
    rng: RngStream = field(default_factory=lambda: RngStream(0))


# ---------------------------------------------------------------------------
# IPM (closed-form families)
# ---------------------------------------------------------------------------

def _check_dims(s_plus: WeightedSample, s_minus: WeightedSample) -> None:
    if s_plus.dim != s_minus.dim:
        raise ValueError("sample dimensions differ")


def _signed_moment(s_plus: WeightedSample, s_minus: WeightedSample) -> np.ndarray:
    return (s_plus.weights @ s_plus.points) - (s_minus.weights @ s_minus.points)


def _gram(kernel: KernelSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if kernel.kind == "linear":
        return x @ y.T
    sq = (np.sum(x * x, axis=1)[:, None] + np.sum(y * y, axis=1)[None, :]
          - 2.0 * (x @ y.T))
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * kernel.bandwidth ** 2))


def ipm(cls: FunctionClass, s_plus: WeightedSample, s_minus: WeightedSample) -> float:
    """Integral probability metric between two weighted samples.

    Closed forms only: sign-slope is |sum of signed weighted points|, the
    affine ball is the norm of the signed weighted-mean difference (infinite
    when totals differ, because the intercept is free), and kernels use
    sqrt(s' K s) with signed weights.
    """
    _check_dims(s_plus, s_minus)
    if isinstance(cls, SignSlope):
        if s_plus.dim != 1:
            raise ValueError("sign-slope family needs 1-D points")
        return float(abs(_signed_moment(s_plus, s_minus)[0]))
    if isinstance(cls, LinearBall):
        if abs(s_plus.total() - s_minus.total()) > EQUAL_TOTAL_TOL:
            return math.inf
        return float(np.linalg.norm(_signed_moment(s_plus, s_minus)))
    if isinstance(cls, KernelSpec):
        x = np.vstack([s_plus.points, s_minus.points])
        s = np.concatenate([s_plus.weights, -s_minus.weights])
        val = s @ _gram(cls, x, x) @ s
        return float(math.sqrt(max(val, 0.0)))
    raise ValueError("no closed-form IPM for this family")


def class_bound(cls: FunctionClass, s_plus: WeightedSample,
                s_minus: WeightedSample) -> float:
    """M = sup over the family of |f(x)| at the sample points.

    For the affine ball (equal-total samples) the intercept cancels from
    every quantity the ratio bound touches, so M is the max point norm.
    """
    pts = np.vstack([s_plus.points, s_minus.points])
    if isinstance(cls, SignSlope):
        return float(np.max(np.abs(pts[:, 0])))
    if isinstance(cls, LinearBall):
        return float(np.max(np.linalg.norm(pts, axis=1)))
    raise ValueError("M is only defined here for closed-form families")


# ---------------------------------------------------------------------------
# Discriminative distance: exact 1-D family
# ---------------------------------------------------------------------------

def _dd_sign_slope(s_plus: WeightedSample, s_minus: WeightedSample,
                   psi: float) -> DDResult:
    if s_plus.dim != 1:
        raise ValueError("sign-slope family needs 1-D points")
    wp, xp = s_plus.weights, s_plus.points[:, 0]
    wm, xm = s_minus.weights, s_minus.points[:, 0]

    def value(t: float) -> float:
        return float(wp @ link_loss(t * xp) + wm @ link_loss(-t * xm)
                     - 0.5 * psi * t * t)

    def grad(t: float) -> float:
        return float(wp @ (xp * link_slope(t * xp))
                     - wm @ (xm * link_slope(-t * xm)) - psi * t)

    if psi == 0.0:
        # supremum sits at t -> +-inf when the signs separate the samples
        ap, am = xp[wp > 0], xm[wm > 0]
        for sign in (1.0, -1.0):
            if np.all(sign * ap >= 0) and np.all(sign * am <= 0):
                sat = float(wp[xp * sign > 0].sum() + wm[xm * sign < 0].sum()) * LOG2
                return DDResult(sat, math.copysign(1.0, sign),
                                {"kind": "sign_slope", "t": sign * 1e6},
                                converged=True, iterations=0, saturated=True)

    g0 = grad(0.0)
    tol = 1e-12
    if abs(g0) <= tol:
        return DDResult(0.0, 0.0, {"kind": "sign_slope", "t": 0.0},
                        converged=True, iterations=0)
    direction = 1.0 if g0 > 0 else -1.0
    lo, hi = 0.0, direction
    it = 0
    while grad(hi) * g0 > 0:
        lo, hi = hi, hi * 2.0
        it += 1
        if abs(hi) > 1e12:
            raise NumericError("sign-slope bracket expansion failed")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gm = grad(mid)
        it += 1
        if abs(gm) <= tol or abs(hi - lo) <= 1e-16 * max(1.0, abs(mid)):
            lo = hi = mid
            break
        if gm * g0 > 0:
            lo = mid
        else:
            hi = mid
    t_star = 0.5 * (lo + hi)
    return DDResult(max(value(t_star), 0.0), abs(t_star),
                    {"kind": "sign_slope", "t": t_star},
                    converged=abs(grad(t_star)) <= 10 * tol, iterations=it)


# ---------------------------------------------------------------------------
# Discriminative distance: affine family (ridge-regularized logistic fit)
# ---------------------------------------------------------------------------

def _separable(signs: np.ndarray, x: np.ndarray) -> bool:
    """Feasibility of a unit-margin affine separator via linear programming."""
    n, d = x.shape
    a_ub = -signs[:, None] * np.hstack([np.ones((n, 1)), x])
    res = linprog(c=np.zeros(d + 1), A_ub=a_ub, b_ub=-np.ones(n),
                  bounds=[(None, None)] * (d + 1), method="highs")
    return res.status == 0


def _dd_linear(s_plus: WeightedSample, s_minus: WeightedSample,
               psi: float, warm_start: np.ndarray | None = None) -> DDResult:
    """Maximize the weighted link objective over unconstrained (c, d).

    Absorbing the scale t into the affine map leaves a (psi/2)||d||^2
    penalty on the linear part with a free intercept; solved by damped
    Newton with backtracking to gradient norm 1e-10. ``warm_start`` seeds
    the iteration (useful when sweeping many nearby weightings).
    """
    x = np.vstack([s_plus.points, s_minus.points])
    w = np.concatenate([s_plus.weights, s_minus.weights])
    s = np.concatenate([np.ones(s_plus.size), -np.ones(s_minus.size)])
    active = w > 0
    w_bar = float(w.sum())
    d_dim = x.shape[1]

    if psi == 0.0 and _separable(s[active], x[active]):
        # supremum w_bar log 2 is approached but never attained
        theta = _separating_direction(s[active], x[active])
        return DDResult(w_bar * LOG2, float(np.linalg.norm(theta[1:])),
                        {"kind": "affine", "intercept": float(theta[0]),
                         "slope": theta[1:]},
                        converged=True, iterations=0, saturated=True)

    xt = np.hstack([np.ones((x.shape[0], 1)), x])
    reg = np.zeros(d_dim + 1)
    reg[1:] = psi
    theta = np.zeros(d_dim + 1) if warm_start is None else np.array(warm_start, dtype=float)

    def objective(th: np.ndarray) -> float:
        z = s * (xt @ th)
        return float(w @ link_loss(z) - 0.5 * psi * float(th[1:] @ th[1:]))

    def gradient(th: np.ndarray) -> np.ndarray:
        z = s * (xt @ th)
        return xt.T @ (w * s * link_slope(z)) - reg * th

    f_cur = objective(theta)
    it = 0
    converged = False
    for it in range(1, 201):
        g = gradient(theta)
        gnorm = float(np.linalg.norm(g))
        if gnorm < 1e-10:
            converged = True
            break
        z = s * (xt @ theta)
        sig = expit(z)
        curv = w * sig * (1.0 - sig)
        hess = -(xt.T * curv) @ xt - np.diag(reg)
        try:
            step = np.linalg.solve(hess - 1e-12 * np.eye(d_dim + 1), -g)
        except np.linalg.LinAlgError:
            step = g
        if g @ step <= 0:  # not an ascent direction; fall back to gradient
            step = g
        alpha = 1.0
        for _ in range(60):
            cand = theta + alpha * step
            f_new = objective(cand)
            if f_new >= f_cur + 1e-4 * alpha * float(g @ step):
                theta, f_cur = cand, f_new
                break
            alpha *= 0.5
        else:
            break
    return DDResult(max(f_cur, 0.0), float(np.linalg.norm(theta[1:])),
                    {"kind": "affine", "intercept": float(theta[0]),
                     "slope": theta[1:].copy()},
                    converged=converged, iterations=it)


def _separating_direction(signs: np.ndarray, x: np.ndarray) -> np.ndarray:
    n, d = x.shape
    a_ub = -signs[:, None] * np.hstack([np.ones((n, 1)), x])
    res = linprog(c=np.zeros(d + 1), A_ub=a_ub, b_ub=-np.ones(n),
                  bounds=[(None, None)] * (d + 1), method="highs")
    if res.status != 0:
        raise NumericError("separator requested for non-separable data")
    return np.asarray(res.x, dtype=float)


# ---------------------------------------------------------------------------
# Discriminative distance: neural family (stochastic lower bound)
# ---------------------------------------------------------------------------

def _dd_neural(cls: NeuralClass, s_plus: WeightedSample, s_minus: WeightedSample,
               psi: float, config: NeuralDDConfig) -> DDResult:
    x = np.vstack([s_plus.points, s_minus.points])
    w = np.concatenate([s_plus.weights, s_minus.weights])
    s = np.concatenate([np.ones(s_plus.size), -np.ones(s_minus.size)])
    n = x.shape[0]

    def full_objective(params: NetworkParams) -> float:
        # evaluate at the exactly optimal output scale: the supremum
        # includes t, so rescoring the trained net over {t f} tightens the
        # lower bound and repairs sign-inverted discriminators
        f = numerics.net_forward_batch(params, x)
        if psi > 0:
            r_last = float(np.sum(params.weights[-1] ** 2))
            rest = params.weight_sum_squares() - r_last
        else:
            r_last = rest = 0.0
        pos = s > 0
        inner = _dd_sign_slope(WeightedSample(w[pos], f[pos]),
                               WeightedSample(w[~pos], f[~pos]),
                               psi * r_last)
        return float(inner.squared_value - 0.5 * psi * rest)

    best_val = 0.0  # t = 0 always feasible
    best_params = None
    best_epoch = -1
    steps = 0
    for run in range(config.restarts):
        rng = config.rng.child(run)
        params = numerics.init_params(cls.arch, rng.child(0))
        state = numerics.adam_init(params)
        gen = rng.child(1).generator()
        batch = min(config.batch_size, n)
        for epoch in range(config.epochs):
            order = gen.permutation(n)
            for chunk in np.array_split(order, max(1, math.ceil(n / batch))):
                xb, wb, sb = x[chunk], w[chunk], s[chunk]
                f = numerics.net_forward_batch(params, xb)
                upstream = wb * sb * link_slope(sb * f)
                grads = numerics.net_gradient_batch(params, xb, upstream)
                if psi > 0:
                    for gw, pw in zip(grads.weights, params.weights):
                        gw -= psi * pw
                neg = grads.with_arrays([-a for a in grads.arrays()])
                params, state = numerics.adam_step(params, neg, state,
                                                   config.learning_rate)
                steps += 1
            val = full_objective(params)
            if val > best_val:
                best_val = val
                best_params = params.copy()
                best_epoch = epoch
    if best_params is None:
        best_params = numerics.init_params(cls.arch, config.rng.child(0, 0))
        best_val = max(full_objective(best_params), 0.0)
    plateaued = best_epoch < config.epochs - 1
    return DDResult(best_val, 1.0, {"kind": "neural", "params": best_params},
                    converged=plateaued, iterations=steps)


# ---------------------------------------------------------------------------
# dd: dispatch
# ---------------------------------------------------------------------------

def dd(cls: FunctionClass, s_plus: WeightedSample, s_minus: WeightedSample,
       psi: float = 0.0, config: NeuralDDConfig | None = None,
       warm_start: np.ndarray | None = None) -> DDResult:
    """Discriminative distance between two weighted samples.

    Exact for SignSlope (1-D concave maximization) and LinearBall
    (weighted ridge logistic fit); a stochastic lower-bound estimate for
    NeuralClass. The squared value always lies in [0, total-weight * log 2].
    """
    _check_dims(s_plus, s_minus)
    if psi < 0:
        raise ValueError("psi must be nonnegative")
    if isinstance(cls, SignSlope):
        return _dd_sign_slope(s_plus, s_minus, psi)
    if isinstance(cls, LinearBall):
        return _dd_linear(s_plus, s_minus, psi, warm_start)
    if isinstance(cls, NeuralClass):
        return _dd_neural(cls, s_plus, s_minus, psi, config or NeuralDDConfig())
    raise ValueError("kernel-family discriminative distance is not provided")


# ---------------------------------------------------------------------------
# Dual verifier
# ---------------------------------------------------------------------------

def _project_box_hyperplane(y: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Project onto [0,1]^n intersected with {u.p = 0} (u with zeros allowed)."""
    nz = u != 0
    if not np.any(nz):
        return np.clip(y, 0.0, 1.0)

    def value(theta: float) -> float:
        return float(u @ np.clip(y - theta * u, 0.0, 1.0))

    # value is nonincreasing in theta; the root lies within this bracket
    span = (np.max(np.abs(y)) + 1.0) / np.min(np.abs(u[nz]))
    lo, hi = -span, span
    if value(lo) < 0 or value(hi) > 0:  # constraint only binds at a box corner
        return np.clip(y - (lo if value(lo) < 0 else hi) * u, 0.0, 1.0)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if value(mid) > 0:
            lo = mid
        else:
            hi = mid
    return np.clip(y - 0.5 * (lo + hi) * u, 0.0, 1.0)


def dd_dual(cls: FunctionClass, s_plus: WeightedSample, s_minus: WeightedSample,
            psi: float) -> float:
    """Dual form of the squared discriminative distance (psi > 0 only).

    Minimizes sum_i w_i h(p_i) + (1/(2 psi)) IPM^2 of the p-reweighted
    samples over p in [0,1]^n by projected gradient with multi-start.
    Intended as an independent oracle at verifier scale (<= 12 points).
    """
    _check_dims(s_plus, s_minus)
    if psi <= 0:
        raise ValueError("the dual verifier requires psi > 0")
    n = s_plus.size + s_minus.size
    if n > 12:
        raise ValueError("dual verifier is limited to 12 points")
    if isinstance(cls, SignSlope):
        if s_plus.dim != 1:
            raise ValueError("sign-slope family needs 1-D points")
        constrain = False
    elif isinstance(cls, LinearBall):
        if abs(s_plus.total() - s_minus.total()) > EQUAL_TOTAL_TOL:
            raise ValueError("affine-family dual needs equal total weights")
        constrain = True
    else:
        raise ValueError("dual verifier supports SignSlope and LinearBall")

    w = np.concatenate([s_plus.weights, s_minus.weights])
    s = np.concatenate([np.ones(s_plus.size), -np.ones(s_minus.size)])
    x = np.vstack([s_plus.points, s_minus.points])
    sw = (s * w)[:, None] * x  # rows s_i w_i x_i
    u = s * w if constrain else np.zeros(n)

    def objective(p: np.ndarray) -> float:
        v = sw.T @ p
        return float(w @ binary_entropy_gap(p) + (v @ v) / (2.0 * psi))

    def gradient(p: np.ndarray) -> np.ndarray:
        v = sw.T @ p
        pc = np.clip(p, 1e-15, 1.0 - 1e-15)
        return w * (np.log(pc) - np.log1p(-pc)) + (sw @ v) / psi

    def project(p: np.ndarray) -> np.ndarray:
        if constrain:
            return _project_box_hyperplane(p, u)
        return np.clip(p, 0.0, 1.0)

    def solve(p0: np.ndarray) -> float:
        p = project(p0)
        step = 0.25
        f_cur = objective(p)
        for _ in range(20000):
            g = gradient(p)
            cand = project(p - step * g)
            move = float(np.linalg.norm(cand - p))
            if move / max(step, 1e-30) < 1e-9:
                break
            f_new = objective(cand)
            if f_new <= f_cur - 1e-12:
                p, f_cur = cand, f_new
                step = min(step * 1.5, 4.0)
            else:
                step *= 0.5
                if step < 1e-14:
                    break
        return f_cur

    gen = RngStream(1234).generator()
    best = solve(np.full(n, 0.5))
    for _ in range(8):
        best = min(best, solve(gen.uniform(0.0, 1.0, size=n)))
    return best


# ---------------------------------------------------------------------------
# Ratio bounds
# ---------------------------------------------------------------------------

@dataclass
class BoundCheck:
    ipm_value: float
    dd_value: float
    lower: float
    upper: float

    @property
    def slack(self) -> float:
        """Most negative margin of lower <= ipm <= upper (>= 0 means holds)."""
        return min(self.ipm_value - self.lower, self.upper - self.ipm_value)


def bound_check(cls: FunctionClass, s_plus: WeightedSample,
                s_minus: WeightedSample, psi: float) -> BoundCheck:
    """Evaluate the two-sided IPM/DD ratio bound.

    lower = 2 sqrt(2 psi) DD and upper = max(2 M sqrt(w_bar), 4 sqrt(psi)) DD
    must sandwich the IPM; a violation beyond 1e-6 raises, since the bound
    is a theorem and failure signals a solver bug.
    """
    if psi <= 0:
        raise ValueError("bound_check requires psi > 0")
    ipm_value = ipm(cls, s_plus, s_minus)
    if not math.isfinite(ipm_value):
        raise ValueError("bound_check needs a finite IPM (equal totals)")
    dd_value = dd(cls, s_plus, s_minus, psi).value
    m = class_bound(cls, s_plus, s_minus)
    w_bar = s_plus.total() + s_minus.total()
    lower = 2.0 * math.sqrt(2.0 * psi) * dd_value
    upper = max(2.0 * m * math.sqrt(w_bar), 4.0 * math.sqrt(psi)) * dd_value
    result = BoundCheck(ipm_value, dd_value, lower, upper)
    if result.slack < -1e-6:
        raise BoundViolationError(
            f"ratio bound violated: lower={lower:.12g} ipm={ipm_value:.12g} "
            f"upper={upper:.12g}")
    return result
