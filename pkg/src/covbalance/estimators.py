"""Treatment-effect estimators over weighted observational samples.

Weighted and doubly robust mean contrasts, weighted least squares for
conditional effects, regression imputation, propensity and outcome model
fitting, and the conditional bias/variance decomposition used as a test
oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import numerics
from .balancing import BalanceWeights
from .errors import NumericError
from .numerics import Architecture, NetworkParams, RngStream


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Covariates, binary treatment, optional outcomes."""

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.t = np.asarray(self.t)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if self.x.ndim != 2 or self.t.shape != (self.x.shape[0],):
            raise ValueError("x must be (n, d) with matching t")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("non-finite covariates")
        vals = set(np.unique(self.t).tolist())
        if not vals <= {0, 1}:
            raise ValueError(f"treatment must be 0/1, found {sorted(vals)}")
        self.t = self.t.astype(int)
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float)
            if self.y.shape != (self.x.shape[0],):
                raise ValueError("outcome length mismatch")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def n1(self) -> int:
        return int(self.t.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def x_treated(self) -> np.ndarray:
        return self.x[self.t == 1]

    @property
    def x_control(self) -> np.ndarray:
        return self.x[self.t == 0]

    def require_arms(self) -> None:
        if self.n1 < 1 or self.n0 < 1:
            raise ValueError("need at least one treated and one control unit")

    def require_outcomes(self) -> None:
        if self.y is None:
            raise ValueError("this operation needs outcomes")


def _extract_xh(data: Dataset, xh) -> np.ndarray:
    """X^H design: column indices, a callable over X, or an (n, k) array."""
    if callable(xh):
        out = np.asarray(xh(data.x), dtype=float)
    elif isinstance(xh, (list, tuple)) and all(isinstance(i, int) for i in xh):
        out = data.x[:, list(xh)]
    else:
        out = np.asarray(xh, dtype=float)
    if out.ndim == 1:
        out = out[:, None]
    if out.shape[0] != data.n:
        raise ValueError("X^H rows must match the dataset")
    return out


# ---------------------------------------------------------------------------
# Fitted models
# ---------------------------------------------------------------------------

@dataclass
class PropensityModel:
    kind: str                          # "logistic" | "neural"
    params: object                     # coefficient vector or NetworkParams
    diagnostics: dict = field(default_factory=dict)

    def score(self, x: np.ndarray) -> np.ndarray:
        """Estimated treatment probability, strictly inside (0, 1)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "logistic":
            beta = self.params
            z = beta[0] + x @ beta[1:]
        else:
            z = numerics.net_forward_batch(self.params, x)
        return np.clip(expit(z), 1e-12, 1.0 - 1e-12)


@dataclass
class OutcomeModel:
    kind: str                          # "ols" | "neural"
    params: object
    diagnostics: dict = field(default_factory=dict)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "ols":
            beta = self.params
            return beta[0] + x @ beta[1:]
        return numerics.net_forward_batch(self.params, x)


@dataclass
class CattModel:
    """Linear conditional-effect model tau(x_h) = intercept + slopes . x_h."""

    intercept: float
    slopes: np.ndarray

    def predict(self, x_h: np.ndarray) -> np.ndarray:
        x_h = np.atleast_2d(np.asarray(x_h, dtype=float))
        return self.intercept + x_h @ self.slopes


@dataclass(frozen=True)
class NeuralFitConfig:
    """Training settings for the neural propensity/outcome fits."""

    epochs: int = 10
    batch_size: int = 100
    learning_rate: float = 1e-4
    arch: Architecture | None = None
    rng: RngStream = field(default_factory=lambda: RngStream(0))


# ---------------------------------------------------------------------------
# Weight construction
# ---------------------------------------------------------------------------

PROPENSITY_CLIP = 1e-6


def ipw_weights(model: PropensityModel, data: Dataset,
                normalized: bool = False) -> BalanceWeights:
    """Inverse-propensity control weights: odds e/(1-e), treated weight 1.

    The score is clamped to [1e-6, 1 - 1e-6] before the odds. Unnormalized
    by default (convention "raw"); with ``normalized`` the control weights
    are rescaled to sum to n1 (the Hajek form).
    """
    data.require_arms()
    e = np.clip(model.score(data.x_control), PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP)
    odds = e / (1.0 - e)
    if normalized:
        odds = odds * (data.n1 / odds.sum())
        return BalanceWeights(odds, "treated_count",
                              {"algorithm": "ipw_normalized"})
    return BalanceWeights(odds, "raw", {"algorithm": "ipw"})


def _full_weights(weights: BalanceWeights, data: Dataset) -> np.ndarray:
    if weights.convention == "unit_sum":
        raise ValueError("convert unit-sum weights to treated count first")
    if weights.control_weights.shape != (data.n0,):
        raise ValueError("weight/control count mismatch")
    return weights.full_weights(data.t)


# ---------------------------------------------------------------------------
# Effect estimators
# ---------------------------------------------------------------------------

def att_weighted(weights: BalanceWeights, data: Dataset) -> float:
    """Weighted mean contrast: (1/n1) [sum_T1 Y - sum_T0 W Y]."""
    data.require_outcomes()
    data.require_arms()
    w = _full_weights(weights, data)
    signs = np.where(data.t == 1, 1.0, -1.0)
    return float((signs * w * data.y).sum() / data.n1)


def att_dr(weights: BalanceWeights, data: Dataset,
           outcome: OutcomeModel) -> float:
    """Doubly robust contrast: residuals against the outcome model."""
    data.require_outcomes()
    data.require_arms()
    w = _full_weights(weights, data)
    signs = np.where(data.t == 1, 1.0, -1.0)
    resid = data.y - outcome.predict(data.x)
    return float((signs * w * resid).sum() / data.n1)


def att_regression(data: Dataset, outcome: OutcomeModel) -> float:
    """Regression imputation: mean over treated of Y - f0_hat(X)."""
    data.require_outcomes()
    data.require_arms()
    treated = data.t == 1
    resid = data.y[treated] - outcome.predict(data.x[treated])
    return float(resid.mean())


def catt_wls(weights: BalanceWeights, data: Dataset, xh,
             ridge: float = 1e-10) -> CattModel:
    """Conditional effect by weighted least squares.

    Minimizes sum_i W_i (Y_i - ((2T_i - 1)/2) tau(X_i^H))^2 over linear tau
    in closed form on the sign-transformed design; a tiny ridge keeps
    rank-deficient designs solvable.
    """
    data.require_outcomes()
    x_h = _extract_xh(data, xh)
    w = _full_weights(weights, data)
    half_sign = (2.0 * data.t - 1.0) / 2.0
    design = half_sign[:, None] * np.hstack([np.ones((data.n, 1)), x_h])
    a = design.T @ (w[:, None] * design)
    a += ridge * np.eye(a.shape[0])
    b = design.T @ (w * data.y)
    coef = np.linalg.solve(a, b)
    return CattModel(float(coef[0]), coef[1:])


# ---------------------------------------------------------------------------
# Risk decomposition (test oracle)
# ---------------------------------------------------------------------------

@dataclass
class RiskDecomposition:
    bias_sq: float
    variance_sq: float

    @property
    def total(self) -> float:
        return self.bias_sq + self.variance_sq


def risk_decomposition(weights: BalanceWeights, f0, sigma0_sq,
                       data: Dataset) -> RiskDecomposition:
    """Conditional MSE split of the weighted estimator given (X, T).

    B^2 = (1/n1^2) (sum_i (-1)^{1+T_i} W_i f0(X_i))^2 and
    V^2 = (1/n1^2) sum_i W_i^2 sigma0^2(X_i), treated weights 1. Requires
    the true control-response mean and noise variance (oracle use only).
    """
    w = _full_weights(weights, data)
    signs = np.where(data.t == 1, 1.0, -1.0)
    f_vals = np.asarray(f0(data.x), dtype=float)
    s_vals = np.asarray(sigma0_sq(data.x), dtype=float)
    bias = float((signs * w * f_vals).sum() / data.n1)
    var = float((w * w * s_vals).sum() / data.n1 ** 2)
    return RiskDecomposition(bias * bias, var)


# ---------------------------------------------------------------------------
# Model fitting
# ---------------------------------------------------------------------------

def fit_propensity(data: Dataset, kind: str = "logistic",
                   config: NeuralFitConfig | None = None) -> PropensityModel:
    """Probabilistic classifier for treatment given covariates.

    Logistic regression by Newton iterations (target gradient norm 1e-10;
    non-convergence on separable data is reported in the diagnostics, not
    raised). Neural fit trains a scalar-logit net with the binary
    cross-entropy loss by Adam.
    """
    data.require_arms()
    if kind == "logistic":
        xt = np.hstack([np.ones((data.n, 1)), data.x])
        y = data.t.astype(float)
        beta = np.zeros(xt.shape[1])
        converged = False
        it = 0
        ll_cur = _logistic_ll(xt, y, beta)
        for it in range(1, 101):
            p = expit(xt @ beta)
            g = xt.T @ (y - p)
            if np.linalg.norm(g) < 1e-10:
                converged = True
                break
            curv = np.maximum(p * (1.0 - p), 1e-12)
            h = (xt.T * curv) @ xt + 1e-10 * np.eye(xt.shape[1])
            step = np.linalg.solve(h, g)
            alpha = 1.0
            for _ in range(50):
                cand = beta + alpha * step
                ll_new = _logistic_ll(xt, y, cand)
                if ll_new >= ll_cur:
                    beta, ll_cur = cand, ll_new
                    break
                alpha *= 0.5
            else:
                break
        return PropensityModel("logistic", beta,
                               {"converged": converged, "iterations": it})
    if kind == "neural":
        cfg = config or NeuralFitConfig()
        arch = cfg.arch or numerics.mlp(data.dim, (2, 2, 2, 2), "identity")
        params = numerics.init_params(arch, cfg.rng.child(0))
        state = numerics.adam_init(params)
        gen = cfg.rng.child(1).generator()
        y = data.t.astype(float)
        for _ in range(cfg.epochs):
            order = gen.permutation(data.n)
            for batch in np.array_split(order, max(1, math.ceil(data.n / cfg.batch_size))):
                f = numerics.net_forward_batch(params, data.x[batch])
                grads = numerics.net_gradient_batch(params, data.x[batch],
                                                    expit(f) - y[batch])
                params, state = numerics.adam_step(params, grads, state,
                                                   cfg.learning_rate)
        return PropensityModel("neural", params, {"epochs": cfg.epochs})
    raise ValueError(f"unknown propensity kind {kind!r}")


def _logistic_ll(xt: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    z = xt @ beta
    return float(y @ z - np.logaddexp(0.0, z).sum())


def fit_outcome(data: Dataset, kind: str = "ols",
                config: NeuralFitConfig | None = None) -> OutcomeModel:
    """Control-response model f0_hat fitted on control units only."""
    data.require_outcomes()
    ctrl = data.t == 0
    if not np.any(ctrl):
        raise ValueError("need at least one control unit")
    xc, yc = data.x[ctrl], data.y[ctrl]
    if kind == "ols":
        xt = np.hstack([np.ones((xc.shape[0], 1)), xc])
        a = xt.T @ xt + 1e-10 * np.eye(xt.shape[1])
        beta = np.linalg.solve(a, xt.T @ yc)
        return OutcomeModel("ols", beta)
    if kind == "neural":
        cfg = config or NeuralFitConfig()
        arch = cfg.arch or numerics.mlp(data.dim, (2, 2, 2, 2), "identity")
        params = numerics.init_params(arch, cfg.rng.child(0))
        state = numerics.adam_init(params)
        gen = cfg.rng.child(1).generator()
        n = xc.shape[0]
        for _ in range(cfg.epochs):
            order = gen.permutation(n)
            for batch in np.array_split(order, max(1, math.ceil(n / cfg.batch_size))):
                f = numerics.net_forward_batch(params, xc[batch])
                grads = numerics.net_gradient_batch(params, xc[batch],
                                                    2.0 * (f - yc[batch]))
                params, state = numerics.adam_step(params, grads, state,
                                                   cfg.learning_rate)
        return OutcomeModel("neural", params, {"epochs": cfg.epochs})
    raise ValueError(f"unknown outcome kind {kind!r}")
