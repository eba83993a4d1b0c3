"""Preset method sets for the benchmark studies.

Builds the estimator lineups compared in the shallow, fully connected, and
image-confounded designs: raw mean difference, inverse-propensity variants,
regression imputation, doubly robust combinations, conditional-gradient
weights, adversarial weights, and the conditional-effect (slope) versions.
All estimate functions are module-level partials so replication workers can
be forked or spawned.
"""

from __future__ import annotations

import functools
from dataclasses import replace

import numpy as np

from .balancing import BalanceWeights, GameConfig, deepmatch, fw_balance
from .distances import LinearBall
from .estimators import (NeuralFitConfig, att_dr, att_regression, att_weighted,
                         catt_wls, fit_outcome, fit_propensity, ipw_weights)
from .numerics import RngStream, cnn, mlp
from .simulation import GeneratedStudy, Method

FC_CATT_SLOPE_TRUTH = 1.0  # effect sum(X) - 1 in X^H = sum(X)


def _derive_seed(rng: RngStream) -> int:
    return int(rng.generator().integers(0, 2 ** 62))


def _xh_matrix(study: GeneratedStudy, xh_kind: str) -> np.ndarray:
    if xh_kind == "sum":
        return study.data.x.sum(axis=1, keepdims=True)
    if xh_kind == "brightness":
        return study.data.x.mean(axis=1, keepdims=True)
    raise ValueError(f"unknown X^H kind {xh_kind!r}")


# ---------------------------------------------------------------------------
# Shared weight sources (memoized per replication)
# ---------------------------------------------------------------------------

def _propensity(study, rng, memo, kind: str, fit: NeuralFitConfig | None):
    key = ("propensity", kind)
    if key not in memo:
        cfg = replace(fit, rng=rng.child(0)) if fit is not None else None
        memo[key] = fit_propensity(study.data, kind, cfg)
    return memo[key]


def _outcome(study, rng, memo, kind: str, fit: NeuralFitConfig | None):
    key = ("outcome", kind)
    if key not in memo:
        cfg = replace(fit, rng=rng.child(0)) if fit is not None else None
        memo[key] = fit_outcome(study.data, kind, cfg)
    return memo[key]


def _dm_weights(study, rng, memo, cfg: GameConfig, conv: bool) -> BalanceWeights:
    key = ("deepmatch", cfg.lam, cfg.psi, cfg.config_hash())
    if key not in memo:
        run_cfg = replace(cfg, seed=_derive_seed(rng.child(0)))
        if conv:
            side = int(round(study.data.dim ** 0.5))
            shape = (side, side, 1)
            run_cfg = replace(
                run_cfg,
                discriminator_arch=cnn(shape, ((5, 8), (5, 16)), (128,), "identity"),
                weight_arch=cnn(shape, ((5, 8), (5, 16)), (128,), "exp"))
        weights, _ = deepmatch(study.data, run_cfg)
        memo[key] = weights
    return memo[key]


def _fw_weights(study, rng, memo, lam, psi, iterations) -> BalanceWeights:
    key = ("fw", lam, psi, iterations)
    if key not in memo:
        memo[key] = fw_balance(study.data, LinearBall(), lam, psi, iterations)
    return memo[key]


# ---------------------------------------------------------------------------
# Estimate functions
# ---------------------------------------------------------------------------

def est_raw(study, rng, memo):
    d = study.data
    d.require_outcomes()
    return float(d.y[d.t == 1].mean() - d.y[d.t == 0].mean())


def est_ipw(study, rng, memo, kind="logistic", normalized=False, dr=False,
            outcome_kind="ols", fit=None):
    model = _propensity(study, rng, memo, kind, fit)
    w = ipw_weights(model, study.data, normalized=normalized)
    if dr:
        f0 = _outcome(study, rng.child(1), memo, outcome_kind, fit)
        return att_dr(w, study.data, f0)
    return att_weighted(w, study.data)


def est_regression(study, rng, memo, outcome_kind="ols", fit=None):
    f0 = _outcome(study, rng, memo, outcome_kind, fit)
    return att_regression(study.data, f0)


def est_fw(study, rng, memo, lam=1.0, psi=0.0, iterations=300, dr=False,
           outcome_kind="ols", fit=None):
    w = _fw_weights(study, rng, memo, lam, psi, iterations)
    if dr:
        f0 = _outcome(study, rng.child(1), memo, outcome_kind, fit)
        return att_dr(w, study.data, f0)
    return att_weighted(w, study.data)


def est_deepmatch(study, rng, memo, cfg: GameConfig, dr=False,
                  outcome_kind="neural", fit=None, conv=False):
    w = _dm_weights(study, rng, memo, cfg, conv)
    if dr:
        f0 = _outcome(study, rng.child(1), memo, outcome_kind, fit)
        return att_dr(w, study.data, f0)
    return att_weighted(w, study.data)


def est_catt_slope(study, rng, memo, source="uniform", xh_kind="sum",
                   cfg: GameConfig | None = None, kind="logistic", fit=None,
                   conv=False):
    """Slope coefficient of the weighted conditional-effect fit."""
    d = study.data
    if source == "uniform":
        w = BalanceWeights(np.ones(d.n0), "raw", {"algorithm": "uniform"})
    elif source == "ipw":
        w = ipw_weights(_propensity(study, rng, memo, kind, fit), d)
    elif source == "deepmatch":
        w = _dm_weights(study, rng, memo, cfg, conv)
    elif source == "fw":
        w = _fw_weights(study, rng, memo, 1.0, 0.0, 300)
    else:
        raise ValueError(f"unknown weight source {source!r}")
    model = catt_wls(w, d, _xh_matrix(study, xh_kind))
    return float(model.slopes[0])


# ---------------------------------------------------------------------------
# Lineups
# ---------------------------------------------------------------------------

def shallow_methods(fw_iterations: int = 300, lam: float = 1.0) -> list[Method]:
    """The eight estimators of the shallow study (logistic/OLS nuisances)."""
    p = functools.partial
    return [
        Method("raw", est_raw),
        Method("ipw", p(est_ipw, kind="logistic")),
        Method("ipwn", p(est_ipw, kind="logistic", normalized=True)),
        Method("aipw", p(est_ipw, kind="logistic", dr=True)),
        Method("aipwn", p(est_ipw, kind="logistic", normalized=True, dr=True)),
        Method("ols", p(est_regression, outcome_kind="ols")),
        Method("fw", p(est_fw, lam=lam, iterations=fw_iterations)),
        Method("fw_dr", p(est_fw, lam=lam, iterations=fw_iterations, dr=True)),
    ]


def fully_connected_game_config(lam: float, seed: int = 0) -> GameConfig:
    """The published hyperparameters of the fully connected study.

    Initialization is near-neutral (small weights, live biases) so the
    benchmark learning rate can actually steer the tiny nets, and the
    normalization step line-searches the log-weight amplitude.
    """
    return GameConfig(psi=0.0, lam=lam, epochs_stage1=10, epochs_stage2=5,
                      batch_size=100, restarts=5, tolerance=0.01,
                      grid_size=50, learning_rate=1e-4, seed=seed,
                      init_scale=1.0, bias_scale=3.0,
                      amplitude_grid=(0.0, 0.1, 0.2, 0.3, 0.45, 0.65, 0.9, 1.3),
                      dictionary_directions=64)


def fully_connected_methods(names: tuple[str, ...] | None = None,
                            nn_epochs: int = 10) -> list[Method]:
    """ATT and CATT estimators with neural nuisances for the 6-D design."""
    fit = NeuralFitConfig(epochs=nn_epochs, batch_size=100, learning_rate=1e-4)
    p = functools.partial
    dm0 = fully_connected_game_config(lam=0.0)
    dm_half = fully_connected_game_config(lam=0.5)
    catalog = {
        "raw": Method("raw", est_raw),
        "ipw": Method("ipw", p(est_ipw, kind="neural", fit=fit)),
        "ipwn": Method("ipwn", p(est_ipw, kind="neural", normalized=True, fit=fit)),
        "regn": Method("regn", p(est_regression, outcome_kind="neural", fit=fit)),
        "aipw": Method("aipw", p(est_ipw, kind="neural", dr=True,
                                 outcome_kind="neural", fit=fit)),
        "aipwn": Method("aipwn", p(est_ipw, kind="neural", normalized=True,
                                   dr=True, outcome_kind="neural", fit=fit)),
        "dm0": Method("dm0", p(est_deepmatch, cfg=dm0)),
        "dm_half": Method("dm_half", p(est_deepmatch, cfg=dm_half)),
        "dm0_dr": Method("dm0_dr", p(est_deepmatch, cfg=dm0, dr=True, fit=fit)),
        "dm_half_dr": Method("dm_half_dr", p(est_deepmatch, cfg=dm_half,
                                             dr=True, fit=fit)),
        "catt_uniform": Method("catt_uniform",
                               p(est_catt_slope, source="uniform"),
                               truth=FC_CATT_SLOPE_TRUTH),
        "catt_ipw": Method("catt_ipw",
                           p(est_catt_slope, source="ipw", kind="neural", fit=fit),
                           truth=FC_CATT_SLOPE_TRUTH),
        "catt_dm_half": Method("catt_dm_half",
                               p(est_catt_slope, source="deepmatch", cfg=dm_half),
                               truth=FC_CATT_SLOPE_TRUTH),
    }
    if names is None:
        return list(catalog.values())
    return [catalog[n] for n in names]


def convolutional_game_config(image_side: int, seed: int = 0,
                              lam: float = 0.0) -> GameConfig:
    """Reduced-scale adversarial settings for the image design."""
    shape = (image_side, image_side, 1)
    return GameConfig(
        psi=0.0, lam=lam, epochs_stage1=8, epochs_stage2=4, batch_size=100,
        restarts=2, tolerance=0.05, grid_size=8, learning_rate=1e-3, seed=seed,
        discriminator_arch=cnn(shape, ((5, 8), (5, 16)), (128,), "identity"),
        weight_arch=cnn(shape, ((5, 8), (5, 16)), (128,), "exp"))


def convolutional_methods(image_side: int, names: tuple[str, ...] | None = None,
                          nn_epochs: int = 8) -> list[Method]:
    shape = (image_side, image_side, 1)
    arch = cnn(shape, ((5, 8), (5, 16)), (128,), "identity")
    fit = NeuralFitConfig(epochs=nn_epochs, batch_size=100,
                          learning_rate=1e-3, arch=arch)
    dm0 = convolutional_game_config(image_side)
    p = functools.partial
    catalog = {
        "raw": Method("raw", est_raw),
        "ipw": Method("ipw", p(est_ipw, kind="neural", fit=fit)),
        "ipwn": Method("ipwn", p(est_ipw, kind="neural", normalized=True, fit=fit)),
        "regn": Method("regn", p(est_regression, outcome_kind="neural", fit=fit)),
        "dm0": Method("dm0", p(est_deepmatch, cfg=dm0, conv=True)),
        "catt_uniform": Method("catt_uniform",
                               p(est_catt_slope, source="uniform",
                                 xh_kind="brightness"),
                               truth=FC_CATT_SLOPE_TRUTH),
        "catt_dm0": Method("catt_dm0",
                           p(est_catt_slope, source="deepmatch", cfg=dm0,
                             conv=True, xh_kind="brightness"),
                           truth=FC_CATT_SLOPE_TRUTH),
    }
    if names is None:
        return list(catalog.values())
    return [catalog[n] for n in names]
