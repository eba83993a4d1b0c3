"""Covariate-balancing toolkit.

Balancing weights for treated-vs-control comparisons via a discriminative
distance between weighted samples: exact conditional-gradient optimization
against closed-form discriminator families, adversarial training of a
weight network against a neural discriminator, effect estimators over the
resulting weights, and reproducible synthetic benchmark studies.
"""

from .balancing import (BalanceWeights, GameConfig, GameTrace, PhiRange,
                        deepmatch, direct_balance, fw_balance, game_terms,
                        lagrangian_balance, objective_eval, phi_range)
from .distances import (DDResult, KernelSpec, LinearBall, NeuralClass,
                        NeuralDDConfig, SignSlope, WeightedSample,
                        binary_entropy_gap, bound_check, dd, dd_dual, ipm,
                        link_loss)
from .errors import (BoundViolationError, DegenerateRunsError, NumericError,
                     SchemaError)
from .estimators import (CattModel, Dataset, NeuralFitConfig, OutcomeModel,
                         PropensityModel, att_dr, att_regression, att_weighted,
                         catt_wls, fit_outcome, fit_propensity, ipw_weights,
                         risk_decomposition)
from .numerics import (AdamState, NetworkParams, RngStream, adam_init,
                       adam_step, cnn, finite_difference_check, init_params,
                       mlp, net_forward, net_forward_batch, net_gradient,
                       net_gradient_batch)
from .simulation import (ConvolutionalDgp, FullyConnectedDgp, GeneratedStudy,
                         ImageStore, Method, ReplicationReport, ShallowDgp,
                         downscale, generate, load_idx, replicate,
                         synthetic_digit_images, true_att, write_idx)

__version__ = "0.1.0"
