"""Cox frailty models estimated by maximum integrated partial likelihood."""

__version__ = "0.1.0"

from .data import (
    Cluster,
    Covariance,
    FrailtyParam,
    FrailtyState,
    Individual,
    ModelParams,
    RiskSetIndex,
    ScalarVariance,
    SurvivalDataset,
    build_risk_index,
    linear_predictor,
)
from .likelihood import (
    LogLikParts,
    grad_beta,
    grad_gamma,
    hessian_theta,
    log_complete_partial,
    log_marginal_partial_oracle,
)
from .sampler import Chain, McmcConfig, McmcDiagnostics, adapt_proposal, mh_sweep
