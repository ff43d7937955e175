"""Bayesian regression markets: paying for features by their predictive value."""

__version__ = "0.1.0"

from .allocation import MarketDesign, expected_shapley, shapley, shapley_series
from .bayes import (
    Dataset,
    GaussianBelief,
    Hypothesis,
    PredictiveDistribution,
    flatten_prior,
    init_prior,
    mle_fit,
    predictive,
    update_posterior,
)
from .errors import RegMktError
from .market import AgentRegistry, MarketConfig, clear_market, run_online, select_features
from .scoring import expected_shortfall, gaussian_kl, nll

__all__ = [
    "AgentRegistry", "Dataset", "GaussianBelief", "Hypothesis", "MarketConfig", "MarketDesign",
    "PredictiveDistribution", "RegMktError", "clear_market", "expected_shapley",
    "expected_shortfall", "flatten_prior", "gaussian_kl", "init_prior", "mle_fit", "nll",
    "predictive", "run_online", "select_features", "shapley", "shapley_series",
    "update_posterior",
]
