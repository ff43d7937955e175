"""Objective functions over Gaussian predictives and revenue risk metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .bayes import PredictiveDistribution
from .errors import InvalidArgument

LOG_2PI = math.log(2.0 * math.pi)

N_RESAMPLES = 500


def nll(pred: PredictiveDistribution, y):
    """Negative log predictive density of ``y``; elementwise over arrays."""
    prec = np.asarray(pred.precision, dtype=float)
    resid = np.asarray(y, dtype=float) - pred.mean
    out = 0.5 * (LOG_2PI - np.log(prec) + prec * resid * resid)
    return out[()] if isinstance(out, np.ndarray) else out


def gaussian_kl(p: PredictiveDistribution, q: PredictiveDistribution):
    """KL(p || q) between univariate Gaussians given by mean and precision.

    The precision term ``u - 1 + exp(-u)`` with ``u = log(prec_p/prec_q)`` is
    evaluated through ``expm1`` so that it never goes negative by rounding.
    """
    prec_p = np.asarray(p.precision, dtype=float)
    prec_q = np.asarray(q.precision, dtype=float)
    u = np.log(prec_p) - np.log(prec_q)
    spread = np.expm1(-u) + u
    delta = np.asarray(p.mean, dtype=float) - q.mean
    out = 0.5 * (np.maximum(spread, 0.0) + prec_q * delta * delta)
    return out[()]


@dataclass(frozen=True)
class RecursiveEstimate:
    """Exponentially-forgetting estimate of an expectation.

    ``value`` is ``None`` until the first observation, which seeds it.
    """

    forgetting: float
    value: float | None = None
    steps: int = 0

    def __post_init__(self):
        if not 0.0 <= self.forgetting <= 1.0:
            raise InvalidArgument("forgetting must lie in [0, 1]")


def recursive_update(prev: RecursiveEstimate, current_value: float) -> RecursiveEstimate:
    if prev.value is None:
        return replace(prev, value=float(current_value), steps=prev.steps + 1)
    tau = prev.forgetting
    value = (1.0 - tau) * current_value + tau * prev.value
    return replace(prev, value=value, steps=prev.steps + 1)


def recursive_series(values, tau: float) -> np.ndarray:
    """Run :func:`recursive_update` over ``values``; returns every estimate."""
    out = np.empty(len(values))
    est = RecursiveEstimate(tau)
    for k, v in enumerate(values):
        est = recursive_update(est, v)
        out[k] = est.value
    return out


def expected_shortfall(samples, alpha: float) -> float:
    """Negated mean of the ``ceil(alpha * N)`` smallest samples."""
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size == 0:
        raise InvalidArgument("samples must be non-empty")
    if not 0.0 < alpha < 1.0:
        raise InvalidArgument("alpha must lie in (0, 1)")
    k = max(1, math.ceil(alpha * x.size - 1e-12))
    worst = np.sort(x)[:k]
    return -math.fsum(worst) / k


def sample_mean(samples) -> float:
    x = np.asarray(samples, dtype=float).reshape(-1)
    return math.fsum(x) / x.size


STATISTICS = {
    "mean": lambda x, alpha: sample_mean(x),
    "es": expected_shortfall,
}


def subsample_confidence_interval(
    samples, statistic: str = "mean", alpha: float = 0.05, level: float = 0.95, rng_seed=0
) -> tuple[float, float]:
    """Half-sampling confidence interval for ``statistic``.

    Draws ``N_RESAMPLES`` subsets of size ``N // 2`` without replacement and
    returns the two-sided empirical quantiles of the recomputed statistic.
    Subsampling without replacement at half size reproduces the ``1/N``
    variance of the full-sample mean. Samples are sorted first, so the result
    does not depend on the order in which they were collected.
    """
    x = np.sort(np.asarray(samples, dtype=float).reshape(-1))
    if x.size < 20:
        raise InvalidArgument("at least 20 samples are required")
    if not 0.0 < level < 1.0:
        raise InvalidArgument("level must lie in (0, 1)")
    try:
        stat = STATISTICS[statistic]
    except KeyError:
        raise InvalidArgument(f"unknown statistic {statistic!r}") from None
    rng = np.random.default_rng(rng_seed)
    m = x.size // 2
    values = np.array(
        [stat(x[rng.choice(x.size, m, replace=False)], alpha) for _ in range(N_RESAMPLES)]
    )
    lo, hi = np.quantile(values, [(1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0])
    return float(lo), float(hi)


@dataclass(frozen=True)
class RiskReport:
    expected_value: float
    expected_shortfall: float
    alpha: float
    confidence_interval: tuple[float, float]
    shortfall_interval: tuple[float, float]
    n: int


def risk_report(samples, alpha: float = 0.05, level: float = 0.95, rng_seed=0) -> RiskReport:
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size >= 20:
        ev_ci = subsample_confidence_interval(x, "mean", alpha, level, rng_seed)
        es_ci = subsample_confidence_interval(x, "es", alpha, level, rng_seed)
    else:
        ev_ci = es_ci = (math.nan, math.nan)
    return RiskReport(sample_mean(x), expected_shortfall(x, alpha), alpha, ev_ci, es_ci, x.size)
