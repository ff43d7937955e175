"""Conjugate Gaussian Bayesian linear regression with likelihood flattening.

Beliefs over regression coefficients are Gaussian. Each belief carries its
covariance and the matching precision matrix; updates are carried out in
precision form so that very vague priors (precision ~1e-6) do not lose
accuracy through cancellation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument, InvariantViolation

DEFAULT_PRIOR_PRECISION = 1e-6

BASIS_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda x: x,
    "square": lambda x: x * x,
}


@dataclass(frozen=True)
class Hypothesis:
    """Fixed modelling assumptions shared by every coalition model.

    ``basis[0]`` is always the constant ``"dummy"`` basis; ``basis[j]`` for
    ``j >= 1`` is applied to raw input column ``j - 1``.
    """

    basis: tuple[str, ...]
    noise_precision: float = 1.0
    prior_precision: float = DEFAULT_PRIOR_PRECISION
    forgetting: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "basis", tuple(self.basis))
        if not self.basis or self.basis[0] != "dummy":
            raise InvalidArgument("basis must start with the 'dummy' basis")
        for name in self.basis[1:]:
            if name not in BASIS_FUNCTIONS:
                raise InvalidArgument(f"unknown basis function {name!r}")
        if not self.noise_precision > 0:
            raise InvalidArgument("noise_precision must be positive")
        if not self.prior_precision > 0:
            raise InvalidArgument("prior_precision must be positive")
        if not 0.0 <= self.forgetting <= 1.0:
            raise InvalidArgument("forgetting must lie in [0, 1]")

    @classmethod
    def linear(cls, n_inputs: int, **kwargs) -> "Hypothesis":
        return cls(basis=("dummy",) + ("identity",) * n_inputs, **kwargs)

    @property
    def dim(self) -> int:
        return len(self.basis)

    def design_matrix(self, inputs) -> np.ndarray:
        """Evaluate every basis function; returns shape ``(T, dim)``."""
        x = np.atleast_2d(np.asarray(inputs, dtype=float))
        if x.shape[1] != self.dim - 1:
            raise InvalidArgument(
                f"expected {self.dim - 1} input columns, got {x.shape[1]}"
            )
        cols = [np.ones(x.shape[0])]
        cols += [BASIS_FUNCTIONS[b](x[:, j]) for j, b in enumerate(self.basis[1:])]
        return np.column_stack(cols)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    names: tuple[str, ...] = ()
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = np.asarray(self.targets, dtype=float).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise InvalidArgument("inputs and targets must share the time index")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InvalidArgument("dataset contains non-finite entries")
        names = tuple(self.names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise InvalidArgument("one name per input column is required")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "names", names)

    def __len__(self):
        return self.targets.shape[0]

    def slice(self, start=None, stop=None) -> "Dataset":
        ts = None if self.timestamps is None else self.timestamps[start:stop]
        return Dataset(self.inputs[start:stop], self.targets[start:stop], self.names, ts)


@dataclass(frozen=True)
class GaussianBelief:
    """Gaussian over the coefficients of the columns listed in ``coalition``."""

    mean: np.ndarray
    covariance: np.ndarray
    coalition: tuple[int, ...] = ()
    precision: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).reshape(-1)
        s = np.asarray(self.covariance, dtype=float)
        if s.shape != (m.size, m.size):
            raise InvalidArgument("mean and covariance dimensions differ")
        coalition = tuple(self.coalition) or tuple(range(m.size))
        if len(coalition) != m.size:
            raise InvalidArgument("coalition size must match belief dimension")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", s)
        object.__setattr__(self, "coalition", coalition)

    @property
    def dim(self) -> int:
        return self.mean.size

    def precision_matrix(self) -> np.ndarray:
        if self.precision is not None:
            return self.precision
        return _symmetrize(np.linalg.inv(self.covariance))


@dataclass(frozen=True)
class PredictiveDistribution:
    """Univariate Gaussian predictive; fields may be scalars or equal-length arrays."""

    mean: float | np.ndarray
    precision: float | np.ndarray

    @property
    def variance(self):
        return 1.0 / self.precision


@dataclass(frozen=True)
class MLEFit:
    coef: np.ndarray
    rank: int
    underdetermined: bool


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _from_precision(precision, shift, coalition) -> GaussianBelief:
    precision = _symmetrize(precision)
    covariance = _symmetrize(np.linalg.inv(precision))
    mean = np.linalg.solve(precision, shift)
    return GaussianBelief(mean, covariance, coalition, precision)


def init_prior(dim: int, gamma: float = DEFAULT_PRIOR_PRECISION, coalition=()) -> GaussianBelief:
    """Zero-mean isotropic prior with covariance ``I / gamma``."""
    if int(dim) != dim or dim < 1:
        raise InvalidArgument("dim must be a positive integer")
    if not gamma > 0:
        raise InvalidArgument("gamma must be positive")
    dim = int(dim)
    return GaussianBelief(
        np.zeros(dim), np.eye(dim) / gamma, coalition, np.eye(dim) * gamma
    )


def flatten_prior(
    previous_posterior: GaussianBelief, original_prior: GaussianBelief, tau: float
) -> GaussianBelief:
    """Geometric mixture ``posterior**tau * prior**(1 - tau)``, renormalised.

    For Gaussians this is the precision-weighted combination of the two.
    """
    if previous_posterior.dim != original_prior.dim:
        raise InvalidArgument("beliefs have different dimensions")
    if not 0.0 <= tau <= 1.0:
        raise InvalidArgument("tau must lie in [0, 1]")
    if tau == 1.0:
        return previous_posterior
    if tau == 0.0:
        return original_prior
    lam_post = previous_posterior.precision_matrix()
    lam_prior = original_prior.precision_matrix()
    precision = tau * lam_post + (1.0 - tau) * lam_prior
    shift = tau * lam_post @ previous_posterior.mean + (1.0 - tau) * lam_prior @ original_prior.mean
    return _from_precision(precision, shift, previous_posterior.coalition)


def update_posterior(
    prior_t: GaussianBelief, basis_values, y: float, xi: float
) -> GaussianBelief:
    """Rank-one conjugate update with one observation ``(psi, y)``."""
    psi = np.asarray(basis_values, dtype=float).reshape(-1)
    if psi.size != prior_t.dim:
        raise InvalidArgument("basis_values dimension does not match the belief")
    if not (np.all(np.isfinite(psi)) and np.isfinite(y) and np.isfinite(xi)):
        raise InvalidArgument("non-finite input to posterior update")
    if not xi > 0:
        raise InvalidArgument("xi must be positive")
    lam = prior_t.precision_matrix()
    precision = lam + xi * np.outer(psi, psi)
    shift = lam @ prior_t.mean + xi * psi * y
    return _from_precision(precision, shift, prior_t.coalition)


def batch_posterior(design, targets, xi: float, prior: GaussianBelief) -> GaussianBelief:
    """Posterior after absorbing every row of ``design`` at once (no forgetting)."""
    psi = np.atleast_2d(np.asarray(design, dtype=float))
    y = np.asarray(targets, dtype=float).reshape(-1)
    lam = prior.precision_matrix()
    precision = lam + xi * psi.T @ psi
    shift = lam @ prior.mean + xi * psi.T @ y
    return _from_precision(precision, shift, prior.coalition)


def online_posteriors(design, targets, hypothesis: Hypothesis, coalition=()):
    """Yield the flattened-and-updated belief after each row of ``design``.

    Equivalent to alternating :func:`flatten_prior` and
    :func:`update_posterior`, starting from the original prior.
    """
    psi = np.atleast_2d(np.asarray(design, dtype=float))
    y = np.asarray(targets, dtype=float).reshape(-1)
    prior = init_prior(psi.shape[1], hypothesis.prior_precision, coalition)
    belief = prior
    for row, target in zip(psi, y):
        belief = update_posterior(
            flatten_prior(belief, prior, hypothesis.forgetting),
            row,
            target,
            hypothesis.noise_precision,
        )
        yield belief


def mle_fit(data: Dataset, coalition: Sequence[int], hypothesis: Hypothesis) -> MLEFit:
    """Least-squares coefficients for the design columns in ``coalition``.

    Underdetermined or rank-deficient systems get the minimum-norm solution.
    """
    psi = hypothesis.design_matrix(data.inputs)[:, list(coalition)]
    return _lstsq(psi, data.targets)


def _lstsq(psi, y) -> MLEFit:
    coef, _, rank, _ = np.linalg.lstsq(psi, y, rcond=None)
    return MLEFit(coef, int(rank), bool(rank < psi.shape[1]))


def weighted_mle(design, targets, weights) -> MLEFit:
    w = np.sqrt(np.asarray(weights, dtype=float))
    return _lstsq(np.asarray(design) * w[:, None], np.asarray(targets) * w)


def predictive(belief: GaussianBelief, basis_values, xi: float) -> PredictiveDistribution:
    """Posterior predictive at one row (1-D input) or many rows (2-D input)."""
    psi = np.asarray(basis_values, dtype=float)
    if psi.shape[-1] != belief.dim:
        raise InvalidArgument("basis_values dimension does not match the belief")
    mean = psi @ belief.mean
    quad = np.einsum("...i,ij,...j->...", psi, belief.covariance, psi)
    scale = np.einsum("...i,...i->...", psi, psi) * np.abs(belief.covariance).max()
    if np.any(quad < -1e-9 * np.maximum(scale, 1.0)):
        raise InvariantViolation("covariance is not positive semi-definite")
    quad = np.maximum(quad, 0.0)
    return PredictiveDistribution(mean, 1.0 / (1.0 / xi + quad))


def mle_predictive(theta_star, basis_values, xi: float) -> PredictiveDistribution:
    theta = np.asarray(theta_star, dtype=float).reshape(-1)
    psi = np.asarray(basis_values, dtype=float)
    if psi.shape[-1] != theta.size:
        raise InvalidArgument("basis_values dimension does not match theta")
    mean = psi @ theta
    return PredictiveDistribution(mean, np.full(np.shape(mean), float(xi))[()])


def kl_from_point_mass_proxy(belief: GaussianBelief, point) -> float:
    """Expected squared distance of the belief from ``point``.

    The KL divergence to an exact point mass is infinite; its finite proxy
    ``E||theta - point||^2 = tr(S) + ||m - point||^2`` vanishes exactly when
    the belief collapses onto the point.
    """
    diff = belief.mean - np.asarray(point, dtype=float)
    return float(np.trace(belief.covariance) + diff @ diff)
