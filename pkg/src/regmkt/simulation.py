"""Synthetic data generators and statistical side-experiments."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .bayes import Dataset, Hypothesis, mle_fit
from .errors import InvalidArgument


class Setup(enum.Enum):
    BASELINE = "baseline"
    INTERPOLANT = "interpolant"
    NOISE = "noise"
    HETEROSKEDASTICITY = "heteroskedasticity"

    @classmethod
    def parse(cls, name) -> "Setup":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        for setup in cls:
            if key in (setup.value, setup.name.lower()):
                return setup
        raise InvalidArgument(f"unknown setup {name!r}")


@dataclass(frozen=True)
class Nonstationarity:
    """Time variation of one true coefficient.

    ``kind="drift"`` moves the coefficient linearly to ``value`` by the last
    step; ``kind="step"`` jumps to ``value`` at row ``at`` (default: halfway).
    """

    kind: str = "step"
    coefficient: int = 2
    value: float = 0.0
    at: int | None = None

    def __post_init__(self):
        if self.kind not in ("drift", "step"):
            raise InvalidArgument(f"unknown nonstationarity {self.kind!r}")


@dataclass(frozen=True)
class SetupSpec:
    kind: Setup
    true_w: tuple[float, ...]
    xi: float
    n_samples: int
    seed: int = 0
    nonstationarity: Nonstationarity | None = None
    clip: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Setup.parse(self.kind))
        object.__setattr__(self, "true_w", tuple(float(w) for w in self.true_w))
        if len(self.true_w) < 2:
            raise InvalidArgument("true_w needs the dummy coefficient and at least one feature")
        if not self.xi > 0:
            raise InvalidArgument("xi must be positive")
        if self.n_samples < 0:
            raise InvalidArgument("n_samples must be nonnegative")
        ns = self.nonstationarity
        if ns is not None and not 0 <= ns.coefficient < len(self.true_w):
            raise InvalidArgument("nonstationary coefficient index out of range")

    @property
    def n_features(self) -> int:
        return len(self.true_w) - 1


def coefficient_path(spec: SetupSpec) -> np.ndarray:
    """True coefficients at every row, shape ``(n_samples, len(true_w))``."""
    n = spec.n_samples
    w = np.tile(np.asarray(spec.true_w), (n, 1))
    ns = spec.nonstationarity
    if ns is None or n == 0:
        return w
    start = spec.true_w[ns.coefficient]
    if ns.kind == "drift":
        w[:, ns.coefficient] = np.linspace(start, ns.value, n)
    else:
        at = n // 2 if ns.at is None else ns.at
        w[at:, ns.coefficient] = ns.value
    return w


def generate(spec: SetupSpec) -> Dataset:
    """Draw i.i.d. standard-normal features and a target under ``spec.kind``."""
    rng = np.random.default_rng(spec.seed)
    n, p = spec.n_samples, spec.n_features
    x = rng.standard_normal((n, p))
    w = coefficient_path(spec)
    basis = np.column_stack([np.ones(n), x])
    if spec.kind is not Setup.BASELINE:
        basis = basis * basis
    signal = np.einsum("ij,ij->i", basis, w)
    scale = 1.0 / math.sqrt(spec.xi)
    if spec.kind in (Setup.BASELINE, Setup.INTERPOLANT):
        noise = rng.standard_normal(n) * scale
    else:
        limit = spec.clip * scale
        noise = np.clip(rng.standard_t(2, n) * scale, -limit, limit)
        if spec.kind is Setup.HETEROSKEDASTICITY:
            if p < 2:
                raise InvalidArgument("heteroskedastic setup needs at least two features")
            noise = noise * x[:, 1] ** 2
    return Dataset(x, signal + noise)


def noisy_report(data: Dataset, feature: int, noise_std: float, seed=0) -> Dataset:
    """Add centred Gaussian noise to design column ``feature`` (input column ``feature - 1``)."""
    if noise_std < 0:
        raise InvalidArgument("noise_std must be nonnegative")
    if not 1 <= feature <= data.inputs.shape[1]:
        raise InvalidArgument(f"feature {feature} is not an input column")
    if noise_std == 0:
        return data
    x = data.inputs.copy()
    rng = np.random.default_rng(seed)
    x[:, feature - 1] += noise_std * rng.standard_normal(x.shape[0])
    return Dataset(x, data.targets, data.names, data.timestamps)


def ridge_oracle(data: Dataset, coalition, noise_covariance, hypothesis: Hypothesis | None = None) -> np.ndarray:
    """Minimiser of the in-sample squared error plus ``N * w' Sigma w``.

    ``Sigma`` is the (diagonal) covariance of reporting noise on the
    coalition's columns; the penalty is summed over the ``N`` rows, which is
    the expected extra squared error that noise of that covariance induces.
    """
    hypothesis = hypothesis or Hypothesis.linear(data.inputs.shape[1])
    cols = list(coalition)
    psi = hypothesis.design_matrix(data.inputs)[:, cols]
    sigma = np.asarray(noise_covariance, dtype=float)
    if sigma.ndim == 1:
        sigma = np.diag(sigma)
    if sigma.shape != (len(cols), len(cols)):
        raise InvalidArgument("noise covariance must match the coalition size")
    if np.any(sigma != np.diag(np.diag(sigma))) or np.any(np.diag(sigma) < 0):
        raise InvalidArgument("noise covariance must be diagonal and nonnegative")
    gram = psi.T @ psi + psi.shape[0] * sigma
    return np.linalg.pinv(gram) @ psi.T @ data.targets


def mean_noisy_fit(data: Dataset, coalition, feature: int, noise_std: float,
                   replications: int, seed=0, hypothesis=None):
    """Mean and standard error of MLE fits over noisy replications of one feature."""
    hypothesis = hypothesis or Hypothesis.linear(data.inputs.shape[1])
    fits = np.array([
        mle_fit(noisy_report(data, feature, noise_std, (seed, r)), coalition, hypothesis).coef
        for r in range(replications)
    ])
    return fits.mean(axis=0), fits.std(axis=0, ddof=1) / math.sqrt(replications)


@dataclass(frozen=True)
class MomentReport:
    empirical_mean: float
    empirical_variance: float
    theoretical_mean: float
    theoretical_variance: float
    z_mean: float
    z_variance: float
    n: int

    def passes(self, z: float = 3.0) -> bool:
        return abs(self.z_variance) <= z


def shapley_moments(w_mean: float, w_var: float, x_var: float) -> tuple[float, float]:
    """Mean and variance of ``phi = w**2 * x_var`` for ``w ~ N(w_mean, w_var)``."""
    mean = (w_mean**2 + w_var) * x_var
    var = 2.0 * w_var * (2.0 * w_mean**2 + w_var) * x_var**2
    return mean, var


def sample_shapley(w_mean: float, w_var: float, x_var: float, n: int, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    w = w_mean + math.sqrt(w_var) * rng.standard_normal(n)
    return w * w * x_var


def shapley_moment_check(w_mean: float, w_var: float, x_var: float, empirical_samples) -> MomentReport:
    """Compare sample moments of Shapley draws with their closed forms.

    The variance comparison is the primary check; its standard error uses
    the sample fourth central moment.
    """
    if not w_var > 0 or not x_var > 0:
        raise InvalidArgument("variances must be positive")
    s = np.asarray(empirical_samples, dtype=float)
    n = s.size
    mean_t, var_t = shapley_moments(w_mean, w_var, x_var)
    mean_e = s.mean()
    centred = s - mean_e
    var_e = centred.var(ddof=1)
    m4 = np.mean(centred**4)
    se_mean = math.sqrt(var_e / n)
    se_var = math.sqrt(max(m4 - var_e**2, 0.0) / n)
    z_mean = (mean_e - mean_t) / se_mean if se_mean > 0 else 0.0
    z_var = (var_e - var_t) / se_var if se_var > 0 else 0.0
    return MomentReport(mean_e, var_e, mean_t, var_t, z_mean, z_var, n)
