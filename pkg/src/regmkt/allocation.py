"""Coalition valuation, exact Shapley attribution and payments.

Coalitions are bitmasks over the ordered support features ``cache.support``;
bit ``j`` set means ``cache.support[j]`` is in the coalition. The central
agent's columns (including the dummy) are always part of every fitted model.

Sign convention: a positive marginal contribution is always beneficial to the
central agent, so helpful features earn positive revenue under every design.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .bayes import PredictiveDistribution
from .errors import (
    CapacityError,
    ConfigurationError,
    InvalidArgument,
    InvariantViolation,
    UnsupportedDesign,
)
from .scoring import gaussian_kl, nll, recursive_series

MAX_ENUMERATION = 20


class MarketDesign(enum.Enum):
    MLE_NLL = "mle_nll"
    BLR_NLL = "blr_nll"
    BLR_KL_M = "blr_kl_m"
    BLR_KL_V = "blr_kl_v"

    @property
    def bayesian(self) -> bool:
        return self is not MarketDesign.MLE_NLL

    @property
    def budget_balanced(self) -> bool:
        return self is not MarketDesign.BLR_KL_M

    @classmethod
    def parse(cls, name) -> "MarketDesign":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        for design in cls:
            if key in (design.value, design.name.lower()):
                return design
        raise InvalidArgument(f"unknown market design {name!r}")


@dataclass(frozen=True)
class CoalitionRecord:
    """One fitted coalition model and its predictives at the scored steps."""

    coalition: tuple[int, ...]
    model: object
    mean: np.ndarray
    precision: np.ndarray

    @property
    def predictive(self) -> PredictiveDistribution:
        return PredictiveDistribution(self.mean, self.precision)


@dataclass
class CoalitionModelCache:
    """Write-once table of coalition predictives over a run of scored steps.

    ``tau`` selects how expectations over steps are formed: ``None`` gives the
    cumulative sample mean (batch clearing), a number gives the exponential
    forgetting recursion seeded with the first value.
    """

    central: tuple[int, ...]
    support: tuple[int, ...]
    targets: np.ndarray
    records: dict[int, CoalitionRecord] = field(default_factory=dict)
    kind: str = "blr"
    tau: float | None = None

    def __post_init__(self):
        self.central = tuple(self.central)
        self.support = tuple(self.support)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if set(self.central) & set(self.support):
            raise InvalidArgument("central and support features overlap")

    @property
    def k(self) -> int:
        return len(self.support)

    @property
    def n_steps(self) -> int:
        return self.targets.size

    @property
    def grand_mask(self) -> int:
        return (1 << self.k) - 1

    def mask_of(self, coalition: Iterable[int]) -> int:
        mask = 0
        for i in coalition:
            if i in self.central:
                continue
            try:
                mask |= 1 << self.support.index(i)
            except ValueError:
                raise InvalidArgument(f"feature {i} is not a support feature") from None
        return mask

    def members(self, mask: int) -> tuple[int, ...]:
        """Full column set ``C'`` (central columns plus chosen support features)."""
        chosen = [f for j, f in enumerate(self.support) if mask >> j & 1]
        return tuple(sorted(self.central + tuple(chosen)))

    def bit(self, i: int) -> int:
        try:
            return 1 << self.support.index(i)
        except ValueError:
            raise InvalidArgument(f"feature {i} is not a support feature") from None

    def add(self, mask: int, record: CoalitionRecord):
        if mask in self.records:
            raise InvariantViolation(f"coalition {mask:b} already cached")
        if record.coalition != self.members(mask):
            raise InvariantViolation("record coalition does not match its mask")
        self.records[mask] = record

    def record(self, mask: int) -> CoalitionRecord:
        try:
            return self.records[mask]
        except KeyError:
            raise InvariantViolation(f"coalition {mask:b} missing from cache") from None

    def check_complete(self):
        missing = [m for m in range(1 << self.k) if m not in self.records]
        if missing:
            raise InvariantViolation(f"{len(missing)} coalitions missing from cache")

    def expectation(self, series, t: int | None = None) -> float:
        s = np.asarray(series, dtype=float)
        stop = s.size if t is None else t + 1
        if self.tau is None:
            return math.fsum(s[:stop]) / stop
        return float(recursive_series(s[:stop], self.tau)[-1])


@dataclass(frozen=True)
class ShapleyVector:
    features: tuple[int, ...]
    values: np.ndarray
    expected: np.ndarray

    def as_dict(self) -> dict[int, float]:
        return {f: float(v) for f, v in zip(self.features, self.expected)}


def _check_kind(design: MarketDesign, cache: CoalitionModelCache):
    wanted = "blr" if design.bayesian else "mle"
    if cache.kind != wanted:
        raise InvalidArgument(f"{design.name} needs a {wanted!r} cache, got {cache.kind!r}")


def _value_series(design: MarketDesign, mask: int, cache: CoalitionModelCache) -> np.ndarray:
    if design is MarketDesign.BLR_KL_M:
        raise UnsupportedDesign("BLR_KL_M values marginal contributions directly")
    pred = cache.record(mask).predictive
    if design is MarketDesign.BLR_KL_V:
        return np.asarray(gaussian_kl(pred, cache.record(0).predictive))
    return np.asarray(nll(pred, cache.targets))


def _marginal_series(design, i_bit: int, mask: int, cache, values=None) -> np.ndarray:
    if mask & i_bit:
        raise InvalidArgument("feature is already in the coalition")
    grown = mask | i_bit
    if design is MarketDesign.BLR_KL_M:
        return np.asarray(
            gaussian_kl(cache.record(grown).predictive, cache.record(mask).predictive)
        )
    if values is None:
        lo, hi = _value_series(design, mask, cache), _value_series(design, grown, cache)
    else:
        lo, hi = values[mask], values[grown]
    if design is MarketDesign.BLR_KL_V:
        return hi - lo
    return lo - hi


def _block_series(design: MarketDesign, cache: CoalitionModelCache) -> np.ndarray:
    """Per-step contribution of all support features added jointly."""
    grand = cache.grand_mask
    if design is MarketDesign.BLR_KL_M:
        return np.asarray(gaussian_kl(cache.record(grand).predictive, cache.record(0).predictive))
    lo, hi = _value_series(design, 0, cache), _value_series(design, grand, cache)
    return hi - lo if design is MarketDesign.BLR_KL_V else lo - hi


def per_step_value(design, coalition: Iterable[int], t: int, cache: CoalitionModelCache) -> float:
    design = MarketDesign.parse(design)
    _check_kind(design, cache)
    return float(_value_series(design, cache.mask_of(coalition), cache)[t])


def expected_value(design, coalition: Iterable[int], t, cache: CoalitionModelCache) -> float:
    design = MarketDesign.parse(design)
    _check_kind(design, cache)
    return cache.expectation(_value_series(design, cache.mask_of(coalition), cache), t)


def marginal_contribution(design, i: int, coalition: Iterable[int], t: int, cache) -> float:
    design = MarketDesign.parse(design)
    _check_kind(design, cache)
    mask = cache.mask_of(coalition)
    return float(_marginal_series(design, cache.bit(i), mask, cache)[t])


def shapley_weights(k: int) -> np.ndarray:
    """Weight of a coalition of size ``s`` (not containing ``i``) among ``k`` players."""
    return np.array(
        [math.factorial(s) * math.factorial(k - s - 1) / math.factorial(k) for s in range(k)]
    )


def shapley_series(design, cache: CoalitionModelCache, weights=None) -> np.ndarray:
    """Exact Shapley values for every support feature at every step, shape ``(k, T)``."""
    design = MarketDesign.parse(design)
    _check_kind(design, cache)
    k = cache.k
    if k > MAX_ENUMERATION:
        raise CapacityError(f"{k} support features exceed the enumeration cap {MAX_ENUMERATION}")
    cache.check_complete()
    w = shapley_weights(k) if weights is None else np.asarray(weights, dtype=float)
    values = None
    if design is not MarketDesign.BLR_KL_M:
        values = {m: _value_series(design, m, cache) for m in range(1 << k)}
    phi = np.zeros((k, cache.n_steps))
    for j in range(k):
        bit = 1 << j
        for mask in range(1 << k):
            if mask & bit:
                continue
            size = bin(mask).count("1")
            phi[j] += w[size] * _marginal_series(design, bit, mask, cache, values)
    return phi


def shapley(design, i: int, t: int, cache: CoalitionModelCache) -> float:
    j = cache.support.index(i) if i in cache.support else None
    if j is None:
        raise InvalidArgument(f"feature {i} is not a support feature")
    return float(shapley_series(design, cache)[j, t])


def permutation_shapley(design, cache: CoalitionModelCache) -> np.ndarray:
    """Brute-force Shapley values: average contribution over all join orders."""
    design = MarketDesign.parse(design)
    _check_kind(design, cache)
    k = cache.k
    total = np.zeros((k, cache.n_steps))
    seen = {}
    count = 0
    for order in itertools.permutations(range(k)):
        mask = 0
        for j in order:
            if (j, mask) not in seen:
                seen[j, mask] = _marginal_series(design, 1 << j, mask, cache)
            total[j] += seen[j, mask]
            mask |= 1 << j
        count += 1
    return total / max(count, 1)


def expected_shapley(design, t, cache: CoalitionModelCache, weights=None) -> ShapleyVector:
    phi = shapley_series(design, cache, weights)
    step = cache.n_steps - 1 if t is None else t
    expected = np.array([cache.expectation(row, t) for row in phi])
    return ShapleyVector(cache.support, phi[:, step].copy(), expected)


def update_expected_shapley(prev: ShapleyVector | None, current: ShapleyVector, tau: float) -> ShapleyVector:
    if prev is None:
        return ShapleyVector(current.features, current.values, np.array(current.values, dtype=float))
    if tuple(prev.features) != tuple(current.features):
        raise InvalidArgument("Shapley vectors cover different features")
    expected = (1.0 - tau) * current.values + tau * prev.expected
    return ShapleyVector(current.features, current.values, expected)


def central_payment(design, lam: float, t, cache: CoalitionModelCache) -> float:
    if lam < 0:
        raise InvalidArgument("lambda must be nonnegative")
    design = MarketDesign.parse(design)
    _check_kind(design, cache)
    if lam == 0:
        return 0.0
    return lam * cache.expectation(_block_series(design, cache), t)


def agent_revenues(shapley_expected: ShapleyVector, registry, lam: float) -> dict[str, float]:
    owner = {}
    for agent, feats in registry.supports.items():
        for f in feats:
            owner[f] = agent
    revenues = {agent: 0.0 for agent in registry.supports}
    for f, value in zip(shapley_expected.features, shapley_expected.expected):
        if f not in owner:
            raise ConfigurationError(f"feature {f} is not owned by any support agent")
        revenues[owner[f]] += lam * float(value)
    return revenues


def budget_gap(design, t, cache: CoalitionModelCache, registry, lam: float) -> float:
    pay = central_payment(design, lam, t, cache)
    revenues = agent_revenues(expected_shapley(design, t, cache), registry, lam)
    return pay - math.fsum(revenues.values())
