"""Market orchestration: agent registry, feature selection and clearing.

Two clearing modes share the allocation machinery:

* batch clearing fits every coalition once on a training set and scores a
  set of evaluation rows (the training rows themselves for the in-sample
  stage, fresh rows for the out-of-sample stage); expectations are sample
  means over the scored rows.
* online clearing replays a time-ordered dataset one arrival at a time. At
  each arrival the forecast made from the previous posterior is cleared
  out-of-sample, then the posteriors absorb the new row (with likelihood
  flattening) and the in-sample stage is cleared. Expectations follow the
  exponential-forgetting recursion.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import allocation as alloc
from .allocation import CoalitionModelCache, CoalitionRecord, MarketDesign, ShapleyVector
from .bayes import (
    Dataset,
    Hypothesis,
    batch_posterior,
    flatten_prior,
    init_prior,
    mle_predictive,
    predictive,
    update_posterior,
    _lstsq,
)
from .errors import ConfigurationError, InvalidArgument, SequencingError
from .scoring import RecursiveEstimate, nll, recursive_update

log = logging.getLogger(__name__)

IN_SAMPLE = "in"
OUT_OF_SAMPLE = "out"
STAGES = (IN_SAMPLE, OUT_OF_SAMPLE)


@dataclass(frozen=True)
class AgentRegistry:
    """Ownership of design-matrix columns; column 0 (the dummy) is central."""

    central: str
    central_features: tuple[int, ...]
    supports: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        central = tuple(sorted(set(self.central_features) | {0}))
        supports = {a: tuple(sorted(f)) for a, f in self.supports.items()}
        object.__setattr__(self, "central_features", central)
        object.__setattr__(self, "supports", supports)
        seen = set(central)
        for agent, feats in supports.items():
            if agent == self.central:
                raise ConfigurationError("the central agent cannot also be a support agent")
            if seen & set(feats):
                raise ConfigurationError(f"agent {agent!r} owns an already-owned feature")
            seen |= set(feats)

    @property
    def support_features(self) -> tuple[int, ...]:
        return tuple(sorted(f for feats in self.supports.values() for f in feats))

    @property
    def features(self) -> tuple[int, ...]:
        return tuple(sorted(self.central_features + self.support_features))

    @property
    def agents(self) -> tuple[str, ...]:
        return tuple(self.supports)

    def owner(self, feature: int) -> str:
        if feature in self.central_features:
            return self.central
        for agent, feats in self.supports.items():
            if feature in feats:
                return agent
        raise ConfigurationError(f"feature {feature} has no owner")

    def validate(self, n_columns: int):
        bad = [f for f in self.features if not 0 <= f < n_columns]
        if bad:
            raise ConfigurationError(f"features {bad} are outside the design matrix")

    def without(self, features) -> "AgentRegistry":
        drop = set(features)
        if drop & set(self.central_features):
            raise ConfigurationError("central-agent features cannot be removed")
        supports = {}
        for agent, feats in self.supports.items():
            kept = tuple(f for f in feats if f not in drop)
            if kept:
                supports[agent] = kept
        return AgentRegistry(self.central, self.central_features, supports)


@dataclass(frozen=True)
class MarketConfig:
    design: MarketDesign
    hypothesis: Hypothesis
    lambda_in: float = 0.0
    lambda_out: float = 0.0
    alpha: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "design", MarketDesign.parse(self.design))
        if self.lambda_in < 0 or self.lambda_out < 0:
            raise ConfigurationError("bids must be nonnegative")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")

    @property
    def tau(self) -> float:
        return self.hypothesis.forgetting

    def bid(self, stage: str) -> float:
        return self.lambda_in if stage == IN_SAMPLE else self.lambda_out


@dataclass(frozen=True)
class LedgerRow:
    t: int
    stage: str
    design: MarketDesign
    pi_c: float
    pi_a: dict[str, float]
    expected_shapley: dict[int, float]
    objectives: dict[tuple[int, ...], float]
    shapley: dict[int, float] = field(default_factory=dict)


@dataclass
class ClearingResult:
    design: MarketDesign
    registry: AgentRegistry
    rows: list[LedgerRow] = field(default_factory=list)
    predictions: dict[str, dict] = field(default_factory=dict)
    state: "MarketState | None" = field(default=None, repr=False)

    def stage_rows(self, stage: str) -> list[LedgerRow]:
        return [r for r in self.rows if r.stage == stage]

    def cumulative_revenues(self, stage: str | None = None) -> dict[str, float]:
        rows = self.rows if stage is None else self.stage_rows(stage)
        return {
            a: math.fsum(r.pi_a.get(a, 0.0) for r in rows) for a in self.registry.agents
        }

    def cumulative_payment(self, stage: str | None = None) -> float:
        rows = self.rows if stage is None else self.stage_rows(stage)
        return math.fsum(r.pi_c for r in rows)


# ---------------------------------------------------------------------------
# batch clearing


def batch_cache(
    train: Dataset,
    evaluate: Dataset,
    registry: AgentRegistry,
    hypothesis: Hypothesis,
    kind: str = "blr",
) -> CoalitionModelCache:
    """Fit every coalition on ``train`` and record predictives on ``evaluate``."""
    psi_train = hypothesis.design_matrix(train.inputs)
    psi_eval = hypothesis.design_matrix(evaluate.inputs)
    registry.validate(psi_train.shape[1])
    cache = CoalitionModelCache(
        registry.central_features, registry.support_features, evaluate.targets, kind=kind
    )
    xi = hypothesis.noise_precision
    for mask in range(1 << cache.k):
        cols = list(cache.members(mask))
        if kind == "blr":
            prior = init_prior(len(cols), hypothesis.prior_precision, cols)
            model = batch_posterior(psi_train[:, cols], train.targets, xi, prior)
            pred = predictive(model, psi_eval[:, cols], xi)
        elif kind == "mle":
            model = _lstsq(psi_train[:, cols], train.targets)
            pred = mle_predictive(model.coef, psi_eval[:, cols], xi)
        else:
            raise InvalidArgument(f"unknown cache kind {kind!r}")
        cache.add(mask, CoalitionRecord(tuple(cols), model, np.atleast_1d(pred.mean),
                                        np.atleast_1d(pred.precision)))
    return cache


def _objectives(cache: CoalitionModelCache, t=None) -> dict[tuple[int, ...], float]:
    return {
        rec.coalition: cache.expectation(nll(rec.predictive, cache.targets), t)
        for _, rec in sorted(cache.records.items())
    }


def clear_cache(design, cache: CoalitionModelCache, registry: AgentRegistry, lam: float,
                stage: str, t: int) -> LedgerRow:
    """Clear a whole cache at once; expectations are formed per ``cache.tau``."""
    design = MarketDesign.parse(design)
    vec = alloc.expected_shapley(design, None, cache)
    return LedgerRow(
        t=t,
        stage=stage,
        design=design,
        pi_c=alloc.central_payment(design, lam, None, cache),
        pi_a=alloc.agent_revenues(vec, registry, lam),
        expected_shapley=vec.as_dict(),
        objectives=_objectives(cache),
        shapley=dict(zip(vec.features, map(float, vec.values))),
    )


def clear_market(train: Dataset, test: Dataset | None, config: MarketConfig,
                 registry: AgentRegistry) -> ClearingResult:
    """Batch (``tau = 1``) two-stage clearing on a training and a test set."""
    kind = "blr" if config.design.bayesian else "mle"
    result = ClearingResult(config.design, registry)
    cache = batch_cache(train, train, registry, config.hypothesis, kind)
    result.rows.append(clear_cache(config.design, cache, registry, config.lambda_in,
                                   IN_SAMPLE, len(train)))
    if test is not None and len(test):
        cache = batch_cache(train, test, registry, config.hypothesis, kind)
        result.rows.append(clear_cache(config.design, cache, registry, config.lambda_out,
                                       OUT_OF_SAMPLE, len(train)))
    return result


# ---------------------------------------------------------------------------
# feature selection


def select_features(data: Dataset, registry: AgentRegistry, hypothesis: Hypothesis,
                    validation_fraction: float = 0.2, min_z: float = 1.645) -> AgentRegistry:
    """Drop support features that do not help the grand coalition on held-out data.

    The trailing ``validation_fraction`` of rows is held out. A feature is
    kept when the mean NLL reduction it brings to the grand coalition on the
    held-out rows is positive by at least ``min_z`` standard errors.
    """
    if not 0.0 < validation_fraction <= 0.5:
        raise InvalidArgument("validation_fraction must lie in (0, 0.5]")
    if not registry.support_features:
        return registry
    n_val = max(1, int(round(validation_fraction * len(data))))
    head, tail = data.slice(None, len(data) - n_val), data.slice(len(data) - n_val, None)
    psi_head = hypothesis.design_matrix(head.inputs)
    psi_tail = hypothesis.design_matrix(tail.inputs)
    xi = hypothesis.noise_precision

    def tail_nll(cols):
        prior = init_prior(len(cols), hypothesis.prior_precision, cols)
        post = batch_posterior(psi_head[:, cols], head.targets, xi, prior)
        return nll(predictive(post, psi_tail[:, cols], xi), tail.targets)

    grand = list(registry.features)
    base = tail_nll(grand)
    dropped = []
    for f in registry.support_features:
        diff = np.atleast_1d(tail_nll([c for c in grand if c != f]) - base)
        se = diff.std(ddof=1) / math.sqrt(diff.size) if diff.size > 1 else 0.0
        if not diff.mean() - min_z * se > 0.0:
            dropped.append(f)
    if dropped:
        log.info("feature selection removed %s", dropped)
    pruned = registry.without(dropped)
    if not pruned.support_features:
        log.warning("all support features pruned; the market clears with zero payments")
    return pruned


# ---------------------------------------------------------------------------
# online clearing


@dataclass
class _StageState:
    objectives: dict[int, RecursiveEstimate]
    block: RecursiveEstimate
    shapley: ShapleyVector | None = None
    last_t: int = -1
    log_t: list = field(default_factory=list)
    log_mean: list = field(default_factory=list)
    log_precision: list = field(default_factory=list)
    log_y: list = field(default_factory=list)


class MarketState:
    """Mutable state of an online market over one dataset.

    Every coalition keeps one posterior (or weighted least-squares fit for the
    frequentist design), shared by both stages; each stage keeps its own
    recursions and ledger.
    """

    def __init__(self, data: Dataset, config: MarketConfig, registry: AgentRegistry):
        self.data = data
        self.config = config
        self.registry = registry
        self.hypothesis = config.hypothesis
        self.design = config.design
        self.psi = self.hypothesis.design_matrix(data.inputs) if len(data) else np.zeros((0, self.hypothesis.dim))
        registry.validate(self.hypothesis.dim)
        self.central = registry.central_features
        self.support = registry.support_features
        self.k = len(self.support)
        if self.k > alloc.MAX_ENUMERATION:
            raise alloc.CapacityError(f"{self.k} support features exceed the enumeration cap")
        self._template = CoalitionModelCache(self.central, self.support, np.zeros(0))
        self.columns = {m: list(self._template.members(m)) for m in range(1 << self.k)}
        tau = config.tau
        if self.design.bayesian:
            self.priors = {
                m: init_prior(len(c), self.hypothesis.prior_precision, c)
                for m, c in self.columns.items()
            }
            self.models = dict(self.priors)
        else:
            self.models = {
                m: (np.zeros((len(c), len(c))), np.zeros(len(c))) for m, c in self.columns.items()
            }
        self.fitted = 0
        self.stages = {
            s: _StageState({m: RecursiveEstimate(tau) for m in self.columns}, RecursiveEstimate(tau))
            for s in STAGES
        }

    def _absorb(self, t: int):
        xi = self.hypothesis.noise_precision
        tau = self.config.tau
        row, y = self.psi[t], self.data.targets[t]
        for m, cols in self.columns.items():
            if self.design.bayesian:
                prior = flatten_prior(self.models[m], self.priors[m], tau)
                self.models[m] = update_posterior(prior, row[cols], y, xi)
            else:
                a, b = self.models[m]
                psi = row[cols]
                self.models[m] = (tau * a + np.outer(psi, psi), tau * b + psi * y)
        self.fitted = t + 1

    def _predict(self, t: int):
        xi = self.hypothesis.noise_precision
        row = self.psi[t]
        means = np.empty(1 << self.k)
        precisions = np.empty(1 << self.k)
        models = {}
        for m, cols in self.columns.items():
            if self.design.bayesian:
                model = self.models[m]
                pred = predictive(model, row[cols], xi)
            else:
                a, b = self.models[m]
                model = _lstsq(a, b) if self.fitted else _lstsq(np.eye(len(cols)), np.zeros(len(cols)))
                pred = mle_predictive(model.coef, row[cols], xi)
            models[m] = model
            means[m], precisions[m] = pred.mean, pred.precision
        return means, precisions, models


def _step_cache(state_like, means, precisions, y, kind, models=None) -> CoalitionModelCache:
    cache = CoalitionModelCache(state_like.central, state_like.support, np.array([y]), kind=kind)
    for m, cols in state_like.columns.items():
        model = None if models is None else models[m]
        cache.add(m, CoalitionRecord(tuple(cols), model, np.array([means[m]]),
                                     np.array([precisions[m]])))
    return cache


def _allocate_step(design, cache, stage_state: _StageState, registry, lam, stage, t) -> LedgerRow:
    objectives = {}
    for m, rec in sorted(cache.records.items()):
        est = recursive_update(stage_state.objectives[m], float(nll(rec.predictive, cache.targets)[0]))
        stage_state.objectives[m] = est
        objectives[rec.coalition] = est.value
    block = float(alloc._block_series(design, cache)[0]) if cache.k else 0.0
    stage_state.block = recursive_update(stage_state.block, block)
    phi = alloc.shapley_series(design, cache)[:, 0]
    current = ShapleyVector(cache.support, phi, phi)
    stage_state.shapley = alloc.update_expected_shapley(stage_state.shapley, current,
                                                        stage_state.block.forgetting)
    vec = stage_state.shapley
    return LedgerRow(
        t=t,
        stage=stage,
        design=design,
        pi_c=lam * stage_state.block.value if lam else 0.0,
        pi_a=alloc.agent_revenues(vec, registry, lam),
        expected_shapley=vec.as_dict(),
        objectives=objectives,
        shapley=dict(zip(vec.features, map(float, vec.values))),
    )


def clear_step(stage: str, t: int, state: MarketState) -> LedgerRow | None:
    """Clear one stage for arrival ``t`` (0-based).

    The out-of-sample stage for ``t`` must run before the posteriors absorb
    row ``t``; it is skipped (returns ``None``) for ``t = 0`` where no forecast
    exists yet.
    """
    if stage not in STAGES:
        raise InvalidArgument(f"unknown stage {stage!r}")
    if not 0 <= t < len(state.data):
        raise SequencingError(f"time index {t} outside the data")
    st = state.stages[stage]
    if t <= st.last_t:
        raise SequencingError(f"{stage}-sample step {t} already cleared")
    if stage == OUT_OF_SAMPLE:
        if state.fitted != t:
            raise SequencingError("out-of-sample clearing needs the posterior frozen at t-1")
        if t == 0:
            st.last_t = t
            return None
    else:
        if state.fitted != t:
            raise SequencingError(f"in-sample step {t} is out of order (next is {state.fitted})")
        state._absorb(t)
    means, precisions, models = state._predict(t)
    y = float(state.data.targets[t])
    st.last_t = t
    st.log_t.append(t)
    st.log_mean.append(means)
    st.log_precision.append(precisions)
    st.log_y.append(y)
    kind = "blr" if state.design.bayesian else "mle"
    cache = _step_cache(state, means, precisions, y, kind, models)
    return _allocate_step(state.design, cache, st, state.registry, state.config.bid(stage), stage, t)


def run_online(data: Dataset, config: MarketConfig, registry: AgentRegistry) -> ClearingResult:
    state = MarketState(data, config, registry)
    result = ClearingResult(config.design, registry)
    for t in range(len(data)):
        for stage in (OUT_OF_SAMPLE, IN_SAMPLE):
            row = clear_step(stage, t, state)
            if row is not None:
                result.rows.append(row)
    for stage, st in state.stages.items():
        n = 1 << state.k
        result.predictions[stage] = {
            "t": np.array(st.log_t, dtype=int),
            "mean": np.array(st.log_mean).reshape(-1, n),
            "precision": np.array(st.log_precision).reshape(-1, n),
            "y": np.array(st.log_y),
        }
    result.state = state
    return result


def rederive_ledger(result: ClearingResult, stage: str, config: MarketConfig) -> list[LedgerRow]:
    """Recompute one stage's ledger from the stored per-step predictions."""
    registry = result.registry
    log_ = result.predictions[stage]
    proto = MarketState(Dataset(np.zeros((0, config.hypothesis.dim - 1)), np.zeros(0)),
                        config, registry)
    st = _StageState({m: RecursiveEstimate(config.tau) for m in proto.columns},
                     RecursiveEstimate(config.tau))
    kind = "blr" if config.design.bayesian else "mle"
    rows = []
    for t, means, precisions, y in zip(log_["t"], log_["mean"], log_["precision"], log_["y"]):
        cache = _step_cache(proto, means, precisions, y, kind)
        rows.append(_allocate_step(config.design, cache, st, registry, config.bid(stage),
                                   stage, int(t)))
    return rows


def history_cache(result: ClearingResult, stage: str, config: MarketConfig) -> CoalitionModelCache:
    """Cache over every step cleared in ``stage``, with the recursion as expectation."""
    log_ = result.predictions[stage]
    registry = result.registry
    cache = CoalitionModelCache(registry.central_features, registry.support_features, log_["y"],
                                kind="blr" if config.design.bayesian else "mle", tau=config.tau)
    for m in range(1 << cache.k):
        cache.add(m, CoalitionRecord(cache.members(m), None, log_["mean"][:, m],
                                     log_["precision"][:, m]))
    return cache
