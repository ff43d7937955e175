"""Monte Carlo experiment harness over the synthetic setups.

Every run draws one training set and one test set from a seed derived as
``master_seed + run_index``, fits every coalition once per model family and
clears each requested design in both stages. Reductions use exactly-rounded
sums and sorted samples, so they do not depend on the order in which runs
finish.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .allocation import MarketDesign
from .bayes import Hypothesis, online_posteriors
from .errors import ConfigurationError
from .market import (
    IN_SAMPLE,
    OUT_OF_SAMPLE,
    AgentRegistry,
    batch_cache,
    clear_cache,
)
from .scoring import RiskReport, risk_report
from .simulation import Nonstationarity, Setup, SetupSpec, generate, noisy_report


def default_registry(n_features: int) -> AgentRegistry:
    """Central agent owns ``x1``; every further input is sold by its own agent."""
    return AgentRegistry("c", (1,), {f"a{j}": (j,) for j in range(2, n_features + 1)})


@dataclass(frozen=True)
class ExperimentDescriptor:
    setups: tuple[str, ...] = ("baseline",)
    designs: tuple[str, ...] = ("mle_nll", "blr_nll", "blr_kl_m", "blr_kl_v")
    sample_sizes: tuple[int, ...] = (100,)
    runs: int = 100
    seed: int = 0
    true_w: tuple[float, ...] = (-0.1, 0.8, 0.7, -0.9)
    xi: float = 1.0
    gamma: float = 1e-6
    n_test: int = 1000
    lambda_in: float = 1.0
    lambda_out: float = 1.0
    alpha: float = 0.05
    sweep: tuple[float, ...] = ()
    sweep_coefficient: int = 2
    clip: float = 50.0

    def __post_init__(self):
        for name in ("setups", "designs", "sample_sizes", "true_w", "sweep"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.runs < 1:
            raise ConfigurationError("runs must be at least 1")
        if not self.sample_sizes or min(self.sample_sizes) < 1:
            raise ConfigurationError("sample sizes must be positive")
        if self.n_test < 0:
            raise ConfigurationError("n_test must be nonnegative")
        if not self.setups or not self.designs:
            raise ConfigurationError("at least one setup and one design are required")
        for s in self.setups:
            Setup.parse(s)
        for d in self.designs:
            MarketDesign.parse(d)
        if self.sweep and not 0 <= self.sweep_coefficient < len(self.true_w):
            raise ConfigurationError("sweep coefficient out of range")

    @property
    def sweep_values(self) -> tuple:
        return self.sweep or (None,)


@dataclass
class CellSamples:
    """Per-run outcomes of one (design, setup, N, sweep value, stage) cell."""

    pi_c: list = field(default_factory=list)
    revenue: dict = field(default_factory=dict)
    shapley: dict = field(default_factory=dict)
    nll_grand: list = field(default_factory=list)
    nll_central: list = field(default_factory=list)
    runs: list = field(default_factory=list)

    def add(self, run: int, row, grand, central):
        self.runs.append(run)
        self.pi_c.append(row.pi_c)
        for a, v in row.pi_a.items():
            self.revenue.setdefault(a, []).append(v)
        for f, v in row.expected_shapley.items():
            self.shapley.setdefault(f, []).append(v)
        self.nll_grand.append(row.objectives[grand])
        self.nll_central.append(row.objectives[central])

    def ordered(self) -> "CellSamples":
        """Samples sorted by run index."""
        idx = np.argsort(self.runs, kind="stable")
        pick = lambda xs: [xs[i] for i in idx]
        return CellSamples(
            pick(self.pi_c),
            {a: pick(v) for a, v in self.revenue.items()},
            {f: pick(v) for f, v in self.shapley.items()},
            pick(self.nll_grand),
            pick(self.nll_central),
            pick(self.runs),
        )

    def gap(self) -> np.ndarray:
        total = np.zeros(len(self.pi_c))
        for a in sorted(self.revenue):
            total = total + np.asarray(self.revenue[a])
        return np.asarray(self.pi_c) - total


def _fsum_mean(x) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    return math.fsum(x) / x.size if x.size else math.nan


@dataclass(frozen=True)
class CellSummary:
    n_runs: int
    pi_c: float
    gap: float
    nll_grand: float
    nll_central: float
    shapley: dict
    revenue: dict
    risk: dict


@dataclass
class MonteCarloReport:
    descriptor: ExperimentDescriptor
    cells: dict = field(default_factory=dict)

    @property
    def n_runs(self) -> int:
        return self.descriptor.runs

    def cell(self, design, setup, n, stage, sweep=None) -> CellSamples:
        key = (MarketDesign.parse(design), Setup.parse(setup), int(n), sweep, stage)
        return self.cells[key]

    def summary(self, design, setup, n, stage, sweep=None, level=0.95) -> CellSummary:
        c = self.cell(design, setup, n, stage, sweep)
        alpha = self.descriptor.alpha
        risk = {a: risk_report(v, alpha, level) for a, v in sorted(c.revenue.items())}
        return CellSummary(
            n_runs=len(c.runs),
            pi_c=_fsum_mean(c.pi_c),
            gap=_fsum_mean(c.gap()),
            nll_grand=_fsum_mean(c.nll_grand),
            nll_central=_fsum_mean(c.nll_central),
            shapley={f: _fsum_mean(v) for f, v in sorted(c.shapley.items())},
            revenue={a: _fsum_mean(v) for a, v in sorted(c.revenue.items())},
            risk=risk,
        )

    def rows(self, level=0.95):
        """Tidy records, one per (cell, agent or feature, statistic)."""
        out = []
        for key in sorted(self.cells, key=_cell_sort_key):
            design, setup, n, sweep, stage = key
            s = self.summary(design, setup, n, stage, sweep, level)
            base = dict(design=design.value, setup=setup.value, n=n,
                        sweep="" if sweep is None else sweep, stage=stage, runs=s.n_runs)
            out.append(dict(base, quantity="pi_c", name="", value=s.pi_c))
            out.append(dict(base, quantity="gap", name="", value=s.gap))
            out.append(dict(base, quantity="nll_grand", name="", value=s.nll_grand))
            out.append(dict(base, quantity="nll_central", name="", value=s.nll_central))
            for f, v in s.shapley.items():
                out.append(dict(base, quantity="expected_shapley", name=f"x{f}", value=v))
            for a, v in s.revenue.items():
                r: RiskReport = s.risk[a]
                out.append(dict(base, quantity="expected_revenue", name=a, value=v))
                out.append(dict(base, quantity="expected_shortfall", name=a,
                                value=r.expected_shortfall))
                out.append(dict(base, quantity="ev_ci_low", name=a, value=r.confidence_interval[0]))
                out.append(dict(base, quantity="ev_ci_high", name=a, value=r.confidence_interval[1]))
                out.append(dict(base, quantity="es_ci_low", name=a, value=r.shortfall_interval[0]))
                out.append(dict(base, quantity="es_ci_high", name=a, value=r.shortfall_interval[1]))
        return out


def _cell_sort_key(key):
    design, setup, n, sweep, stage = key
    return (design.value, setup.value, n, -math.inf if sweep is None else sweep, stage)


def _true_w(desc: ExperimentDescriptor, sweep) -> tuple:
    w = list(desc.true_w)
    if sweep is not None:
        w[desc.sweep_coefficient] = float(sweep)
    return tuple(w)


def run_unit(desc: ExperimentDescriptor, setup, n: int, sweep, run: int) -> dict:
    """One seeded market run; returns ``{(design, stage): LedgerRow}``."""
    spec = SetupSpec(setup, _true_w(desc, sweep), desc.xi, n + desc.n_test,
                     seed=desc.seed + run, clip=desc.clip)
    data = generate(spec)
    train, test = data.slice(None, n), data.slice(n, None)
    p = spec.n_features
    hyp = Hypothesis.linear(p, noise_precision=desc.xi, prior_precision=desc.gamma)
    registry = default_registry(p)
    designs = [MarketDesign.parse(d) for d in desc.designs]
    caches = {}
    out = {}
    for design in designs:
        kind = "blr" if design.bayesian else "mle"
        for stage, lam in ((IN_SAMPLE, desc.lambda_in), (OUT_OF_SAMPLE, desc.lambda_out)):
            if stage == OUT_OF_SAMPLE and not len(test):
                continue
            if (kind, stage) not in caches:
                evaluate = train if stage == IN_SAMPLE else test
                caches[kind, stage] = batch_cache(train, evaluate, registry, hyp, kind)
            out[design, stage] = clear_cache(design, caches[kind, stage], registry, lam, stage, n)
    return out


def _unit_task(args):
    desc, setup, n, sweep, run = args
    return args[1:], run_unit(desc, setup, n, sweep, run)


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)


def monte_carlo(desc: ExperimentDescriptor, jobs: int = 1) -> MonteCarloReport:
    units = [
        (desc, Setup.parse(s).value, n, sweep, run)
        for s in desc.setups
        for n in desc.sample_sizes
        for sweep in desc.sweep_values
        for run in range(desc.runs)
    ]
    if jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_unit_task, units, chunksize=max(1, len(units) // (4 * jobs))))
    else:
        results = [_unit_task(u) for u in units]
    return reduce_results(desc, results)


def reduce_results(desc: ExperimentDescriptor, results) -> MonteCarloReport:
    """Collect per-run ledgers into cells; the input order is irrelevant."""
    report = MonteCarloReport(desc)
    p = len(desc.true_w) - 1
    registry = default_registry(p)
    grand = registry.features
    central = registry.central_features
    for (setup, n, sweep, run), rows in results:
        for (design, stage), row in rows.items():
            key = (design, Setup.parse(setup), n, sweep, stage)
            report.cells.setdefault(key, CellSamples()).add(run, row, grand, central)
    for key, cell in report.cells.items():
        report.cells[key] = cell.ordered()
    return report


# ---------------------------------------------------------------------------
# calibration and convergence summaries


def calibration_table(report: MonteCarloReport):
    """Out-of-sample grand-coalition NLL of BLR against MLE, per setup and N."""
    out = []
    for setup in report.descriptor.setups:
        for n in report.descriptor.sample_sizes:
            mle = report.summary("mle_nll", setup, n, OUT_OF_SAMPLE).nll_grand
            blr = report.summary("blr_nll", setup, n, OUT_OF_SAMPLE).nll_grand
            out.append(dict(setup=Setup.parse(setup).value, n=n, nll_mle=mle, nll_blr=blr,
                            improvement=mle - blr,
                            improvement_pct=100.0 * (mle - blr) / abs(mle)))
    return out


# ---------------------------------------------------------------------------
# posterior traces and nonstationary tracking


def posterior_traces(spec: SetupSpec, gamma: float = 1e-6, forgetting: float = 1.0):
    """Posterior mean and standard deviation of every coefficient after each row."""
    data = generate(spec)
    hyp = Hypothesis.linear(spec.n_features, noise_precision=spec.xi, prior_precision=gamma,
                            forgetting=forgetting)
    psi = hyp.design_matrix(data.inputs)
    means, sds = [], []
    for belief in online_posteriors(psi, data.targets, hyp):
        means.append(belief.mean)
        sds.append(np.sqrt(np.diag(belief.covariance)))
    return np.array(means), np.array(sds)


def online_means_batched(psi, targets, hypothesis: Hypothesis) -> np.ndarray:
    """Grand-coalition posterior means after every row, for a batch of runs.

    ``psi`` has shape ``(R, T, d)`` and ``targets`` ``(R, T)``. Same recursion
    as :func:`online_posteriors` in information form, vectorised over runs.
    """
    psi = np.asarray(psi, dtype=float)
    y = np.asarray(targets, dtype=float)
    r, t_len, d = psi.shape
    tau, xi, gamma = hypothesis.forgetting, hypothesis.noise_precision, hypothesis.prior_precision
    prior = gamma * np.eye(d)
    lam = np.broadcast_to(prior, (r, d, d)).copy()
    eta = np.zeros((r, d))
    out = np.empty((r, t_len, d))
    for t in range(t_len):
        row = psi[:, t, :]
        if tau != 1.0:
            lam = tau * lam + (1.0 - tau) * prior
            eta = tau * eta
        lam = lam + xi * row[:, :, None] * row[:, None, :]
        eta = eta + xi * row * y[:, t, None]
        out[:, t, :] = np.linalg.solve(lam, eta[:, :, None])[:, :, 0]
    return out


@dataclass(frozen=True)
class TrackingResult:
    taus: tuple[float, ...]
    mean_trace: dict
    true_path: np.ndarray
    mae_after_change: dict


def tracking_experiment(true_w=(0.0, -0.2, 0.1, 0.3), xi=0.98, n_steps=1000, change_at=500,
                        new_value=0.5, coefficient=2, taus=(0.94, 1.0), runs=200, seed=0,
                        window=100, gamma=1e-6) -> TrackingResult:
    """Posterior-mean tracking of a coefficient that jumps at ``change_at``."""
    shift = Nonstationarity("step", coefficient, new_value, change_at)
    specs = [SetupSpec("baseline", true_w, xi, n_steps, seed=seed + r, nonstationarity=shift)
             for r in range(runs)]
    data = [generate(s) for s in specs]
    path = _path(specs[0])
    p = len(true_w) - 1
    psi = np.stack([Hypothesis.linear(p).design_matrix(d.inputs) for d in data])
    y = np.stack([d.targets for d in data])
    traces, mae = {}, {}
    for tau in taus:
        hyp = Hypothesis.linear(p, noise_precision=xi, prior_precision=gamma, forgetting=tau)
        est = online_means_batched(psi, y, hyp)[:, :, coefficient]
        traces[tau] = est.mean(axis=0)
        err = np.abs(est[:, change_at:change_at + window] - path[change_at:change_at + window])
        mae[tau] = _fsum_mean(err.mean(axis=1))
    return TrackingResult(tuple(taus), traces, path, mae)


def _path(spec):
    from .simulation import coefficient_path

    return coefficient_path(spec)[:, spec.nonstationarity.coefficient]


# ---------------------------------------------------------------------------
# truthfulness


def truthfulness_experiment(true_w=(-0.11, 0.31, 0.08, 0.65), xi=1.23, n=500,
                            noise_stds=(0.0, 0.25, 0.5, 1.0), feature=2, runs=200, seed=0,
                            design="blr_nll", lam=1.0, gamma=1e-6) -> dict:
    """Mean in-sample revenue of the agent selling ``feature`` per injected noise level.

    Every noise level reuses the same data and the same standard-normal
    draws, scaled by the noise level.
    """
    design = MarketDesign.parse(design)
    p = len(true_w) - 1
    registry = default_registry(p)
    agent = registry.owner(feature)
    hyp = Hypothesis.linear(p, noise_precision=xi, prior_precision=gamma)
    kind = "blr" if design.bayesian else "mle"
    revenue = {s: [] for s in noise_stds}
    for r in range(runs):
        data = generate(SetupSpec("baseline", true_w, xi, n, seed=seed + r))
        for s in noise_stds:
            noisy = noisy_report(data, feature, s, seed=(seed, r))
            cache = batch_cache(noisy, noisy, registry, hyp, kind)
            row = clear_cache(design, cache, registry, lam, IN_SAMPLE, n)
            revenue[s].append(row.pi_a[agent])
    return {s: _fsum_mean(v) for s, v in revenue.items()}


# ---------------------------------------------------------------------------
# preset descriptors


PRESETS = {
    "calibration": ExperimentDescriptor(
        setups=tuple(s.value for s in Setup), designs=("mle_nll", "blr_nll"),
        sample_sizes=(10, 100, 1000), runs=200, true_w=(-0.1, 0.3, 0.8, -0.4), xi=0.5,
    ),
    "convergence": ExperimentDescriptor(
        sample_sizes=(8, 32, 128, 512, 1024), runs=200, true_w=(-0.1, 0.8, 0.7, -0.9),
        xi=1.0, n_test=0,
    ),
    "risk": ExperimentDescriptor(
        setups=tuple(s.value for s in Setup), designs=("blr_nll", "blr_kl_m", "blr_kl_v"),
        sample_sizes=(1000,), runs=500, true_w=(0.1, -0.5, 0.0, 0.7), xi=0.67,
        lambda_in=0.03, lambda_out=0.03,
    ),
}


def preset(name: str, **overrides) -> ExperimentDescriptor:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown experiment {name!r}") from None
    return replace(base, **overrides)
