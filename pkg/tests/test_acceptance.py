"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the session summary.
"""

import math
import time

import numpy as np
from scipy import integrate, stats

from regmkt.allocation import MarketDesign, _marginal_series, permutation_shapley, shapley_series
from regmkt.bayes import Hypothesis
from regmkt.bayes import PredictiveDistribution as P
from regmkt.data_io import (
    ReplaySpec,
    build_lagged_dataset,
    ingest_csv,
    quarterly_summary,
    write_ledger,
)
from regmkt.experiments import (
    default_registry,
    monte_carlo,
    preset,
    tracking_experiment,
    truthfulness_experiment,
)
from regmkt.market import IN_SAMPLE, OUT_OF_SAMPLE, MarketConfig, batch_cache, run_online
from regmkt.scoring import expected_shortfall, gaussian_kl
from regmkt.simulation import (
    SetupSpec,
    generate,
    mean_noisy_fit,
    ridge_oracle,
    sample_shapley,
    shapley_moment_check,
)

from test_cli import toy_csv

BUDGET_BALANCED = (MarketDesign.MLE_NLL, MarketDesign.BLR_NLL, MarketDesign.BLR_KL_V)


def test_01_shapley_oracle_equivalence(criterion):
    start = time.perf_counter()
    worst = 0.0
    for inst in range(100):
        k = 1 + inst % 6
        w = np.random.default_rng(inst).uniform(-1, 1, k + 2)
        data = generate(SetupSpec("baseline", w, 1.0, 20, seed=inst))
        hyp = Hypothesis.linear(k + 1)
        reg = default_registry(k + 1)
        for design in MarketDesign:
            cache = batch_cache(data, data, reg, hyp, "blr" if design.bayesian else "mle")
            dev = np.abs(shapley_series(design, cache) - permutation_shapley(design, cache)).max()
            worst = max(worst, float(dev))
    elapsed = time.perf_counter() - start
    criterion(1, "Shapley oracle equivalence", worst <= 1e-12 and elapsed < 10,
              f"max dev {worst:.2e}, {elapsed:.1f}s")


def test_02_budget_balance(criterion):
    data = generate(SetupSpec("baseline", (-0.1, 0.8, 0.7, -0.9), 1.0, 1000, seed=0))
    hyp = Hypothesis.linear(3, forgetting=0.99)
    worst = 0.0
    for design in BUDGET_BALANCED:
        res = run_online(data, MarketConfig(design, hyp, 1.0, 1.0), default_registry(3))
        for row in res.rows:
            worst = max(worst, abs(row.pi_c - math.fsum(row.pi_a.values())) / max(1.0, abs(row.pi_c)))
    rep = monte_carlo(preset("convergence", runs=200, sample_sizes=(8, 10, 32, 128, 1024),
                             designs=("blr_kl_m",)))
    gaps = {n: rep.summary("blr_kl_m", "baseline", n, IN_SAMPLE).gap for n in (8, 10, 32, 128, 1024)}
    shrinking = all(gaps[a] > gaps[b] for a, b in zip((8, 32, 128), (32, 128, 1024)))
    ok = worst <= 1e-9 and gaps[10] > 0 and shrinking
    criterion(2, "Budget balance", ok,
              f"max rel gap {worst:.1e}; KL-M gaps " + ", ".join(f"N={n}: {g:.2e}" for n, g in gaps.items()))


def test_03_gibbs_nonnegativity(criterion):
    hyp = Hypothesis.linear(3)
    reg = default_registry(3)
    count, lowest = 0, math.inf
    run = 0
    while count < 100_000:
        w = np.random.default_rng(run).normal(0, 1, 4)
        data = generate(SetupSpec("baseline", w, 1.0, 50, seed=run))
        cache = batch_cache(data, data, reg, hyp)
        for j in range(cache.k):
            bit = 1 << j
            for mask in range(1 << cache.k):
                if not mask & bit:
                    m = _marginal_series(MarketDesign.BLR_KL_M, bit, mask, cache)
                    lowest = min(lowest, float(m.min()))
                    count += m.size
        lowest = min(lowest, float(shapley_series(MarketDesign.BLR_KL_M, cache).min()))
        run += 1
    criterion(3, "Gibbs nonnegativity", lowest >= -1e-12, f"{count} contributions, min {lowest:.2e}")


def test_04_convergence(criterion):
    start = time.perf_counter()
    rep = monte_carlo(preset("convergence", runs=200, sample_sizes=(2000,),
                             designs=("blr_nll", "blr_kl_m", "blr_kl_v")))
    nll_ = rep.summary("blr_nll", "baseline", 2000, IN_SAMPLE).shapley
    worst = 0.0
    for design in ("blr_kl_m", "blr_kl_v"):
        s = rep.summary(design, "baseline", 2000, IN_SAMPLE).shapley
        worst = max(worst, max(abs(s[f] - nll_[f]) / abs(nll_[f]) for f in s))
    elapsed = time.perf_counter() - start
    criterion(4, "Convergence of KL designs to NLL", worst <= 0.05 and elapsed < 180,
              f"max rel diff {worst:.2e}, {elapsed:.1f}s")


def test_05_gaussian_kl(criterion):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        mp, mq = rng.normal(0, 2, 2)
        sp, sq = np.exp(rng.uniform(-1, 1, 2))
        f = lambda x: stats.norm.pdf(x, mp, sp) * (stats.norm.logpdf(x, mp, sp) - stats.norm.logpdf(x, mq, sq))
        ref, _ = integrate.quad(f, mp - 30 * sp, mp + 30 * sp, epsabs=1e-13, epsrel=1e-12, limit=400)
        worst = max(worst, abs(gaussian_kl(P(mp, sp**-2), P(mq, sq**-2)) - ref))
    ident = 0.0
    for _ in range(1000):
        xi = rng.uniform(0.01, 100)
        d = rng.normal(0, 3)
        kl = gaussian_kl(P(d, xi), P(0.0, xi))
        ident = max(ident, abs(kl - 0.5 * xi * d * d) / max(1.0, 0.5 * xi * d * d))
    criterion(5, "Gaussian KL correctness", worst <= 1e-6 and ident <= 1e-12,
              f"quadrature dev {worst:.1e}, identity dev {ident:.1e}")


def test_06_calibration(criterion):
    rep = monte_carlo(preset("calibration", runs=200, sample_sizes=(10, 1000)))
    parts, ok = [], True
    for setup in ("baseline", "interpolant", "noise", "heteroskedasticity"):
        imp = {}
        for n in (10, 1000):
            mle = rep.summary("mle_nll", setup, n, OUT_OF_SAMPLE).nll_grand
            blr = rep.summary("blr_nll", setup, n, OUT_OF_SAMPLE).nll_grand
            imp[n] = mle - blr
        ok &= imp[10] >= 0 and imp[10] > imp[1000]
        parts.append(f"{setup} {imp[10]:.3f}>{imp[1000]:.1e}")
    criterion(6, "BLR vs MLE calibration", ok, "; ".join(parts))


def test_07_truthfulness(criterion):
    rev = truthfulness_experiment(runs=200, n=500)
    stds = sorted(rev)
    monotone = all(rev[a] > rev[b] for a, b in zip(stds, stds[1:]))
    data = generate(SetupSpec("baseline", (-0.11, 0.31, 0.08, 0.65), 1.23, 500, seed=3))
    mean, se = mean_noisy_fit(data, [0, 1, 2, 3], 2, 1.0, 500, seed=1)
    ridge = ridge_oracle(data, [0, 1, 2, 3], [0.0, 0.0, 1.0, 0.0])
    z = float(np.max(np.abs(mean - ridge) / se))
    criterion(7, "Truthfulness", monotone and z <= 3,
              "revenue " + " > ".join(f"{rev[s]:.2e}" for s in stds) + f"; ridge max z {z:.2f}")


def test_08_risk_reduction(criterion):
    start = time.perf_counter()
    rep = monte_carlo(preset("risk", runs=500))
    ok, parts = True, []
    for setup in ("noise", "heteroskedasticity"):
        es = {d: rep.summary(d, setup, 1000, OUT_OF_SAMPLE).risk["a2"].expected_shortfall
              for d in ("blr_nll", "blr_kl_m", "blr_kl_v")}
        ok &= es["blr_kl_m"] < es["blr_nll"] and es["blr_kl_v"] < es["blr_nll"]
        parts.append(f"{setup} ES nll {es['blr_nll']:.2e} klm {es['blr_kl_m']:.2e} klv {es['blr_kl_v']:.2e}")
    for setup in ("baseline", "interpolant", "noise", "heteroskedasticity"):
        for stage in (IN_SAMPLE, OUT_OF_SAMPLE):
            for agent, r in rep.summary("blr_kl_m", setup, 1000, stage).risk.items():
                half = 0.5 * (r.shortfall_interval[1] - r.shortfall_interval[0])
                ok &= r.expected_shortfall <= 3 * half
    elapsed = time.perf_counter() - start
    criterion(8, "Risk reduction", ok and elapsed < 300, "; ".join(parts) + f"; {elapsed:.1f}s")


def test_09_expected_shortfall(criterion):
    x = np.random.default_rng(9).standard_normal(1_000_000)
    analytic = stats.norm.pdf(stats.norm.ppf(0.05)) / 0.05
    es = expected_shortfall(x, 0.05)
    criterion(9, "Expected shortfall estimator", abs(es - analytic) <= 0.02,
              f"empirical {es:.4f} vs analytic {analytic:.4f}")


def test_10_tracking(criterion):
    res = tracking_experiment(runs=200)
    mae = res.mae_after_change
    criterion(10, "Nonstationary tracking", mae[0.94] < mae[1.0],
              f"MAE tau=0.94 {mae[0.94]:.3f} vs tau=1 {mae[1.0]:.3f}")


def test_11_shapley_moments(criterion):
    ok, zs = True, []
    for k, (m, v, xv) in enumerate([(0.0, 1.0, 1.0), (0.5, 0.3, 2.0), (-1.2, 0.05, 0.7)]):
        rep = shapley_moment_check(m, v, xv, sample_shapley(m, v, xv, 100_000, seed=k))
        zs.append(rep.z_variance)
        ok &= rep.passes(3.0)
    grid = np.linspace(0.0, 2.0, 9)
    var = np.array([shapley_moment_check(m, 1.0, 1.0, sample_shapley(m, 1.0, 1.0, 100_000, seed=99))
                    .empirical_variance for m in grid])
    convex = bool(np.all(np.diff(var, 2) >= 0) and np.all(np.diff(var) > 0))
    criterion(11, "Shapley moments", ok and convex,
              "variance z " + ", ".join(f"{z:+.2f}" for z in zs) + f"; convex sweep {convex}")


def _replay(tmp_path, tag):
    table = ingest_csv(toy_csv(tmp_path / "toy.csv"))
    quarterly, files = [], []
    for target in table.entities:
        lagged = build_lagged_dataset(table, ReplaySpec(target))
        hyp = Hypothesis.linear(lagged.data.inputs.shape[1], forgetting=0.998)
        res = run_online(lagged.data, MarketConfig("blr_kl_v", hyp, 50.0, 150.0), lagged.registry)
        path = tmp_path / f"{tag}_{target}.csv"
        write_ledger(res, path)
        files.append(path.read_bytes())
        quarterly += quarterly_summary(res, lagged.data.timestamps, target)
    return files, quarterly, table


def test_12_replay_determinism(tmp_path, criterion):
    first, quarterly, table = _replay(tmp_path, "a")
    second, _, _ = _replay(tmp_path, "b")
    quarters = {r["quarter"] for r in quarterly}
    shape_ok = len(quarterly) == len(table.entities) * len(quarters) * 2 and len(
        {(r["entity"], r["quarter"], r["stage"]) for r in quarterly}) == len(quarterly)
    criterion(12, "Replay determinism", first == second and shape_ok,
              f"{len(first)} ledgers identical={first == second}; {len(quarterly)} quarterly rows")
