import random

import numpy as np
import pytest

from regmkt.bayes import Hypothesis, online_posteriors
from regmkt.errors import ConfigurationError
from regmkt.experiments import (
    ExperimentDescriptor,
    calibration_table,
    monte_carlo,
    online_means_batched,
    posterior_traces,
    preset,
    reduce_results,
    run_unit,
    tracking_experiment,
    truthfulness_experiment,
    _unit_task,
)
from regmkt.market import IN_SAMPLE, OUT_OF_SAMPLE
from regmkt.simulation import SetupSpec

SMALL = ExperimentDescriptor(setups=("baseline", "noise"), sample_sizes=(10, 40), runs=25,
                             n_test=30, seed=4)


def test_runs_must_be_positive():
    with pytest.raises(ConfigurationError):
        ExperimentDescriptor(runs=0)
    with pytest.raises(ConfigurationError):
        preset("nonexistent")


def test_single_run_reduces_to_its_ledger():
    desc = ExperimentDescriptor(runs=1, sample_sizes=(20,), n_test=10, seed=2)
    rep = monte_carlo(desc)
    rows = run_unit(desc, "baseline", 20, None, 0)
    for (design, stage), row in rows.items():
        s = rep.summary(design, "baseline", 20, stage)
        assert s.n_runs == 1
        assert s.pi_c == row.pi_c
        assert s.revenue == row.pi_a


def test_reduction_is_order_invariant():
    units = [(SMALL, s, n, None, r) for s in SMALL.setups for n in SMALL.sample_sizes
             for r in range(SMALL.runs)]
    results = [_unit_task(u) for u in units]
    a = reduce_results(SMALL, results)
    shuffled = list(results)
    random.Random(0).shuffle(shuffled)
    b = reduce_results(SMALL, shuffled)
    assert a.rows() == b.rows()


def test_parallel_matches_serial():
    desc = ExperimentDescriptor(sample_sizes=(15,), runs=6, n_test=10, seed=1)
    assert monte_carlo(desc, jobs=2).rows() == monte_carlo(desc, jobs=1).rows()


def test_deterministic_for_master_seed():
    assert monte_carlo(SMALL).rows() == monte_carlo(SMALL).rows()
    other = ExperimentDescriptor(**{**SMALL.__dict__, "seed": 5})
    assert monte_carlo(other).rows() != monte_carlo(SMALL).rows()


def test_mle_exceeds_blr_in_sample_at_small_n():
    rep = monte_carlo(preset("convergence", runs=200, sample_sizes=(8, 1024)))
    small_mle = rep.summary("mle_nll", "baseline", 8, IN_SAMPLE).shapley
    small_blr = rep.summary("blr_nll", "baseline", 8, IN_SAMPLE).shapley
    assert all(small_mle[f] > small_blr[f] for f in small_mle)
    big_mle = rep.summary("mle_nll", "baseline", 1024, IN_SAMPLE).shapley
    big_blr = rep.summary("blr_nll", "baseline", 1024, IN_SAMPLE).shapley
    assert all(abs(big_mle[f] - big_blr[f]) < 0.01 * big_blr[f] for f in big_mle)


def test_calibration_table_shape():
    desc = preset("calibration", runs=5, sample_sizes=(10, 50), n_test=50)
    table = calibration_table(monte_carlo(desc))
    assert len(table) == 4 * 2
    assert {r["setup"] for r in table} == {"baseline", "interpolant", "noise", "heteroskedasticity"}


def test_sweep_cells():
    desc = ExperimentDescriptor(designs=("blr_nll",), sample_sizes=(30,), runs=3, n_test=5,
                                sweep=(0.0, 0.5), sweep_coefficient=2)
    rep = monte_carlo(desc)
    assert rep.summary("blr_nll", "baseline", 30, IN_SAMPLE, sweep=0.0).n_runs == 3
    assert rep.summary("blr_nll", "baseline", 30, OUT_OF_SAMPLE, sweep=0.5).n_runs == 3


def test_batched_means_match_sequential(rng):
    hyp = Hypothesis.linear(2, noise_precision=0.8, forgetting=0.93)
    psi = np.concatenate([np.ones((3, 40, 1)), rng.standard_normal((3, 40, 2))], axis=2)
    y = rng.standard_normal((3, 40))
    fast = online_means_batched(psi, y, hyp)
    for r in range(3):
        slow = np.array([b.mean for b in online_posteriors(psi[r], y[r], hyp)])
        np.testing.assert_allclose(fast[r], slow, rtol=1e-8, atol=1e-10)


def test_posterior_traces_shrink():
    means, sds = posterior_traces(SetupSpec("baseline", (-0.11, 0.31, 0.08, 0.65), 1.23, 40, seed=0))
    assert means.shape == sds.shape == (40, 4)
    assert np.all(sds[-1] < sds[5])


def test_tracking_forgetting_helps_after_step():
    res = tracking_experiment(runs=30, n_steps=400, change_at=200)
    assert res.mae_after_change[0.94] < res.mae_after_change[1.0]


def test_truthfulness_monotone_small():
    rev = truthfulness_experiment(runs=40, n=300, feature=3)
    vals = [rev[s] for s in sorted(rev)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
