import math

import numpy as np
import pytest
from scipy import stats

from sinebeta_app.models import (
    FAST_REACH_LEVEL,
    TWO_PI,
    CountTable,
    IntegratorSettings,
    JumpLedger,
    ModelParams,
    PassageSample,
    ProcessTrack,
    RescaledMeasure,
    WellSpec,
)
from sinebeta_app.ppstats import (
    additivity_check,
    counts_for_intervals,
    coupling_diagnostics,
    dispersion_index,
    dispersion_trend,
    exponential_mean_report,
    fast_reach_probe,
    independence_test,
    inhomogeneous_poisson_oracle,
    intensity_check,
    interval_process,
    ks_exponential,
    limit_mass,
    lower_bound_probe,
    poisson_gof,
    quadrature_mc_agreement,
    rescale_ledger,
    settledness_report,
    strictly_decreasing_report,
    translation_law_test,
    window_law_gof,
)
from sinebeta_app.sinesde import simulate_batch
from sinebeta_app.welltime import expected_exit_time, sample_passage_times

GRID = ModelParams(beta=0.02, lambdas=(0.0, TWO_PI, 2 * TWO_PI))


def _track(pid, times, count=None, unsettled=False):
    count = len(times) if count is None else count
    kind = "level" if pid.startswith("L") else "difference"
    return ProcessTrack(pid, kind, tuple(times), endpoint=count * TWO_PI, endpoint_count=count, unsettled=unsettled)


def _ledger(rid, l1, l2, d12, unsettled=False):
    return JumpLedger(replicate=rid, tracks=(
        _track("L0", []),
        _track("L1", [1.0] * l1),
        _track("L2", [1.0] * l2, unsettled=unsettled),
        _track("D1-2", [2.0] * d12),
    ))


def test_rescale_ledger():
    led = JumpLedger(replicate=0, tracks=(_track("L1", [8 * math.pi / 0.02]),))
    m = rescale_ledger(led, 0.02, "L1")
    assert m.points == pytest.approx((1.0,))
    assert rescale_ledger(led, 0.02, "L7").points == ()


def test_interval_process_names():
    assert interval_process(GRID, 0.0, TWO_PI) == "L1"
    assert interval_process(GRID, TWO_PI, 2 * TWO_PI) == "D1-2"
    assert interval_process(GRID, TWO_PI, TWO_PI) is None
    with pytest.raises(ValueError, match="not in lambda grid"):
        interval_process(GRID, 0.0, 1.0)


def test_counts_and_additivity():
    ledgers = [_ledger(2, 1, 3, 2), _ledger(0, 0, 1, 1), _ledger(1, 2, 2, 0, unsettled=True)]
    intervals = [(0.0, TWO_PI), (TWO_PI, 2 * TWO_PI), (0.0, 2 * TWO_PI), (TWO_PI, TWO_PI)]
    table = counts_for_intervals(ledgers, intervals, GRID)
    assert table.replicates == (0, 1, 2)
    assert table.counts[0] == (0, 1, 1, 0)
    assert table.flags == (False, True, False)
    assert list(table.column(2)) == [1, 3]
    assert additivity_check(table, 0, 1, 2).passed

    broken = CountTable(intervals=table.intervals, replicates=(0,), counts=((1, 1, 3, 0),), flags=(False,))
    assert not additivity_check(broken, 0, 1, 2).passed
    with pytest.raises(ValueError):
        additivity_check(table, 0, 2, 1)


def test_untracked_difference_is_an_error():
    led = JumpLedger(replicate=0, tracks=(_track("L0", []), _track("L1", []), _track("L2", [])))
    with pytest.raises(ValueError, match="not tracked"):
        counts_for_intervals([led], [(TWO_PI, 2 * TWO_PI)], GRID)


def test_poisson_gof_accepts_poisson():
    rng = np.random.default_rng(1)
    rep = poisson_gof(rng.poisson(1.0, 2000), 1.0)
    assert rep.passed
    assert rep.metadata["tv"] < 0.06


def test_poisson_gof_rejects_wrong_mean_and_degenerate():
    rng = np.random.default_rng(2)
    assert not poisson_gof(rng.poisson(2.0, 2000), 1.0).passed
    rep = poisson_gof(np.ones(1000, dtype=int), 1.0)
    assert not rep.passed
    assert "degenerate" in rep.metadata["diagnostic"]
    with pytest.raises(ValueError):
        poisson_gof([1, 2, 3], 1.0)


def test_poisson_gof_calibrated_under_null():
    rejections = 0
    trials = 200
    for k in range(trials):
        x = np.random.default_rng(1000 + k).poisson(1.0, 500)
        rejections += not poisson_gof(x, 1.0, tv_max=None).passed
    assert stats.binomtest(rejections, trials, 0.01).pvalue > 1e-3


def test_ks_exponential():
    rng = np.random.default_rng(3)
    assert ks_exponential(rng.exponential(1.0, 1000)).passed
    assert not ks_exponential(rng.exponential(2.0, 1000)).passed
    with pytest.raises(ValueError):
        ks_exponential(np.r_[rng.exponential(1.0, 300), 0.0])


def test_ks_exponential_calibrated_under_null():
    rejections = 0
    trials = 200
    for k in range(trials):
        rejections += not ks_exponential(np.random.default_rng(5000 + k).exponential(1.0, 200)).passed
    assert stats.binomtest(rejections, trials, 0.05).pvalue > 1e-3


def test_exponential_mean_report():
    rng = np.random.default_rng(4)
    assert exponential_mean_report(rng.exponential(1.0, 2000)).passed
    assert not exponential_mean_report(rng.exponential(1.3, 2000)).passed


def _table(x, y):
    return CountTable(
        intervals=((0.0, 1.0), (1.0, 2.0)),
        replicates=tuple(range(len(x))),
        counts=tuple(zip((int(v) for v in x), (int(v) for v in y))),
        flags=(False,) * len(x),
    )


def test_independence_accepts_independent_columns():
    rng = np.random.default_rng(5)
    rep = independence_test(_table(rng.poisson(1.0, 2000), rng.poisson(1.0, 2000)), 0, 1)
    assert rep.passed
    assert rep.statistic < 0.1
    assert len(rep.metadata["corr_ci"]) == 2


def test_independence_rejects_copied_column():
    x = np.random.default_rng(6).poisson(1.0, 2000)
    assert not independence_test(_table(x, x), 0, 1).passed


def test_independence_needs_disjoint_intervals():
    x = np.random.default_rng(7).poisson(1.0, 2000)
    table = CountTable(intervals=((0.0, 2.0), (1.0, 3.0)), replicates=tuple(range(2000)),
                       counts=tuple((int(v), int(v)) for v in x), flags=(False,) * 2000)
    with pytest.raises(ValueError, match="overlap"):
        independence_test(table, 0, 1)


def test_translation_law():
    rng = np.random.default_rng(8)
    assert translation_law_test(rng.poisson(1.0, 1500), rng.poisson(1.0, 1500)).passed
    assert not translation_law_test(rng.poisson(1.0, 1500), rng.poisson(1.5, 1500)).passed


def test_settledness_report():
    good = [_ledger(k, 1, 2, 1) for k in range(99)]
    assert settledness_report(good).passed
    bad = good + [_ledger(99 + k, 1, 2, 1, unsettled=True) for k in range(3)]
    rep = settledness_report(bad)
    assert not rep.passed
    assert rep.metadata["unsettled"] == 3


def test_oracle_matches_limit_mass():
    pts = inhomogeneous_poisson_oracle(TWO_PI, 10000, 9)
    measures = [RescaledMeasure(points=tuple(p), source="oracle") for p in pts]
    assert np.mean([len(p) for p in pts]) == pytest.approx(1.0, abs=0.04)
    assert intensity_check(measures, TWO_PI, [0.5, 1.0]).passed
    assert window_law_gof(measures, TWO_PI, 1.0).passed
    assert not intensity_check(measures, 2 * TWO_PI, [0.5]).passed


def test_oracle_respects_horizon():
    pts = inhomogeneous_poisson_oracle(4 * TWO_PI, 200, 10, horizon=0.2)
    assert all(np.all(p <= 0.2) for p in pts)


def test_limit_mass():
    assert limit_mass(TWO_PI, 0.0) == 0.0
    assert limit_mass(TWO_PI, 50.0) == pytest.approx(1.0)


def test_dispersion():
    rng = np.random.default_rng(11)
    assert dispersion_index(rng.poisson(2.0, 5000)) == pytest.approx(1.0, abs=0.08)
    assert dispersion_index([2, 2, 2, 2]) == 0.0
    rep = dispersion_trend([(1.0, rng.poisson(2.0, 2000)), (20.0, [2, 2, 2, 3] * 100), (0.02, rng.poisson(2.0, 2000) * 2)])
    assert rep.passed
    assert not dispersion_trend([(1.0, [2] * 50 + [3] * 50), (2.0, rng.poisson(2.0, 500))]).passed


def test_strictly_decreasing_report():
    assert strictly_decreasing_report("x", [0.05, 0.02, 0.005], [0.3, 0.2, 0.1]).passed
    assert not strictly_decreasing_report("x", [0.05, 0.02, 0.005], [0.3, 0.4, 0.1]).passed


def test_coupling_with_equal_lambdas_is_trivial():
    d = coupling_diagnostics([], [], GRID, (1, 1))
    assert d.theta_hat == 0.0
    assert d.inclusion_fraction == 1.0


def test_coupling_diagnostics_in_range():
    params = ModelParams(beta=0.5, lambdas=(0.0, TWO_PI, 2 * TWO_PI))
    fam = simulate_batch(params, IntegratorSettings(), 2, range(20), tracked_pairs=[(1, 2)], diagnostic_pairs=[(1, 2)])
    d = coupling_diagnostics([p for p, _ in fam], [led for _, led in fam], params, (1, 2))
    for v in (d.theta_hat, d.xi_hat, d.inclusion_fraction, d.simultaneity_fraction, d.superposition_fraction):
        assert 0.0 <= v <= 1.0
    assert d.window == pytest.approx(9 * math.log(2.0))


def test_fast_reach_from_two_pi():
    rep = fast_reach_probe(0.01, TWO_PI, 0.5, 50, 0, theta0=TWO_PI)
    assert rep.statistic == 1.0
    assert rep.passed
    with pytest.raises(ValueError):
        fast_reach_probe(0.01, TWO_PI, 1.5, 50, 0)


def test_fast_reach_meets_level_at_small_beta():
    lo = fast_reach_probe(0.005, TWO_PI, 0.5, 1000, 42)
    assert lo.threshold == FAST_REACH_LEVEL
    assert lo.statistic >= 0.95
    assert lo.passed
    assert lo.metadata["ci"][0] <= lo.statistic <= lo.metadata["ci"][1]

    hi = fast_reach_probe(0.05, TWO_PI, 0.5, 1000, 42, threshold=None)
    assert hi.passed and hi.metadata["informational"]
    assert 1.0 - lo.statistic < 1.0 - hi.statistic


def test_fast_reach_fails_below_level():
    rep = fast_reach_probe(0.05, TWO_PI, 0.5, 400, 12, threshold=1.0)
    assert rep.statistic < 1.0
    assert not rep.passed


def test_lower_bound_probe():
    rep = lower_bound_probe(0.05, TWO_PI, 400, 13)
    assert rep.passed
    assert rep.threshold == pytest.approx(math.sqrt(0.05))


def test_negative_endpoint_count_is_flagged_not_clamped():
    neg = ProcessTrack("D1-2", "difference", (), endpoint=-TWO_PI, endpoint_count=-1, unsettled=False)
    led = JumpLedger(replicate=0, tracks=(_track("L0", []), _track("L1", [1.0]), _track("L2", [1.0]), neg))
    table = counts_for_intervals([led, _ledger(1, 1, 2, 1)], [(0.0, TWO_PI), (TWO_PI, 2 * TWO_PI)], GRID)
    assert table.flags == (True, False)
    assert table.counts[0] == (1, 0)
    assert list(table.column(1)) == [1]


def test_quadrature_mc_agreement_at_moderate_beta():
    spec = WellSpec(beta=0.1, lam=1.0)
    sample = sample_passage_times(spec, n=300, master_seed=23)
    rep = quadrature_mc_agreement(sample, spec)
    assert rep.name == "quadrature_mc_agreement"
    assert rep.metadata["beta"] == 0.1
    assert rep.passed, rep.statistic


def test_quadrature_mc_agreement_rejects_shifted_sample():
    spec = WellSpec(beta=0.1, lam=1.0)
    theta0 = 1.0
    target = expected_exit_time(math.log(math.tan(theta0 / 4.0)), spec).value
    times = np.random.default_rng(24).exponential(1.5 * target, 500)
    sample = PassageSample(raw_times=tuple(times), rescale=spec.rescale, theta0=theta0)
    assert not quadrature_mc_agreement(sample, spec).passed
    with pytest.raises(ValueError):
        quadrature_mc_agreement(PassageSample(raw_times=(1.0,), rescale=spec.rescale, theta0=theta0), spec)
