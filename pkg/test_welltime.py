import math

import numpy as np
import pytest

from sinebeta_app.models import TWO_PI, QuadratureSettings, WellSpec
from sinebeta_app.welltime import (
    DegenerateWellError,
    QuadratureError,
    asymptotic_critical_points,
    barrier_height,
    critical_points,
    expected_exit_time,
    exit_time_profile,
    exit_ratio_ladder,
    first_passage,
    laplace_bounds,
    laplace_g,
    potential,
    potential_derivative,
    sample_passage_times,
    welltime_row,
)

COARSE = QuadratureSettings(grid_points=20001)


def test_potential_at_origin_and_far_out():
    spec = WellSpec(beta=0.01, lam=1.0)
    assert potential(0.0, spec) == pytest.approx(0.0, abs=1e-15)
    assert math.isfinite(potential(-700.0, spec))
    assert potential(700.0, spec) < -1e290
    vals = potential(np.array([-5.0, 0.0, 5.0]), spec)
    assert vals.shape == (3,)


def test_critical_points_small_beta():
    spec = WellSpec(beta=1e-4, lam=1.0)
    cp = critical_points(spec)
    approx = asymptotic_critical_points(spec)
    assert cp.a == pytest.approx(math.log(1e-4 / 8), abs=1e-3)
    assert cp.b == pytest.approx(-2.5e-5, rel=1e-3)
    assert abs(potential_derivative(cp.a, spec)) < 1e-12
    assert abs(potential_derivative(cp.b, spec)) < 1e-12
    assert cp.v_a == pytest.approx(approx.v_a, abs=1e-3)
    assert cp.v_a == pytest.approx(-4.798, abs=1e-3)


def test_critical_points_match_expansion_at_moderate_beta():
    spec = WellSpec(beta=1e-2, lam=1.0)
    cp = critical_points(spec)
    approx = asymptotic_critical_points(spec)
    assert abs(cp.a - approx.a) < 1e-3
    assert abs(cp.b - approx.b) < 1e-3
    assert cp.a < cp.b < 0
    assert barrier_height(spec) > 0


def test_no_well_raises(caplog):
    with caplog.at_level("WARNING"):
        spec = WellSpec(beta=2.0, lam=1.0)
    assert "no interior well" in caplog.text
    with pytest.raises(DegenerateWellError):
        critical_points(spec)
    assert WellSpec(beta=1.9, lam=1.0).has_well


def test_exit_time_decreases_in_r():
    spec = WellSpec(beta=1e-2, lam=1.0)
    cp = critical_points(spec)
    ts = [expected_exit_time(r, spec).value for r in (2 * cp.a, cp.a, cp.b, 1.0, 5.0)]
    assert all(x > y for x, y in zip(ts, ts[1:]))
    assert ts[-1] > 0


def test_exit_time_error_estimate_within_tolerance():
    spec = WellSpec(beta=1e-2, lam=2.0)
    res = expected_exit_time(critical_points(spec).a, spec)
    assert res.est_error <= 1e-8 * res.value
    assert res.evaluations > 0


def test_exit_ratio_near_one_at_small_beta():
    spec = WellSpec(beta=1e-3, lam=1.0)
    row = welltime_row(spec)
    assert row["ratio"] == pytest.approx(1.0, abs=0.05)
    assert row["t_a"] == pytest.approx(8 * math.pi / 1e-3, rel=0.05)


def test_unreachable_tolerance_raises_with_partial():
    spec = WellSpec(beta=1e-2, lam=1.0)
    with pytest.raises(QuadratureError) as err:
        expected_exit_time(critical_points(spec).a, spec, QuadratureSettings(rel_tol=1e-14))
    partial = err.value.partial
    assert partial.value == pytest.approx(expected_exit_time(critical_points(spec).a, spec).value, rel=1e-6)


def test_adaptive_matches_grid_oracle():
    spec = WellSpec(beta=1e-2, lam=2.0)
    a = critical_points(spec).a
    adaptive = expected_exit_time(a, spec).value
    grid = float(exit_time_profile(spec, [a])[0])
    assert adaptive == pytest.approx(grid, rel=1e-4)


def test_exit_time_flat_deep_in_the_well():
    spec = WellSpec(beta=1e-3, lam=1.0)
    a = critical_points(spec).a
    ts = exit_time_profile(spec, [4 * a, 2 * a, a], COARSE)
    assert (ts.max() - ts.min()) / ts.min() < 0.01


def test_laplace_small_xi_close_to_one():
    spec = WellSpec(beta=1e-2, lam=1.0)
    a = critical_points(spec).a
    g = laplace_g(a, 1e-6, spec, COARSE)
    assert g.value == pytest.approx(1.0, abs=1e-5)
    assert g.bounds_held


def test_laplace_sits_between_bounds():
    spec = WellSpec(beta=1e-2, lam=1.0)
    a = critical_points(spec).a
    lower, upper = laplace_bounds(a, 0.3, spec, COARSE)
    g = laplace_g(a, 0.3, spec, COARSE)
    assert g.lower == pytest.approx(lower)
    assert lower - 1e-7 <= g.value <= min(upper, 1.0) + 1e-7
    assert 0 < g.value < 1


def test_laplace_at_unit_xi():
    spec = WellSpec(beta=1e-3, lam=1.0)
    a = critical_points(spec).a
    g = laplace_g(2 * a, 1.0, spec, COARSE)
    assert g.value == pytest.approx(0.5, abs=0.02)
    assert g.bounds_held
    assert g.iterations > 2


def test_laplace_rejects_nonpositive_xi():
    spec = WellSpec(beta=1e-2, lam=1.0)
    with pytest.raises(ValueError):
        laplace_g(-1.0, 0.0, spec, COARSE)


def test_first_passage_from_two_pi_is_immediate():
    times, censored = first_passage(TWO_PI, 0.1, 5, 0)
    assert np.all(times == 0.0)
    assert not censored.any()


def test_first_passage_just_below_two_pi():
    times, censored = first_passage(TWO_PI - 1e-6, 0.025, 20, 0)
    assert not censored.any()
    assert np.all(times < 1.0)


def test_first_passage_censors_at_max_time():
    times, censored = first_passage(0.1, 1e-4, 50, 3, max_time=1.0)
    assert censored.all()
    assert np.all(np.isnan(times))


def test_first_passage_is_reproducible():
    a = first_passage(1.0, 0.2, 30, 8, max_time=500.0)
    b = first_passage(1.0, 0.2, 30, 8, max_time=500.0)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_passage_mean_matches_quadrature():
    spec = WellSpec(beta=0.5, lam=1.0)
    sample = sample_passage_times(spec, n=400, master_seed=17)
    assert sample.censored == 0
    raw = np.asarray(sample.raw_times)
    r0 = math.log(math.tan(sample.theta0 / 4.0))
    target = expected_exit_time(r0, spec).value
    se = raw.std(ddof=1) / math.sqrt(raw.size)
    assert abs(raw.mean() - target) < 4 * se
    np.testing.assert_allclose(sample.rescaled, raw * spec.rescale)


def test_passage_rejects_bad_start():
    spec = WellSpec(beta=0.5, lam=1.0)
    with pytest.raises(ValueError):
        sample_passage_times(spec, theta0=7.0, n=10)


def test_exit_ratio_ladder_rows():
    rows = exit_ratio_ladder(1.0, [1e-1, 1e-2, 1e-3])
    assert [r["beta"] for r in rows] == [1e-1, 1e-2, 1e-3]
    errs = [abs(r["ratio"] - 1.0) for r in rows]
    assert errs[0] > errs[1] > errs[2]
    assert rows[1] == welltime_row(WellSpec(beta=1e-2, lam=1.0))
