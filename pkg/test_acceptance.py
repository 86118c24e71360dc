"""Full-scale checks against the default settings. Run with `pytest --runslow`."""
import math
from pathlib import Path

import pytest

from sinebeta_app import suites
from sinebeta_app.config import load_settings
from sinebeta_app.pool import ReplicatePool

SETTINGS = str(Path(__file__).parent / "settings.json")

pytestmark = pytest.mark.slow


def _ctx(tmp_path, **run):
    cfg = load_settings(SETTINGS, overrides={"run": {"output_dir": str(tmp_path), "workers": 4, **run}}, env={})
    return suites.SuiteContext(cfg=cfg, pool=ReplicatePool(cfg.workers))


def _by_name(reports):
    out = {}
    for r in reports:
        out.setdefault(r.name, []).append(r)
    return out


def test_marginal_poisson(tmp_path):
    reports = _by_name(suites.suite_marginal(_ctx(tmp_path)))
    first = next(r for r in reports["poisson_gof"] if r.metadata["interval"] == [0.0, 2 * math.pi])
    assert first.passed and first.metadata["tv"] < 0.06
    assert reports["settledness"][0].passed
    assert all(r.passed for r in reports["additivity"])
    assert reports["monotone_coupling"][0].passed
    assert reports["monotone_coupling_h_scaling"][0].passed


def test_intensity_and_mean_identity(tmp_path):
    reports = _by_name(suites.suite_intensity(_ctx(tmp_path)))
    lam_2pi = next(r for r in reports["intensity"] if r.metadata["lambda"] == pytest.approx(2 * math.pi))
    assert lam_2pi.passed
    assert reports["mean_identity"][0].passed


def test_independence(tmp_path):
    reports = _by_name(suites.suite_independence(_ctx(tmp_path)))
    assert reports["independence"][0].passed
    assert reports["translation_law"][0].passed


def test_exit_time_quadrature(tmp_path):
    reports, rows = suites.quadrature_reports(_ctx(tmp_path))
    found = _by_name(reports)
    assert found["exit_ratio"][0].passed
    assert found["exit_ratio_trend"][0].passed
    assert found["quadrature_oracle"][0].passed
    assert found["laplace_fixed_point"][0].passed
    assert [r["beta"] for r in rows] == [1e-2, 1e-3, 1e-4]


def test_exponential_passage(tmp_path):
    reports, _ = suites.passage_reports(_ctx(tmp_path))
    assert all(r.passed for r in reports), [(r.name, r.statistic) for r in reports if not r.passed]
    agreement = _by_name(reports)["quadrature_mc_agreement"]
    assert sorted(r.metadata["beta"] for r in agreement) == [1e-3, 1e-2, 1e-1]


def test_coupling_trends(tmp_path):
    reports = suites.suite_coupling(_ctx(tmp_path))
    failing = [(r.name, r.metadata.get("beta"), r.statistic) for r in reports if not r.passed]
    assert not failing


def test_crossover(tmp_path):
    assert suites.suite_crossover(_ctx(tmp_path, replicates=500))[0].passed


def test_fast_reach_level_at_smallest_coupling_beta(tmp_path):
    reports = suites.suite_coupling(_ctx(tmp_path))
    fast = {r.metadata["beta"]: r for r in reports if r.name == "fast_reach"}
    assert fast[0.005].statistic >= 0.95 and fast[0.005].threshold == 0.95
    assert fast[0.05].metadata["informational"]
