# sinebeta_app/suites.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from sinebeta_app import ppstats, sinesde, welltime
from sinebeta_app.models import (
    FAST_REACH_LEVEL,
    TWO_PI,
    CountTable,
    FamilyPath,
    JumpLedger,
    ModelParams,
    RunConfig,
    TestReport,
    WellSpec,
)
from sinebeta_app.pool import ReplicatePool
from sinebeta_app.rng import STREAM_FAMILY, STREAM_INDEPENDENT

logger = logging.getLogger(__name__)

Family = List[Tuple[FamilyPath, JumpLedger]]

MONOTONE_BUDGET = 1e-3
FLOOR_BUDGET = 0.01
ORACLE_DIGITS_RTOL = 1e-4
KS_MARGIN = 0.05


@dataclass
class SuiteContext:
    cfg: RunConfig
    pool: ReplicatePool
    main_used: bool = False
    _families: Dict[tuple, Family] = field(default_factory=dict)

    def family(
        self,
        params: Optional[ModelParams] = None,
        replicates: Optional[int] = None,
        tracked_pairs: Sequence[Tuple[int, int]] = (),
        diagnostic_pairs: Sequence[Tuple[int, int]] = (),
        checkpoints: Sequence[float] = (),
        purpose: int = STREAM_FAMILY,
        settings=None,
    ) -> Family:
        params = params or self.cfg.params
        settings = settings or self.cfg.settings
        n = replicates or self.cfg.replicates
        key = (params, settings, n, tuple(tracked_pairs), tuple(diagnostic_pairs), tuple(checkpoints), purpose)
        if key not in self._families:
            logger.info("[Sim] beta=%g lambdas=%s replicates=%d", params.beta, _fmt_lams(params.lambdas), n)

            def block(ids: Sequence[int]) -> Family:
                return sinesde.simulate_batch(
                    params, settings, self.cfg.seed, ids,
                    tracked_pairs=tracked_pairs, checkpoints=checkpoints,
                    diagnostic_pairs=diagnostic_pairs, purpose=purpose,
                )

            self._families[key] = self.pool.map_blocks(block, range(n), self.cfg.batch_size)
        return self._families[key]

    def main_family(self) -> Family:
        self.main_used = True
        return self.family(tracked_pairs=self.cfg.tracked_pairs())

    def main_table(self) -> CountTable:
        return ppstats.counts_for_intervals([led for _, led in self.main_family()], self.cfg.intervals, self.cfg.params)


def _fmt_lams(lams: Sequence[float]) -> str:
    return "[" + ", ".join(f"{x / math.pi:g}pi" if x else "0" for x in lams) + "]"


def _tag(reports: List[TestReport], **meta) -> List[TestReport]:
    for r in reports:
        for k, v in meta.items():
            r.metadata.setdefault(k, v)
    return reports


# ---------------------------------------------------------------- sinesde / ppstats suites


def suite_marginal(ctx: SuiteContext) -> List[TestReport]:
    cfg = ctx.cfg
    fam = ctx.main_family()
    ledgers = [led for _, led in fam]
    table = ctx.main_table()
    out: List[TestReport] = [ppstats.settledness_report(ledgers)]
    for k, (lo, hi) in enumerate(table.intervals):
        if hi == lo:
            continue
        rep = ppstats.poisson_gof(table.column(k), (hi - lo) / TWO_PI)
        rep.metadata["interval"] = [lo, hi]
        out.append(rep)
    for left, right, union in _additive_triples(table.intervals):
        out.append(ppstats.additivity_check(table, left, right, union))
    paths = [p for p, _ in fam]
    out.append(_budget_report("monotone_coupling", sinesde.violation_fraction(paths), MONOTONE_BUDGET, len(paths)))
    out.append(_budget_report("floor_decrements", sinesde.floor_decrement_fraction(paths), FLOOR_BUDGET, len(paths)))
    out.append(_h_scaling(ctx))
    return _tag(out, beta=cfg.params.beta, lambdas=_fmt_lams(cfg.params.lambdas))


def _budget_report(name: str, value: float, budget: float, n: int) -> TestReport:
    return TestReport(name=name, statistic=value, reference=0.0, threshold=budget, passed=value < budget, n=n)


def _h_scaling(ctx: SuiteContext) -> TestReport:
    cfg = ctx.cfg
    v = cfg.verify
    params = ModelParams(beta=v.mean_beta, lambdas=cfg.params.lambdas)
    fine_settings = replace(cfg.settings, step=cfg.settings.step / 2.0)
    coarse = [p for p, _ in ctx.family(params=params, replicates=v.scaling_replicates)]
    fine = [p for p, _ in ctx.family(params=params, replicates=v.scaling_replicates, settings=fine_settings)]
    rep = sinesde.h_scaling_report(coarse, fine, cfg.settings.step)
    rep.metadata["beta"] = v.mean_beta
    return rep


def _additive_triples(intervals: Sequence[Tuple[float, float]]) -> List[Tuple[int, int, int]]:
    out = []
    for i, (a, b) in enumerate(intervals):
        for j, (b2, c) in enumerate(intervals):
            if b2 != b or i == j or a == b or b == c:
                continue
            for k, (a3, c3) in enumerate(intervals):
                if a3 == a and c3 == c:
                    out.append((i, j, k))
    return out


def suite_intensity(ctx: SuiteContext) -> List[TestReport]:
    cfg = ctx.cfg
    ledgers = [led for _, led in ctx.main_family()]
    out: List[TestReport] = []
    for i, lam in enumerate(cfg.params.lambdas):
        if lam == 0:
            continue
        measures = [ppstats.rescale_ledger(led, cfg.params.beta, f"L{i}") for led in ledgers if led.aborted is None]
        out.append(ppstats.intensity_check(measures, lam, cfg.verify.intensity_times))
        out.append(ppstats.window_law_gof(measures, lam, 1.0))
    _tag(out, beta=cfg.params.beta, lambdas=_fmt_lams(cfg.params.lambdas))

    v = cfg.verify
    mean_params = ModelParams(beta=v.mean_beta, lambdas=cfg.params.lambdas)
    t_end = 40.0 / v.mean_beta
    checkpoints = [t_end * (k + 1) / v.mean_checkpoints for k in range(v.mean_checkpoints)]
    fam = ctx.family(params=mean_params, replicates=v.mean_replicates, checkpoints=checkpoints)
    curve = sinesde.mean_curve([p for p, led in fam if led.aborted is None], mean_params.lambdas)
    rep = sinesde.mean_identity_report(curve, v.mean_beta, cfg.settings.step)
    out.append(_tag([rep], beta=v.mean_beta, lambdas=_fmt_lams(mean_params.lambdas))[0])
    return out


def suite_independence(ctx: SuiteContext) -> List[TestReport]:
    cfg = ctx.cfg
    table = ctx.main_table()
    out: List[TestReport] = []
    pair = _first_disjoint(table.intervals)
    if pair is None:
        raise ValueError("independence suite needs two disjoint non-empty intervals")
    out.append(ppstats.independence_test(table, *pair))

    i, j = cfg.verify.coupling_pair
    lam_i, lam_j = cfg.params.lambdas[i], cfg.params.lambdas[j]
    main_pairs = cfg.tracked_pairs()
    if lam_i == 0 or (i, j) in main_pairs:
        diff_fam = ctx.main_family()
    else:
        diff_fam = ctx.family(tracked_pairs=main_pairs + [(i, j)])
    pid = f"D{i}-{j}" if lam_i > 0 else f"L{j}"
    diff_counts = [led.track(pid).endpoint_count for _, led in diff_fam if not _flagged(led)]
    level_params = ModelParams(beta=cfg.params.beta, lambdas=(0.0, lam_j - lam_i))
    level_fam = ctx.family(params=level_params, purpose=STREAM_INDEPENDENT)
    level_counts = [led.track("L1").endpoint_count for _, led in level_fam if not _flagged(led)]
    rep = ppstats.translation_law_test(diff_counts, level_counts)
    rep.metadata["pair"] = [lam_i, lam_j]
    out.append(rep)
    return _tag(out, beta=cfg.params.beta, lambdas=_fmt_lams(cfg.params.lambdas))


def _flagged(led: JumpLedger) -> bool:
    return led.aborted is not None or any(tr.flagged for tr in led.tracks)


def _first_disjoint(intervals: Sequence[Tuple[float, float]]) -> Optional[Tuple[int, int]]:
    for i, (a, b) in enumerate(intervals):
        for j in range(i + 1, len(intervals)):
            c, d = intervals[j]
            if a < b and c < d and max(a, c) >= min(b, d):
                return i, j
    return None


def suite_coupling(ctx: SuiteContext) -> List[TestReport]:
    cfg = ctx.cfg
    v = cfg.verify
    i, j = v.coupling_pair
    lam = cfg.params.lambdas[i]
    betas = list(v.coupling_betas)
    diags = []
    fast: List[TestReport] = []
    out: List[TestReport] = []
    for beta in betas:
        params = ModelParams(beta=beta, lambdas=cfg.params.lambdas)
        fam = ctx.family(params=params, replicates=v.coupling_replicates,
                         tracked_pairs=[(i, j)], diagnostic_pairs=[(i, j)])
        d = ppstats.coupling_diagnostics([p for p, _ in fam], [led for _, led in fam], params, (i, j))
        diags.append(d)
        out.append(TestReport(
            name="coupling_diagnostics", statistic=d.inclusion_fraction, reference=1.0, threshold=0.0,
            passed=True, n=d.replicates,
            metadata={"beta": beta, "theta_hat": d.theta_hat, "xi_hat": d.xi_hat,
                      "inclusion_fraction": d.inclusion_fraction,
                      "simultaneity_fraction": d.simultaneity_fraction,
                      "superposition_fraction": d.superposition_fraction, "window": d.window},
        ))
        level = FAST_REACH_LEVEL if beta == min(betas) else None
        rep = ppstats.fast_reach_probe(beta, lam, v.probe_epsilon, v.probe_samples, cfg.seed, cfg.settings.step,
                                       threshold=level)
        fast.append(rep)
        out.append(rep)
        out.append(ppstats.lower_bound_probe(beta, lam, v.probe_samples, cfg.seed, cfg.settings.step))

    out.append(ppstats.strictly_decreasing_report("theta_hat_trend", betas, [d.theta_hat for d in diags]))
    out.append(ppstats.strictly_decreasing_report("xi_hat_trend", betas, [d.xi_hat for d in diags]))
    out.append(ppstats.strictly_decreasing_report("exclusion_trend", betas, [1.0 - d.inclusion_fraction for d in diags]))
    out.append(ppstats.strictly_decreasing_report("simultaneity_trend", betas, [d.simultaneity_fraction for d in diags]))
    out.append(ppstats.strictly_decreasing_report("fast_reach_miss_trend", betas, [1.0 - r.statistic for r in fast]))

    smallest = diags[int(np.argmin(betas))]
    out.append(TestReport(name="inclusion_small_beta", statistic=smallest.inclusion_fraction, reference=1.0,
                          threshold=0.95, passed=smallest.inclusion_fraction >= 0.95, n=smallest.replicates,
                          metadata={"beta": min(betas)}))
    out.append(TestReport(name="simultaneity_small_beta", statistic=smallest.simultaneity_fraction, reference=0.0,
                          threshold=0.05, passed=smallest.simultaneity_fraction <= 0.05, n=smallest.replicates,
                          metadata={"beta": min(betas)}))
    return _tag(out, beta=min(betas), lambdas=_fmt_lams([cfg.params.lambdas[i], cfg.params.lambdas[j]]))


def suite_crossover(ctx: SuiteContext) -> List[TestReport]:
    cfg = ctx.cfg
    v = cfg.verify
    lam = 2.0 * TWO_PI
    by_beta = []
    for beta in v.crossover_betas:
        params = ModelParams(beta=beta, lambdas=(0.0, lam))
        fam = ctx.family(params=params, replicates=v.crossover_replicates)
        counts = [led.track("L1").endpoint_count for _, led in fam if not _flagged(led)]
        by_beta.append((beta, counts))
    return _tag([ppstats.dispersion_trend(by_beta)], beta=min(v.crossover_betas), lambdas=_fmt_lams((0.0, lam)))


# ---------------------------------------------------------------- welltime suites


def quadrature_reports(ctx: SuiteContext) -> Tuple[List[TestReport], List[Dict[str, float]]]:
    w = ctx.cfg.welltime
    rows = welltime.exit_ratio_ladder(w.lam, w.betas, w.quadrature)
    errs = [abs(r["ratio"] - 1.0) for r in rows]
    smallest = rows[int(np.argmin(w.betas))]
    out = [
        TestReport(name="exit_ratio", statistic=smallest["ratio"], reference=1.0, threshold=0.02,
                   passed=abs(smallest["ratio"] - 1.0) <= 0.02, n=1,
                   metadata={"beta": smallest["beta"], "lambda": w.lam}),
        ppstats.strictly_decreasing_report("exit_ratio_trend", list(w.betas), errs),
    ]

    # adaptive quadrature against the dense-grid oracle
    worst = 0.0
    triples = []
    for beta, lam, where in ((1e-2, 2.0, "a"), (1e-2, 1.0, "2a"), (1e-3, 1.0, "a"), (1e-1, 1.0, "a"), (1e-2, 1.0, "0")):
        spec = WellSpec(beta=beta, lam=lam)
        a = welltime.critical_points(spec).a
        r = {"a": a, "2a": 2.0 * a, "0": 0.0}[where]
        quad_t = welltime.expected_exit_time(r, spec, w.quadrature).value
        grid_t = float(welltime.exit_time_profile(spec, [r], w.quadrature)[0])
        rel = abs(quad_t - grid_t) / abs(grid_t)
        worst = max(worst, rel)
        triples.append({"beta": beta, "lambda": lam, "r": r, "adaptive": quad_t, "grid": grid_t})
    out.append(TestReport(name="quadrature_oracle", statistic=worst, reference=0.0, threshold=ORACLE_DIGITS_RTOL,
                          passed=worst < ORACLE_DIGITS_RTOL, n=len(triples), metadata={"triples": triples}))

    # memory loss: t(r) flat across r in [4a, a]
    spec = WellSpec(beta=w.mc_beta, lam=w.lam)
    a = welltime.critical_points(spec).a
    ts = welltime.exit_time_profile(spec, [4.0 * a, 3.0 * a, 2.0 * a, a], w.quadrature)
    spread = float((ts.max() - ts.min()) / ts.min())
    out.append(TestReport(name="memory_loss", statistic=spread, reference=0.0, threshold=0.01,
                          passed=spread < 0.01, n=len(ts), metadata={"beta": w.mc_beta, "t": ts.tolist()}))

    # Laplace transform at the rescaled exit time: 1/(1 + xi)
    g = welltime.laplace_g(2.0 * a, w.xi, spec, w.quadrature)
    target = 1.0 / (1.0 + w.xi)
    out.append(TestReport(
        name="laplace_fixed_point", statistic=g.value, reference=target, threshold=0.02,
        passed=abs(g.value - target) <= 0.02 and bool(g.bounds_held), n=g.iterations,
        metadata={"beta": w.mc_beta, "xi": w.xi, "lower": g.lower, "upper": g.upper,
                  "bounds_held": g.bounds_held, "iterations": g.iterations},
    ))
    return _tag(out, lambdas=f"lambda={w.lam:g}", beta=min(w.betas)), rows


def passage_reports(ctx: SuiteContext) -> Tuple[List[TestReport], List[Dict[str, float]]]:
    cfg = ctx.cfg
    w = cfg.welltime
    spec = WellSpec(beta=w.mc_beta, lam=w.lam)
    sample = welltime.sample_passage_times(spec, n=w.samples, master_seed=cfg.seed, step=w.step)
    resc = sample.rescaled
    out = [ppstats.ks_exponential(resc, margin=KS_MARGIN), ppstats.exponential_mean_report(resc)]
    out.append(TestReport(name="passage_censored", statistic=float(sample.censored), reference=0, threshold=0.01 * sample.n,
                          passed=sample.censored <= 0.01 * sample.n, n=sample.n))

    for beta in w.agreement_betas:
        if beta == w.mc_beta:
            out.append(ppstats.quadrature_mc_agreement(sample, spec, w.quadrature))
            continue
        other = WellSpec(beta=beta, lam=w.lam)
        other_sample = welltime.sample_passage_times(other, n=w.samples, master_seed=cfg.seed, step=w.step)
        out.append(ppstats.quadrature_mc_agreement(other_sample, other, w.quadrature))

    rows = [{"beta": spec.beta, "lambda": spec.lam, "path": k, "t_physical": t, "t_rescaled": t * spec.rescale,
             "censored": 0} for k, t in enumerate(sample.raw_times)]
    rows += [{"beta": spec.beta, "lambda": spec.lam, "path": len(rows) + k, "t_physical": math.nan,
              "t_rescaled": math.nan, "censored": 1} for k in range(sample.censored)]
    return _tag(out, beta=w.mc_beta, lambdas=f"lambda={w.lam:g}"), rows


def suite_exit(ctx: SuiteContext) -> List[TestReport]:
    quad_reports, _ = quadrature_reports(ctx)
    mc_reports, _ = passage_reports(ctx)
    return quad_reports + mc_reports


SUITES: Dict[str, Callable[[SuiteContext], List[TestReport]]] = {
    "marginal": suite_marginal,
    "intensity": suite_intensity,
    "exit": suite_exit,
    "independence": suite_independence,
    "coupling": suite_coupling,
    "crossover": suite_crossover,
}


def expand(selection: Sequence[str]) -> List[str]:
    if "all" in selection:
        return list(SUITES)
    return [s for s in SUITES if s in selection]
