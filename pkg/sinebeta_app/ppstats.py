# sinebeta_app/ppstats.py
from __future__ import annotations

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from sinebeta_app.models import (
    FAST_REACH_LEVEL,
    TWO_PI,
    CountTable,
    CouplingDiagnostics,
    FamilyPath,
    JumpLedger,
    ModelParams,
    PassageSample,
    QuadratureSettings,
    RescaledMeasure,
    TestReport,
    WellSpec,
    fast_reach_window,
    near_zero_threshold,
)
from sinebeta_app.rng import STREAM_FAST_REACH, STREAM_LOWER_BOUND, STREAM_ORACLE, substream
from sinebeta_app.welltime import expected_exit_time, first_passage

logger = logging.getLogger(__name__)

MIN_EXPECTED = 5.0


# ---------------------------------------------------------------- measures and tables


def rescale_ledger(ledger: JumpLedger, beta: float, process_id: str) -> RescaledMeasure:
    """Jump times of one process in units of 8pi/beta."""
    if not ledger.has(process_id):
        return RescaledMeasure(points=(), source=process_id)
    scale = beta / (8.0 * math.pi)
    return RescaledMeasure(points=tuple(t * scale for t in ledger.track(process_id).times), source=process_id)


def interval_process(params: ModelParams, lo: float, hi: float) -> Optional[str]:
    """Track whose endpoint count is Sine_beta[lo, hi]; None for an empty interval."""
    i, j = params.index_of(lo), params.index_of(hi)
    if i is None:
        raise ValueError(f"interval endpoint {lo:g} not in lambda grid")
    if j is None:
        raise ValueError(f"interval endpoint {hi:g} not in lambda grid")
    if j < i:
        raise ValueError(f"interval [{lo:g}, {hi:g}] is reversed")
    if i == j:
        return None
    if params.lambdas[i] == 0.0:
        return f"L{j}"
    return f"D{i}-{j}"


def counts_for_intervals(
    ledgers: Sequence[JumpLedger],
    intervals: Sequence[Tuple[float, float]],
    params: ModelParams,
) -> CountTable:
    procs = [interval_process(params, lo, hi) for lo, hi in intervals]
    rows: List[Tuple[int, ...]] = []
    flags: List[bool] = []
    for led in sorted(ledgers, key=lambda x: x.replicate):
        counts = []
        flagged = led.aborted is not None
        for pid in procs:
            if pid is None:
                counts.append(0)
                continue
            if not led.has(pid):
                raise ValueError(f"process {pid} was not tracked; add its lambda pair to the run")
            tr = led.track(pid)
            if tr.negative:
                logger.warning("[Sim] replicate=%d %s ended below zero (endpoint count %d)",
                               led.replicate, pid, tr.endpoint_count)
            counts.append(tr.count if tr.negative else tr.endpoint_count)
            flagged = flagged or tr.flagged
        rows.append(tuple(counts))
        flags.append(flagged)
    return CountTable(
        intervals=tuple((float(lo), float(hi)) for lo, hi in intervals),
        replicates=tuple(sorted(led.replicate for led in ledgers)),
        counts=tuple(rows),
        flags=tuple(flags),
    )


# ---------------------------------------------------------------- goodness of fit


def _merge_cells(expected: np.ndarray, observed: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Merge adjacent cells left to right until every expected count is >= MIN_EXPECTED."""
    exp_cells: List[float] = []
    obs_cells: List[float] = []
    acc_e = acc_o = 0.0
    for e, o in zip(expected, observed):
        acc_e += e
        acc_o += o
        if acc_e >= MIN_EXPECTED:
            exp_cells.append(acc_e)
            obs_cells.append(acc_o)
            acc_e = acc_o = 0.0
    if acc_e > 0 or acc_o > 0:
        if exp_cells:
            exp_cells[-1] += acc_e
            obs_cells[-1] += acc_o
        else:
            exp_cells.append(acc_e)
            obs_cells.append(acc_o)
    return np.asarray(exp_cells), np.asarray(obs_cells)


def poisson_gof(
    samples: Sequence[int],
    mean: float,
    alpha: float = 0.01,
    tv_max: Optional[float] = 0.06,
    min_samples: int = 500,
    name: str = "poisson_gof",
) -> TestReport:
    x = np.asarray(samples, dtype=int)
    n = int(x.size)
    if n < min_samples:
        raise ValueError(f"poisson_gof needs >= {min_samples} samples, got {n}")
    if np.any(x < 0):
        raise ValueError("counts must be nonnegative")

    k_max = int(max(x.max(), stats.poisson.ppf(1.0 - 1e-12, mean)))
    ks = np.arange(k_max + 1)
    probs = stats.poisson.pmf(ks, mean)
    probs[-1] = stats.poisson.sf(k_max - 1, mean)  # last cell is the tail
    observed = np.bincount(x, minlength=k_max + 1)[: k_max + 1].astype(float)
    tv = 0.5 * float(np.abs(observed / n - probs).sum())
    meta: Dict[str, object] = {"mean": mean, "tv": tv, "tv_max": tv_max, "alpha": alpha}

    if np.unique(x).size < 2:
        meta["diagnostic"] = f"degenerate sample: every value is {int(x[0])}"
        return TestReport(name=name, statistic=math.inf, reference=f"Poisson({mean:g})",
                          threshold=alpha, passed=False, n=n, p_value=0.0, metadata=meta)

    exp_cells, obs_cells = _merge_cells(n * probs, observed)
    meta["cells"] = int(exp_cells.size)
    if exp_cells.size < 2:
        meta["diagnostic"] = "fewer than two cells after merging"
        return TestReport(name=name, statistic=math.inf, reference=f"Poisson({mean:g})",
                          threshold=alpha, passed=False, n=n, p_value=0.0, metadata=meta)

    res = stats.chisquare(obs_cells, exp_cells * (obs_cells.sum() / exp_cells.sum()))
    p = float(res.pvalue)
    passed = p > alpha and (tv_max is None or tv < tv_max)
    return TestReport(name=name, statistic=float(res.statistic), reference=f"Poisson({mean:g})",
                      threshold=alpha, passed=passed, n=n, p_value=p, metadata=meta)


def ks_exponential(sample: Sequence[float], margin: float = 0.0, min_samples: int = 200) -> TestReport:
    x = np.asarray(sample, dtype=float)
    n = int(x.size)
    if n < min_samples:
        raise ValueError(f"ks_exponential needs >= {min_samples} samples, got {n}")
    if np.any(~(x > 0)):
        raise ValueError("passage times must be positive")
    res = stats.kstest(x, "expon")
    threshold = 1.36 / math.sqrt(n) + margin
    d = float(res.statistic)
    return TestReport(
        name="ks_exponential",
        statistic=d,
        reference="Exp(1)",
        threshold=threshold,
        passed=d < threshold,
        n=n,
        p_value=float(res.pvalue),
        metadata={"margin": margin, "mean": float(x.mean()), "tail_gt_1": float(np.mean(x > 1.0))},
    )


def exponential_mean_report(sample: Sequence[float], sigmas: float = 3.0) -> TestReport:
    """Rescaled sample mean within sigmas/sqrt(n) of 1 and P[T > 1] inside its binomial CI around e^-1."""
    x = np.asarray(sample, dtype=float)
    n = int(x.size)
    dev = abs(float(x.mean()) - 1.0)
    threshold = sigmas / math.sqrt(n)
    tail = int(np.sum(x > 1.0))
    ci = stats.binomtest(tail, n, math.exp(-1.0)).proportion_ci(confidence_level=0.99)
    covers = ci.low <= math.exp(-1.0) <= ci.high
    return TestReport(
        name="passage_mean",
        statistic=dev,
        reference=1.0,
        threshold=threshold,
        passed=dev < threshold and covers,
        n=n,
        metadata={"mean": float(x.mean()), "tail_gt_1": tail / n, "tail_ci": [ci.low, ci.high]},
    )


def quadrature_mc_agreement(sample: PassageSample, spec: WellSpec, qset: Optional[QuadratureSettings] = None,
                            z_max: float = 4.0) -> TestReport:
    """Monte Carlo mean passage time against the quadrature t(r0) at the matching start r0 = log tan(theta0/4)."""
    raw = np.asarray(sample.raw_times, dtype=float)
    if raw.size < 2:
        raise ValueError("quadrature_mc_agreement needs at least two uncensored passage times")
    r0 = math.log(math.tan(sample.theta0 / 4.0))
    t_quad = expected_exit_time(r0, spec, qset).value
    se = float(raw.std(ddof=1) / math.sqrt(raw.size))
    z = abs(float(raw.mean()) - t_quad) / se
    logger.info("[Verify] beta=%g passage mean=%.6g quadrature=%.6g z=%.2f", spec.beta, raw.mean(), t_quad, z)
    return TestReport(
        name="quadrature_mc_agreement",
        statistic=z,
        reference=t_quad,
        threshold=z_max,
        passed=z < z_max,
        n=int(raw.size),
        metadata={"beta": spec.beta, "mc_mean": float(raw.mean()), "se": se, "r0": r0, "censored": sample.censored},
    )


# ---------------------------------------------------------------- independence


def _merge_categories(x: np.ndarray, min_count: int) -> np.ndarray:
    """Map counts onto categories 0..K-1 plus a top bucket '>= K' holding at least min_count."""
    top = int(x.max())
    while top > 0 and np.sum(x >= top) < min_count:
        top -= 1
    return np.minimum(x, top)


def independence_test(
    table: CountTable,
    i: int,
    j: int,
    corr_max: float = 0.1,
    gap_max: float = 0.05,
    alpha: float = 0.01,
    min_replicates: int = 1000,
) -> TestReport:
    (a_lo, a_hi), (b_lo, b_hi) = table.intervals[i], table.intervals[j]
    if max(a_lo, b_lo) < min(a_hi, b_hi):
        raise ValueError(f"intervals {i} and {j} overlap")
    x = table.column(i)
    y = table.column(j)
    n = int(x.size)
    if n < min_replicates:
        raise ValueError(f"independence_test needs >= {min_replicates} settled replicates, got {n}")

    meta: Dict[str, object] = {"intervals": [list(table.intervals[i]), list(table.intervals[j])]}
    if np.unique(x).size < 2 or np.unique(y).size < 2:
        meta["diagnostic"] = "constant count column"
        return TestReport(name="independence", statistic=math.inf, reference=0.0,
                          threshold=corr_max, passed=False, n=n, metadata=meta)

    pr = stats.pearsonr(x, y)
    ci = pr.confidence_interval(confidence_level=0.95)
    corr = float(pr.statistic)
    gap = abs(float(np.mean((x == 0) & (y == 0))) - float(np.mean(x == 0)) * float(np.mean(y == 0)))

    min_count = max(5, int(0.05 * n))
    cx = _merge_categories(x, min_count)
    cy = _merge_categories(y, min_count)
    joint = np.zeros((cx.max() + 1, cy.max() + 1))
    np.add.at(joint, (cx, cy), 1)
    if joint.shape[0] < 2 or joint.shape[1] < 2:
        chi_p = 0.0
        meta["diagnostic"] = "contingency table collapsed to one category"
    else:
        chi = stats.chi2_contingency(joint, correction=False)
        chi_p = float(chi.pvalue)
        meta["chi2"] = float(chi.statistic)

    meta.update({"corr_ci": [float(ci.low), float(ci.high)], "void_gap": gap, "chi2_p": chi_p,
                 "gap_max": gap_max, "alpha": alpha})
    passed = abs(corr) < corr_max and gap < gap_max and chi_p > alpha
    return TestReport(name="independence", statistic=abs(corr), reference=0.0, threshold=corr_max,
                      passed=passed, n=n, p_value=chi_p, metadata=meta)


def translation_law_test(diff_counts: Sequence[int], level_counts: Sequence[int], alpha: float = 0.01) -> TestReport:
    """Two-sample chi-square: counts of alpha_l' - alpha_l versus a level process at speed l' - l."""
    a = np.asarray(diff_counts, dtype=int)
    b = np.asarray(level_counts, dtype=int)
    both = np.concatenate([a, b])
    cats = _merge_categories(both, max(10, int(0.02 * both.size)))
    k = int(cats.max()) + 1
    table = np.vstack([np.bincount(cats[: a.size], minlength=k), np.bincount(cats[a.size:], minlength=k)])
    meta: Dict[str, object] = {"categories": k, "mean_diff": float(a.mean()), "mean_level": float(b.mean())}
    if k < 2:
        return TestReport(name="translation_law", statistic=0.0, reference="same law", threshold=alpha,
                          passed=True, n=int(both.size), p_value=1.0, metadata=meta)
    res = stats.chi2_contingency(table, correction=False)
    p = float(res.pvalue)
    return TestReport(name="translation_law", statistic=float(res.statistic), reference="same law",
                      threshold=alpha, passed=p > alpha, n=int(both.size), p_value=p, metadata=meta)


def additivity_check(table: CountTable, left: int, right: int, union: int) -> TestReport:
    """count[union] == count[left] + count[right] on every settled replicate."""
    (l_lo, l_hi), (r_lo, r_hi), (u_lo, u_hi) = table.intervals[left], table.intervals[right], table.intervals[union]
    if not (l_hi == r_lo and l_lo == u_lo and r_hi == u_hi):
        raise ValueError("additivity needs intervals [a, b], [b, c] and [a, c]")
    lhs = table.column(union)
    rhs = table.column(left) + table.column(right)
    bad = int(np.sum(lhs != rhs))
    return TestReport(name="additivity", statistic=float(bad), reference=0, threshold=0.0,
                      passed=bad == 0, n=int(lhs.size),
                      metadata={"intervals": [list(table.intervals[k]) for k in (left, right, union)]})


def settledness_report(ledgers: Sequence[JumpLedger], max_fraction: float = 0.02) -> TestReport:
    n = len(ledgers)
    unsettled = sum(1 for led in ledgers if any(tr.unsettled for tr in led.tracks))
    disagree = sum(1 for led in ledgers if any(tr.disagrees for tr in led.tracks))
    aborted = sum(1 for led in ledgers if led.aborted is not None)
    multi = sum(1 for led in ledgers if led.multi_jump)
    flagged = sum(1 for led in ledgers if led.aborted is not None or any(tr.flagged for tr in led.tracks))
    frac = flagged / n if n else 0.0
    if frac >= max_fraction:
        logger.warning("[Verify] flagged replicate fraction %.4f exceeds %.2f", frac, max_fraction)
    return TestReport(
        name="settledness",
        statistic=frac,
        reference=0.0,
        threshold=max_fraction,
        passed=frac < max_fraction,
        n=n,
        metadata={"unsettled": unsettled, "disagreeing": disagree, "aborted": aborted, "multi_jump": multi},
    )


# ---------------------------------------------------------------- intensity


def limit_mass(lam: float, t: float) -> float:
    """(lambda/2pi)(1 - exp(-2pi t)): expected rescaled jumps in [0, t]."""
    return lam / TWO_PI * -math.expm1(-TWO_PI * t)


def intensity_check(measures: Sequence[RescaledMeasure], lam: float, ts: Sequence[float], rel_tol: float = 0.05) -> TestReport:
    rows = []
    worst = 0.0
    for t in ts:
        emp = float(np.mean([m.mass(t) for m in measures])) if measures else 0.0
        target = limit_mass(lam, t)
        rel = abs(emp - target) / target
        worst = max(worst, rel)
        rows.append({"t": t, "empirical": emp, "target": target})
    return TestReport(name="intensity", statistic=worst, reference="(lambda/2pi)(1-exp(-2pi t))",
                      threshold=rel_tol, passed=worst < rel_tol, n=len(measures),
                      metadata={"lambda": lam, "windows": rows})


def window_law_gof(measures: Sequence[RescaledMeasure], lam: float, t: float, alpha: float = 0.01) -> TestReport:
    counts = [m.mass(t) for m in measures]
    rep = poisson_gof(counts, limit_mass(lam, t), alpha=alpha, tv_max=None, name="window_law")
    rep.metadata["t"] = t
    return rep


def inhomogeneous_poisson_oracle(lam: float, n: int, master_seed: int, horizon: float = math.inf) -> List[np.ndarray]:
    """Samples of the limit process on [0, horizon]: Poisson points with intensity lambda*exp(-2pi t)."""
    out = []
    cap = -math.expm1(-TWO_PI * horizon) if math.isfinite(horizon) else 1.0
    for k in range(n):
        rng = substream(master_seed, STREAM_ORACLE, k)
        m = rng.poisson(lam / TWO_PI * cap)
        u = rng.random(m)
        out.append(np.sort(-np.log1p(-u * cap) / TWO_PI))
    return out


# ---------------------------------------------------------------- dispersion


def dispersion_index(counts: Sequence[int]) -> float:
    x = np.asarray(counts, dtype=float)
    m = float(x.mean())
    if m <= 0:
        return math.nan
    return float(x.var(ddof=1)) / m


def dispersion_trend(by_beta: Sequence[Tuple[float, Sequence[int]]]) -> TestReport:
    """Variance-to-mean ratio must fall strictly as beta grows (Poisson towards picket fence)."""
    ordered = sorted(by_beta, key=lambda p: p[0])
    idx = [dispersion_index(c) for _, c in ordered]
    steps = [b - a for a, b in zip(idx, idx[1:])]
    ok = all(d < 0 for d in steps)
    return TestReport(name="dispersion_trend", statistic=max(steps) if steps else 0.0, reference="decreasing",
                      threshold=0.0, passed=ok, n=sum(len(c) for _, c in ordered),
                      metadata={"betas": [b for b, _ in ordered], "dispersion": idx})


def strictly_decreasing_report(name: str, betas: Sequence[float], values: Sequence[float]) -> TestReport:
    """values (listed against betas) must fall strictly as beta decreases."""
    pairs = sorted(zip(betas, values), key=lambda p: -p[0])
    vals = [v for _, v in pairs]
    steps = [b - a for a, b in zip(vals, vals[1:])]
    return TestReport(name=name, statistic=max(steps) if steps else 0.0, reference="decreasing as beta decreases",
                      threshold=0.0, passed=all(d < 0 for d in steps), n=len(vals),
                      metadata={"betas": [b for b, _ in pairs], "values": vals})


# ---------------------------------------------------------------- coupling


def _matched_fraction(times: np.ndarray, against: np.ndarray, window: float) -> Tuple[int, int]:
    if times.size == 0:
        return 0, 0
    if against.size == 0:
        return 0, int(times.size)
    pos = np.searchsorted(against, times)
    left = np.abs(times - against[np.clip(pos - 1, 0, against.size - 1)])
    right = np.abs(against[np.clip(pos, 0, against.size - 1)] - times)
    return int(np.sum(np.minimum(left, right) <= window)), int(times.size)


def coupling_diagnostics(
    paths: Sequence[FamilyPath],
    ledgers: Sequence[JumpLedger],
    params: ModelParams,
    pair: Tuple[int, int],
    window: Optional[float] = None,
) -> CouplingDiagnostics:
    i, j = pair
    w = fast_reach_window(params.beta) if window is None else window
    total_steps = sum(p.steps for p in paths)
    if i == j:
        return CouplingDiagnostics(theta_hat=0.0, xi_hat=0.0, inclusion_fraction=1.0, simultaneity_fraction=0.0,
                                   superposition_fraction=1.0, window=w, replicates=len(ledgers))

    below = off = 0
    for p in paths:
        if (i, j) in p.diagnostic_pairs:
            below += p.below_steps[p.diagnostic_pairs.index((i, j))]
        if p.off_zero_steps:
            off += p.off_zero_steps[i]
    theta_hat = below / total_steps if total_steps else 0.0
    xi_hat = off / total_steps if total_steps else 0.0

    inc = inc_n = sim = sup = sup_n = 0
    for led in ledgers:
        if led.aborted is not None:
            continue
        ti = np.asarray(led.track(f"L{i}").times)
        tj = np.asarray(led.track(f"L{j}").times)
        td = np.asarray(led.track(f"D{i}-{j}").times) if led.has(f"D{i}-{j}") else np.asarray([])
        m, k = _matched_fraction(ti, tj, w)
        inc += m
        inc_n += k
        m, _ = _matched_fraction(ti, td, w)
        sim += m
        either = np.sort(np.concatenate([ti, td]))
        m, k = _matched_fraction(tj, either, w)
        sup += m
        sup_n += k

    diag = CouplingDiagnostics(
        theta_hat=theta_hat,
        xi_hat=xi_hat,
        inclusion_fraction=inc / inc_n if inc_n else 1.0,
        simultaneity_fraction=sim / inc_n if inc_n else 0.0,
        superposition_fraction=sup / sup_n if sup_n else 1.0,
        window=w,
        replicates=len(ledgers),
    )
    logger.info(
        "[Verify] coupling beta=%g theta=%.4g xi=%.4g inclusion=%.4f simultaneity=%.4f",
        params.beta, diag.theta_hat, diag.xi_hat, diag.inclusion_fraction, diag.simultaneity_fraction,
    )
    return diag


def _probe_report(name: str, times: np.ndarray, censored: np.ndarray, window: float,
                  threshold: float, meta: Dict[str, object], on_estimate: bool = False) -> TestReport:
    n = int(times.size)
    hits = int(np.sum(~censored & (times <= window)))
    ci = stats.binomtest(hits, n).proportion_ci(confidence_level=0.95)
    p_hat = hits / n
    meta.update({"window": window, "ci": [float(ci.low), float(ci.high)], "hits": hits})
    passed = p_hat >= threshold if on_estimate else float(ci.high) >= threshold
    return TestReport(name=name, statistic=p_hat, reference=threshold, threshold=threshold,
                      passed=bool(passed), n=n, metadata=meta)


def fast_reach_probe(
    beta: float,
    lam: float,
    epsilon: float,
    n: int,
    master_seed: int,
    step: float = 0.01,
    theta0: Optional[float] = None,
    threshold: Optional[float] = FAST_REACH_LEVEL,
) -> TestReport:
    """
    P[theta reaches 2pi within 9 log(1/beta)] from 2pi - 4 arctan(beta^eps).

    Passes when the estimated probability is at least `threshold`; the 95%
    Clopper-Pearson interval is kept in the metadata. With threshold=None the
    report is informational and always passes.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must be in (0, 1)")
    start = TWO_PI - 4.0 * math.atan(beta ** epsilon) if theta0 is None else theta0
    window = fast_reach_window(beta)
    times, censored = first_passage(start, lam * beta / 4.0, n, master_seed, step, window, purpose=STREAM_FAST_REACH)
    return _probe_report("fast_reach", times, censored, window, 0.0 if threshold is None else threshold,
                         {"beta": beta, "lambda": lam, "epsilon": epsilon, "theta0": start,
                          "informational": threshold is None},
                         on_estimate=True)


def lower_bound_probe(beta: float, lam: float, n: int, master_seed: int, step: float = 0.01) -> TestReport:
    """From 4 arctan(beta^1/4), reaching 2pi within 10 log(1/beta) has probability at least sqrt(beta)."""
    start = near_zero_threshold(beta)
    window = 10.0 * math.log(1.0 / beta)
    times, censored = first_passage(start, lam * beta / 4.0, n, master_seed, step, window, purpose=STREAM_LOWER_BOUND)
    return _probe_report("lower_bound", times, censored, window, math.sqrt(beta),
                         {"beta": beta, "lambda": lam, "theta0": start})
