# sinebeta_app/welltime.py
"""
Exit-time analysis of the stationary well.

With c = lambda*beta/4 the potential is V(r) = -1/2 (c sinh r + log cosh r). Everything
here works with F = -2V so that the expected exit time from r reads

    t(r) = 2 * int_r^inf dx int_-inf^x exp(F(y) - F(x)) dy

and every exponential is taken of a difference of F values, never of F alone.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from sinebeta_app.models import (
    TWO_PI,
    CriticalPoints,
    PassageSample,
    QuadratureResult,
    QuadratureSettings,
    WellSpec,
    near_zero_threshold,
)
from sinebeta_app.rng import STREAM_PASSAGE, family_feed

logger = logging.getLogger(__name__)

LOG2 = math.log(2.0)
# sinh(-r) = 1 where the right-hand side of the critical-point equation peaks
S_STAR = math.asinh(1.0)
# above this slope the inner integral is replaced by its Laplace expansion
LARGE_SLOPE = 1e6
# width, in units of 1/F'(x), of the boundary layer split off the inner integral
BOUNDARY_LAYER = 50.0
# quad refuses relative tolerances below 50 machine epsilons
MIN_EPSREL = 50.0 * np.finfo(float).eps


class DegenerateWellError(ValueError):
    """lambda*beta/8 >= 1/4: V has no interior minimum or maximum."""


class QuadratureError(RuntimeError):
    def __init__(self, message: str, partial: QuadratureResult):
        super().__init__(message)
        self.partial = partial


# ---------------------------------------------------------------- potential


def _sinh(y: float) -> float:
    try:
        return math.sinh(y)
    except OverflowError:
        return math.copysign(math.inf, y)


def _cosh(y: float) -> float:
    try:
        return math.cosh(y)
    except OverflowError:
        return math.inf


def _logcosh(y: float) -> float:
    ay = abs(y)
    return ay + math.log1p(math.exp(-2.0 * ay)) - LOG2


def _F(y: float, c: float) -> float:
    return c * _sinh(y) + _logcosh(y)


def _dF(y: float, c: float) -> float:
    return c * _cosh(y) + math.tanh(y)


def _d2F(y: float, c: float) -> float:
    ch = _cosh(y)
    return c * _sinh(y) + (1.0 / (ch * ch) if math.isfinite(ch) else 0.0)


def _F_array(y: np.ndarray, c: float) -> np.ndarray:
    ay = np.abs(y)
    with np.errstate(over="ignore"):
        return c * np.sinh(y) + ay + np.log1p(np.exp(-2.0 * ay)) - LOG2


def potential(r, spec: WellSpec):
    """V(r); finite for |r| up to about 700."""
    if np.ndim(r) > 0:
        return -0.5 * _F_array(np.asarray(r, dtype=float), spec.drift)
    return -0.5 * _F(float(r), spec.drift)


def potential_derivative(r: float, spec: WellSpec) -> float:
    return -0.5 * _dF(float(r), spec.drift)


def critical_points(spec: WellSpec) -> CriticalPoints:
    """Well bottom a and barrier top b, roots of c cosh r + tanh r = 0 on r < 0."""
    if not spec.has_well:
        raise DegenerateWellError(
            f"no interior extrema: lambda*beta/8={spec.lam * spec.beta / 8.0:g} >= 1/4"
        )
    c = spec.drift

    def g(r: float) -> float:
        return _dF(r, c)

    b = brentq(g, -S_STAR, 0.0, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    lo = math.log(c / 2.0) - 2.0
    while g(lo) <= 0:
        lo -= 2.0
    a = brentq(g, lo, -S_STAR, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    return CriticalPoints(a=a, b=b, v_a=potential(a, spec), v_b=potential(b, spec))


def asymptotic_critical_points(spec: WellSpec) -> CriticalPoints:
    """Small-beta expansions of a, b and the potential values there."""
    lb = spec.lam * spec.beta
    return CriticalPoints(
        a=math.log(lb / 8.0),
        b=-lb / 4.0,
        v_a=0.5 * math.log(spec.beta) + 0.5 * math.log(spec.lam) - LOG2 + 0.5,
        v_b=lb * lb / 64.0,
    )


def barrier_height(spec: WellSpec) -> float:
    cp = critical_points(spec)
    return cp.v_b - cp.v_a


# ---------------------------------------------------------------- adaptive quadrature


@dataclass
class _InnerStats:
    max_rel: float = 0.0
    evaluations: int = 0


def _inner(x: float, c: float, cp: CriticalPoints, f_a: float, drop: float,
           qset: QuadratureSettings, stats: _InnerStats) -> float:
    """J(x) = int_-inf^x exp(F(y) - F(x)) dy."""
    slope = _dF(x, c)
    if slope > LARGE_SLOPE:
        curv = _d2F(x, c)
        stats.max_rel = max(stats.max_rel, 3.0 / (slope * slope))
        return 1.0 / slope + curv / slope ** 3

    fx = _F(x, c)
    start = min(x, cp.a)
    peak = max(f_a, fx) if x > cp.a else fx
    d = min(0.25, 1.0 / abs(slope)) if slope != 0 else 0.25
    lo = start - d
    while _F(lo, c) > peak - drop:
        d *= 2.0
        lo -= d

    cuts = [lo]
    if lo < cp.a < x:
        cuts.append(cp.a)
    if slope > 1.0:
        layer = x - BOUNDARY_LAYER / slope
        if layer > cuts[-1]:
            cuts.append(layer)
    cuts.append(x)

    def integrand(y: float) -> float:
        return math.exp(_F(y, c) - fx)

    total = 0.0
    err = 0.0
    for u, v in zip(cuts, cuts[1:]):
        val, abserr, info = quad(
            integrand, u, v, epsabs=0.0, epsrel=max(qset.rel_tol * 0.01, MIN_EPSREL),
            limit=qset.limit, full_output=1,
        )[:3]
        total += val
        err += abserr
        stats.evaluations += int(info["neval"])
    if total > 0:
        stats.max_rel = max(stats.max_rel, err / total)
    return total


def expected_exit_time(r: float, spec: WellSpec, qset: Optional[QuadratureSettings] = None) -> QuadratureResult:
    qset = qset or QuadratureSettings()
    if not math.isfinite(r):
        raise ValueError("r must be finite")
    cp = critical_points(spec)
    c = spec.drift
    drop = qset.log_drop
    f_a = _F(cp.a, c)
    stats = _InnerStats()

    def J(x: float) -> float:
        return _inner(x, c, cp, f_a, drop, qset, stats)

    # outer truncation: walk right until log J sits `drop` below its running peak
    x_hi = max(r, cp.b)
    peak = math.log(J(x_hi))
    while True:
        x_hi += 1.0
        jx = J(x_hi)
        if jx <= 0:
            break
        lj = math.log(jx)
        peak = max(peak, lj)
        if lj < peak - drop:
            break

    points = [p for p in (cp.a, cp.b) if r < p < x_hi]
    outer, abserr, info = quad(
        J, r, x_hi, points=points or None, epsabs=0.0, epsrel=max(0.5 * qset.rel_tol, MIN_EPSREL),
        limit=qset.limit, full_output=1,
    )[:3]
    value = 2.0 * outer
    est = 2.0 * abserr + value * stats.max_rel
    evaluations = int(info["neval"]) + stats.evaluations
    result = QuadratureResult(value=value, est_error=est, evaluations=evaluations)
    logger.debug(
        "[Well] t(r=%g) beta=%g lambda=%g -> %.10g (err=%.3g, evals=%d)",
        r, spec.beta, spec.lam, value, est, evaluations,
    )
    if not est <= qset.rel_tol * abs(value):
        raise QuadratureError(
            f"exit-time quadrature missed rel_tol={qset.rel_tol:g} (est_error={est:.3g}, value={value:.6g})",
            partial=result,
        )
    return result


def exit_ratio_ladder(lam: float, betas: Sequence[float], qset: Optional[QuadratureSettings] = None) -> List[Dict[str, float]]:
    """Quadrature table rows for each beta; the "ratio" column t(a)*beta*lambda/8pi tends to 1 as beta -> 0."""
    rows = []
    for beta in betas:
        row = welltime_row(WellSpec(beta=beta, lam=lam), qset)
        logger.info("[Well] beta=%g lambda=%g ratio=%.6f", beta, lam, row["ratio"])
        rows.append(row)
    return rows


# ---------------------------------------------------------------- dense-grid operator


def _log_cumtrapz(logf: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """log of int_x0^xk exp(logf) with logf interpolated linearly on each cell."""
    lo, hi = logf[:-1], logf[1:]
    top = np.maximum(lo, hi)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        d = np.abs(hi - lo)
        factor = np.where(d < 1e-12, 1.0, -np.expm1(-d) / d)
        # one end is exactly zero: fall back to the plain trapezoid
        factor = np.where(np.isinf(d), 0.5, factor)
        seg = np.log(dx) + top + np.log(factor)
    seg = np.where(np.isneginf(top), -np.inf, seg)
    out = np.empty_like(logf)
    out[0] = -np.inf
    with np.errstate(invalid="ignore"):
        out[1:] = np.logaddexp.accumulate(seg)
    return out


@dataclass(frozen=True)
class WellGrid:
    """Fixed grid carrying the Green operator K of the well."""

    x: np.ndarray
    F: np.ndarray

    @staticmethod
    def build(spec: WellSpec, anchors: Sequence[float], qset: QuadratureSettings) -> "WellGrid":
        cp = critical_points(spec)
        c = spec.drift
        drop = qset.log_drop
        start = min(min(anchors), cp.a)
        f_start = _F(start, c)
        d = 0.25
        x_lo = start - d
        while _F(x_lo, c) > f_start - drop:
            d *= 2.0
            x_lo -= d
        gap = _F(cp.a, c) - _F(cp.b, c)
        x_hi = cp.b + 1.0
        while -math.log(_dF(x_hi, c)) > gap - drop:
            x_hi += 1.0
        for r in anchors:
            if not x_lo <= r <= x_hi:
                raise ValueError(f"r={r:g} outside the grid [{x_lo:g}, {x_hi:g}]")
        x = np.union1d(np.linspace(x_lo, x_hi, qset.grid_points), np.asarray(anchors, dtype=float))
        return WellGrid(x=x, F=_F_array(x, c))

    def index(self, r: float) -> int:
        return int(np.searchsorted(self.x, r))

    def apply(self, h: np.ndarray) -> np.ndarray:
        """K[h](x) = 2 int_x^inf dx' int_-inf^x' exp(F(y) - F(x')) h(y) dy on every node."""
        h = np.asarray(h, dtype=float)
        dx = np.diff(self.x)
        J = np.zeros_like(self.x)
        # signed h: integrate positive and negative parts separately in log domain
        for sign, part in ((1.0, np.maximum(h, 0.0)), (-1.0, np.maximum(-h, 0.0))):
            if not part.any():
                continue
            with np.errstate(divide="ignore"):
                logf = self.F + np.log(part)
            J += sign * np.exp(_log_cumtrapz(logf, dx) - self.F)
        seg = 0.5 * (J[:-1] + J[1:]) * dx
        tail = np.zeros_like(self.x)
        tail[:-1] = np.cumsum(seg[::-1])[::-1]
        return 2.0 * tail


def exit_time_profile(spec: WellSpec, r_values: Sequence[float], qset: Optional[QuadratureSettings] = None) -> np.ndarray:
    """Brute-force t(r): log-domain trapezoid inside, plain trapezoid outside, on one dense grid."""
    qset = qset or QuadratureSettings()
    r_values = [float(r) for r in np.atleast_1d(r_values)]
    grid = WellGrid.build(spec, r_values, qset)
    t = grid.apply(np.ones_like(grid.x))
    return np.asarray([t[grid.index(r)] for r in r_values])


# ---------------------------------------------------------------- Laplace transform


def laplace_bounds(r: float, xi: float, spec: WellSpec, qset: Optional[QuadratureSettings] = None) -> Tuple[float, float]:
    """1 - xi' t(r) <= g(r) <= 1 - xi' t(r) + xi'^2 K[t](r), with xi' = xi*beta*lambda/8pi."""
    qset = qset or QuadratureSettings()
    grid = WellGrid.build(spec, [r], qset)
    xi_r = xi * spec.rescale
    t = grid.apply(np.ones_like(grid.x))
    kt = grid.apply(t)
    i = grid.index(r)
    lower = 1.0 - xi_r * t[i]
    return lower, lower + xi_r * xi_r * kt[i]


def laplace_g(r: float, xi: float, spec: WellSpec, qset: Optional[QuadratureSettings] = None) -> QuadratureResult:
    """
    Laplace transform E[exp(-xi' tau_r)] of the exit time, from the fixed point g = 1 - xi' K[g].

    The first two sweeps are plain substitutions and give the lower and upper
    bounds. Later sweeps relax with weight w = 1/(1 + xi' max t): K is positive with
    spectrum inside [0, max t], so the relaxed map contracts for every xi > 0.
    """
    qset = qset or QuadratureSettings()
    if not xi > 0:
        raise ValueError("xi must be > 0")
    grid = WellGrid.build(spec, [r], qset)
    i = grid.index(r)
    xi_r = xi * spec.rescale

    t = grid.apply(np.ones_like(grid.x))
    g = 1.0 - xi_r * t
    lower = float(g[i])
    g_next = 1.0 - xi_r * grid.apply(g)
    upper = min(1.0, float(g_next[i]))
    change = abs(g_next[i] - g[i])
    g = g_next
    iterations = 2

    omega = qset.damping if qset.damping is not None else 1.0 / (1.0 + xi_r * float(t.max()))
    tol = max(1e-9, 10.0 * qset.rel_tol)
    bounds_held = lower - tol <= g[i] <= upper + tol

    while change > qset.rel_tol * abs(g[i]) and iterations < qset.max_iterations:
        g_next = (1.0 - omega) * g + omega * (1.0 - xi_r * grid.apply(g))
        change = abs(g_next[i] - g[i])
        g = g_next
        iterations += 1
        if not (lower - tol <= g[i] <= upper + tol):
            bounds_held = False
        if not np.all(np.isfinite(g)):
            break

    result = QuadratureResult(
        value=float(g[i]),
        est_error=float(change),
        evaluations=iterations * grid.x.size,
        iterations=iterations,
        lower=lower,
        upper=upper,
        bounds_held=bool(bounds_held),
    )
    logger.info(
        "[Well] g(r=%g, xi=%g) beta=%g -> %.6f in %d sweeps (bounds [%.6f, %.6f] held=%s)",
        r, xi, spec.beta, result.value, iterations, lower, upper, bounds_held,
    )
    if not (math.isfinite(result.value) and change <= qset.rel_tol * abs(g[i])):
        raise QuadratureError(
            f"fixed point did not settle within {qset.max_iterations} sweeps (last change {change:.3g})",
            partial=result,
        )
    return result


# ---------------------------------------------------------------- passage sampling


def first_passage(
    theta0: float,
    drift_rate: float,
    n: int,
    master_seed: int,
    step: float = 0.01,
    max_time: float = math.inf,
    purpose: int = STREAM_PASSAGE,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Euler paths of d theta = drift_rate dt + 2 sin(theta/2) dB until theta >= 2pi.

    Returns (times, censored): the hit time of each path (step midpoint) and a mask
    of paths still running at max_time, whose time is NaN.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if theta0 < 0:
        raise ValueError("theta0 must be >= 0")
    if not 0 < step <= 0.05:
        raise ValueError("step must be in (0, 0.05]")
    times = np.full(n, np.nan)
    censored = np.zeros(n, dtype=bool)
    if theta0 >= TWO_PI:
        times[:] = 0.0
        return times, censored

    feed = family_feed(master_seed, range(n), step, purpose=purpose, width=1)
    theta = np.full(n, float(theta0))
    rows = np.arange(n)
    done = np.zeros(n, dtype=bool)
    mu = drift_rate * step
    n_max = int(math.ceil(max_time / step)) if math.isfinite(max_time) else None

    k = 0
    while rows.size and (n_max is None or k < n_max):
        z = feed.next()[:, 0]
        theta = theta + mu + 2.0 * np.sin(0.5 * theta) * z
        k += 1
        hit = (theta >= TWO_PI) & ~done
        if hit.any():
            times[rows[hit]] = (k - 0.5) * step
            done |= hit
            if done.sum() * 2 >= rows.size:
                keep = ~done
                rows, theta, done = rows[keep], theta[keep], done[keep]
                feed.select(keep)
    still = rows[~done]
    censored[still] = True
    return times, censored


def sample_passage_times(
    spec: WellSpec,
    theta0: Optional[float] = None,
    n: int = 1000,
    master_seed: int = 0,
    step: float = 0.01,
    max_factor: float = 100.0,
) -> PassageSample:
    """First hits of 2pi by the stationary angle diffusion; rescaled times are close to Exp(1)."""
    if theta0 is None:
        theta0 = near_zero_threshold(spec.beta)
    if not 0 < theta0 < TWO_PI:
        raise ValueError("theta0 must be in (0, 2pi)")
    max_time = max_factor * spec.mean_exit_time
    times, censored = first_passage(theta0, spec.drift, n, master_seed, step, max_time)
    n_cens = int(censored.sum())
    if n_cens:
        logger.warning("[Well] %d of %d passage paths censored at t=%g", n_cens, n, max_time)
    return PassageSample(
        raw_times=tuple(float(t) for t in times[~censored]),
        rescale=spec.rescale,
        censored=n_cens,
        theta0=float(theta0),
        step=step,
    )


def welltime_row(spec: WellSpec, qset: Optional[QuadratureSettings] = None) -> Dict[str, float]:
    """One row of the quadrature table written by the welltime command."""
    cp = critical_points(spec)
    res = expected_exit_time(cp.a, spec, qset)
    return {
        "beta": spec.beta,
        "lambda": spec.lam,
        "a": cp.a,
        "b": cp.b,
        "v_a": cp.v_a,
        "v_b": cp.v_b,
        "t_a": res.value,
        "est_error": res.est_error,
        "ratio": res.value * spec.rescale,
    }
