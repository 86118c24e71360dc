# sinebeta_app/sinesde.py
from __future__ import annotations

import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from sinebeta_app.models import (
    TWO_PI,
    FamilyPath,
    FamilyState,
    IntegratorSettings,
    JumpLedger,
    MeanCurve,
    ModelParams,
    NoiseIncrements,
    ProcessTrack,
    TestReport,
    near_zero_threshold,
)
from sinebeta_app.rng import STREAM_FAMILY, family_feed

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]
BlockResult = List[Tuple[FamilyPath, JumpLedger]]


class IntegrationAborted(RuntimeError):
    """The Euler state went non-finite; the step is too large for these parameters."""

    def __init__(self, message: str, replicate: int = -1, step_index: int = -1):
        super().__init__(message)
        self.replicate = replicate
        self.step_index = step_index


def drift(lam: float, beta: float, t: float) -> float:
    return lam * (beta / 4.0) * math.exp(-beta * t / 4.0)


def wrap_2pi(x):
    """x - 2pi*floor(x/2pi), in [0, 2pi). Works on scalars and arrays."""
    r = np.asarray(x, dtype=float) - TWO_PI * np.floor(np.asarray(x, dtype=float) / TWO_PI)
    # tiny negative inputs round up to exactly 2pi
    r = np.where(r >= TWO_PI, 0.0, r)
    if np.ndim(r) == 0:
        return float(r)
    return r


def noise_coefficients(alpha):
    """
    Loadings of (dx, dy) in the increment of alpha.

    cos(a) - 1 is evaluated as -2 sin^2(a/2), which keeps full relative precision
    near the multiples of 2pi where the process spends most of its time.
    """
    s = np.sin(np.asarray(alpha, dtype=float) * 0.5)
    return -2.0 * s * s, np.sin(alpha)


def euler_increment(alphas, lams: np.ndarray, beta: float, t: float, h: float, dx, dy):
    """alpha(t + h) from alpha(t); alphas may be one family or a block of rows."""
    c_dx, c_dy = noise_coefficients(alphas)
    return alphas + lams * (beta / 4.0 * h * math.exp(-beta * t / 4.0)) + c_dx * dx + c_dy * dy


def step_family(state: FamilyState, noise: NoiseIncrements, params: ModelParams, h: float) -> FamilyState:
    alphas = np.asarray(state.alphas, dtype=float)
    lams = np.asarray(params.lambdas, dtype=float)
    if alphas.shape != lams.shape:
        raise ValueError(f"state has {alphas.size} angles but params has {lams.size} lambdas")
    nxt = euler_increment(alphas, lams, params.beta, state.t, h, noise.dx, noise.dy)
    if not np.all(np.isfinite(nxt)):
        raise IntegrationAborted(f"non-finite angle after step at t={state.t:g}")
    return FamilyState(t=state.t + h, alphas=tuple(float(a) for a in nxt))


def _process_ids(n_levels: int, pairs: Sequence[Pair]) -> List[Tuple[str, str]]:
    out = [(f"L{i}", "level") for i in range(n_levels)]
    out += [(f"D{i}-{j}", "difference") for i, j in pairs]
    return out


def simulate_batch(
    params: ModelParams,
    settings: IntegratorSettings,
    master_seed: int,
    replicate_ids: Sequence[int],
    tracked_pairs: Sequence[Pair] = (),
    checkpoints: Sequence[float] = (),
    diagnostic_pairs: Sequence[Pair] = (),
    purpose: int = STREAM_FAMILY,
) -> BlockResult:
    """
    Integrate one block of replicates of the coupled family with shared (dx, dy) noise.

    Every row only touches its own substream and elementwise arithmetic, so a
    replicate's ledger does not depend on which block it was computed in.
    """
    n_lam = len(params.lambdas)
    for i, j in list(tracked_pairs) + list(diagnostic_pairs):
        if not (0 <= i < n_lam and 0 <= j < n_lam and i < j):
            raise ValueError(f"pair ({i}, {j}) must index two lambdas with i < j")

    ids = [int(r) for r in replicate_ids]
    n_rep = len(ids)
    h = settings.step
    beta = params.beta
    n_steps = settings.n_steps(beta)

    cp_steps: List[int] = []
    for t in checkpoints:
        k = int(round(t / h))
        if k < 0 or k > n_steps:
            raise ValueError(f"checkpoint t={t:g} outside the simulated horizon")
        cp_steps.append(k)

    pi_idx = np.asarray([p[0] for p in tracked_pairs], dtype=int)
    pj_idx = np.asarray([p[1] for p in tracked_pairs], dtype=int)
    di_idx = np.asarray([p[0] for p in diagnostic_pairs], dtype=int)
    dj_idx = np.asarray([p[1] for p in diagnostic_pairs], dtype=int)
    diagnostics = len(diagnostic_pairs) > 0
    near_zero = near_zero_threshold(beta)

    proc = _process_ids(n_lam, tracked_pairs)
    n_proc = len(proc)

    lams = np.asarray(params.lambdas, dtype=float)
    alpha = np.zeros((n_rep, n_lam))
    floors = np.zeros((n_rep, n_proc))
    run_max = np.zeros((n_rep, n_proc))
    alive = np.ones(n_rep, dtype=bool)
    aborted: List[Optional[str]] = [None] * n_rep
    multi = np.zeros(n_rep, dtype=bool)
    monotone = np.zeros(n_rep, dtype=np.int64)
    decrements = np.zeros(n_rep, dtype=np.int64)
    below = np.zeros((n_rep, len(diagnostic_pairs)), dtype=np.int64)
    off_zero = np.zeros((n_rep, n_lam), dtype=np.int64)
    jumps: List[List[List[float]]] = [[[] for _ in range(n_proc)] for _ in range(n_rep)]
    cp_values = np.zeros((len(cp_steps), n_rep, n_lam))

    feed = family_feed(master_seed, ids, h, purpose=purpose)
    t = 0.0

    for k, s in enumerate(cp_steps):
        if s == 0:
            cp_values[k] = alpha

    for n in range(n_steps):
        z = feed.next()
        nxt = euler_increment(alpha, lams, beta, t, h, z[:, 0:1], z[:, 1:2])
        t += h

        bad = alive & ~np.isfinite(nxt).all(axis=1)
        if bad.any():
            for b in np.nonzero(bad)[0]:
                aborted[b] = f"non-finite state at step {n}"
                logger.warning("[Sim] replicate=%d aborted at step=%d (non-finite state)", ids[b], n)
            alive &= ~bad
        if not alive.all():
            nxt[~alive] = alpha[~alive]
        alpha = nxt

        if tracked_pairs:
            values = np.concatenate([alpha, alpha[:, pj_idx] - alpha[:, pi_idx]], axis=1)
        else:
            values = alpha
        new_floors = np.floor(values / TWO_PI)
        decrements += (new_floors < floors).any(axis=1)
        floors = new_floors

        up = new_floors > run_max
        if up.any():
            t_mid = (n + 0.5) * h
            for b, p in zip(*np.nonzero(up)):
                k = int(new_floors[b, p] - run_max[b, p])
                if k > 1:
                    multi[b] = True
                jumps[b][p].extend([t_mid] * k)
            np.maximum(run_max, new_floors, out=run_max)

        if n_lam > 1:
            monotone += (alpha[:, 1:] < alpha[:, :-1]).any(axis=1)
        if diagnostics:
            wrapped = alpha - TWO_PI * np.floor(alpha / TWO_PI)
            below += wrapped[:, dj_idx] < wrapped[:, di_idx]
            off_zero += wrapped >= near_zero

        for k, s in enumerate(cp_steps):
            if s == n + 1:
                cp_values[k] = alpha

    if tracked_pairs:
        final_values = np.concatenate([alpha, alpha[:, pj_idx] - alpha[:, pi_idx]], axis=1)
    else:
        final_values = alpha
    band = settings.settle_band

    out: BlockResult = []
    for b, rid in enumerate(ids):
        tracks = []
        for p, (pid, kind) in enumerate(proc):
            end = float(final_values[b, p])
            residue = wrap_2pi(end)
            tracks.append(
                ProcessTrack(
                    process_id=pid,
                    kind=kind,
                    times=tuple(jumps[b][p]),
                    endpoint=end,
                    endpoint_count=int(np.rint(end / TWO_PI)),
                    unsettled=bool(band <= residue <= TWO_PI - band),
                )
            )
        if multi[b]:
            logger.warning("[Sim] replicate=%d recorded a multi-level jump in one step", rid)
        ledger = JumpLedger(replicate=rid, tracks=tuple(tracks), multi_jump=bool(multi[b]), aborted=aborted[b])
        path = FamilyPath(
            replicate=rid,
            steps=n_steps,
            final_alphas=tuple(float(a) for a in alpha[b]),
            checkpoint_times=tuple(s * h for s in cp_steps),
            checkpoint_alphas=tuple(tuple(float(a) for a in cp_values[k, b]) for k in range(len(cp_steps))),
            monotone_violations=int(monotone[b]),
            floor_decrements=int(decrements[b]),
            diagnostic_pairs=tuple(tuple(p) for p in diagnostic_pairs),
            below_steps=tuple(int(x) for x in below[b]),
            off_zero_steps=tuple(int(x) for x in off_zero[b]) if diagnostics else (),
        )
        out.append((path, ledger))
    logger.debug("[Sim] block done: replicates=%d steps=%d beta=%g", n_rep, n_steps, beta)
    return out


def simulate_replicate(
    params: ModelParams,
    settings: IntegratorSettings,
    master_seed: int,
    replicate: int,
    tracked_pairs: Sequence[Pair] = (),
    checkpoints: Sequence[float] = (),
    diagnostic_pairs: Sequence[Pair] = (),
) -> Tuple[FamilyPath, JumpLedger]:
    return simulate_batch(
        params, settings, master_seed, [replicate],
        tracked_pairs=tracked_pairs, checkpoints=checkpoints, diagnostic_pairs=diagnostic_pairs,
    )[0]


# ---------------------------------------------------------------- mean identity


def analytic_mean(lam: float, beta: float, t: float) -> float:
    """E[alpha_lambda(t)] = lambda*(1 - exp(-beta*t/4))."""
    return lam * -math.expm1(-beta * t / 4.0)


def mean_curve(paths: Sequence[FamilyPath], lambdas: Sequence[float]) -> MeanCurve:
    if not paths:
        raise ValueError("mean_curve needs at least one replicate")
    arr = np.asarray([p.checkpoint_alphas for p in paths], dtype=float)  # [rep][cp][lam]
    n = arr.shape[0]
    means = arr.mean(axis=0)
    se = arr.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(means)
    return MeanCurve(
        times=paths[0].checkpoint_times,
        lambdas=tuple(float(x) for x in lambdas),
        means=tuple(tuple(float(v) for v in row) for row in means),
        std_errors=tuple(tuple(float(v) for v in row) for row in se),
        replicates=n,
    )


def mean_alpha(
    params: ModelParams,
    settings: IntegratorSettings,
    replicates: int,
    master_seed: int,
    checkpoints: Sequence[float],
    batch_size: int = 250,
    map_blocks: Optional[Callable[[Callable[[Sequence[int]], BlockResult], Sequence[int], int], BlockResult]] = None,
) -> MeanCurve:
    if replicates < 100:
        raise ValueError("mean_alpha needs >= 100 replicates")

    def block(ids: Sequence[int]) -> BlockResult:
        return simulate_batch(params, settings, master_seed, ids, checkpoints=checkpoints)

    ids = list(range(replicates))
    if map_blocks is None:
        results: BlockResult = []
        for start in range(0, replicates, batch_size):
            results.extend(block(ids[start:start + batch_size]))
    else:
        results = map_blocks(block, ids, batch_size)
    paths = [p for p, led in results if led.aborted is None]
    return mean_curve(paths, params.lambdas)


def mean_identity_report(curve: MeanCurve, beta: float, step: float, sigmas: float = 3.0) -> TestReport:
    """Every checkpoint mean within sigmas*SE plus the Euler bias allowance 2*lambda*beta*h/4."""
    worst = 0.0
    rows = []
    half = curve.half_widths(sigmas)
    for k, t in enumerate(curve.times):
        for m, lam in enumerate(curve.lambdas):
            target = analytic_mean(lam, beta, t)
            dev = abs(curve.means[k][m] - target)
            tol = float(half[k, m]) + 2.0 * lam * beta * step / 4.0
            ratio = dev / tol if tol > 0 else (0.0 if dev == 0 else math.inf)
            worst = max(worst, ratio)
            rows.append({"t": t, "lambda": lam, "mean": curve.means[k][m], "target": target, "tol": tol})
    return TestReport(
        name="mean_identity",
        statistic=worst,
        reference="lambda*(1-exp(-beta*t/4))",
        threshold=1.0,
        passed=worst <= 1.0,
        n=curve.replicates,
        metadata={"beta": beta, "step": step, "checkpoints": rows},
    )


def violation_fraction(paths: Sequence[FamilyPath]) -> float:
    """Share of steps with a monotone-coupling violation between adjacent lambdas."""
    steps = sum(p.steps for p in paths)
    if steps == 0:
        return 0.0
    return sum(p.monotone_violations for p in paths) / steps


def floor_decrement_fraction(paths: Sequence[FamilyPath]) -> float:
    steps = sum(p.steps for p in paths)
    if steps == 0:
        return 0.0
    return sum(p.floor_decrements for p in paths) / steps


def h_scaling_report(coarse: Sequence[FamilyPath], fine: Sequence[FamilyPath], step: float) -> TestReport:
    """Halving the step must at least halve the monotone-coupling violation fraction."""
    c, f = violation_fraction(coarse), violation_fraction(fine)
    return TestReport(
        name="monotone_coupling_h_scaling",
        statistic=f,
        reference=c,
        threshold=0.5 * c,
        passed=f <= 0.5 * c,
        n=len(fine),
        metadata={"step": step, "half_step": step / 2.0, "coarse_fraction": c, "fine_fraction": f},
    )
