# sinebeta_app/runner.py
from __future__ import annotations

import json
import logging
import math
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import pandas as pd

from sinebeta_app import __version__, ppstats, suites
from sinebeta_app.config import config_hash
from sinebeta_app.formatter import format_reports, format_summary
from sinebeta_app.models import SCHEMA_VERSION, RunConfig, RunManifest, TestReport
from sinebeta_app.pool import ReplicatePool
from sinebeta_app.writer import (
    write_counts,
    write_json,
    write_jumps,
    write_manifest,
    write_reports,
    write_rows,
    write_text,
)

logger = logging.getLogger(__name__)


def exit_status(reports: Sequence[TestReport]) -> int:
    return 0 if reports and all(r.passed for r in reports) else 1


def _failure(suite: str, err: BaseException) -> TestReport:
    return TestReport(
        name=f"{suite}_error", statistic=math.nan, reference=None, threshold=math.nan, passed=False, n=0,
        metadata={"error": f"{type(err).__name__}: {err}"},
    )


def _run_suite(name: str, ctx: suites.SuiteContext) -> List[TestReport]:
    t0 = time.time()
    logger.info("[Verify] suite '%s' starting", name)
    try:
        reports = suites.SUITES[name](ctx)
    except Exception as e:
        logger.exception("[Verify] suite '%s' failed: %s", name, e)
        reports = [_failure(name, e)]
    for r in reports:
        r.metadata["suite"] = name
    ok = all(r.passed for r in reports)
    logger.info("[Verify] suite '%s' %s in %.1fs", name, "passed" if ok else "FAILED", time.time() - t0)
    return reports


def _simulate(ctx: suites.SuiteContext) -> List[TestReport]:
    ledgers = [led for _, led in ctx.main_family()]
    rep = ppstats.settledness_report(ledgers)
    rep.metadata.update({"suite": "simulate", "beta": ctx.cfg.params.beta})
    return [rep]


def _welltime(ctx: suites.SuiteContext, out_dir: Path) -> List[TestReport]:
    method = ctx.cfg.welltime.method
    try:
        if method == "quadrature":
            reports, rows = suites.quadrature_reports(ctx)
        else:
            reports, rows = suites.passage_reports(ctx)
    except Exception as e:
        logger.exception("[Well] %s run failed: %s", method, e)
        reports, rows = [_failure(f"welltime_{method}", e)], []
    if rows:
        write_rows(out_dir / "welltime.csv", rows)
    for r in reports:
        r.metadata["suite"] = f"welltime_{method}"
    return reports


def run(cfg: RunConfig) -> int:
    out_dir = Path(cfg.output_dir)
    if cfg.mode == "report":
        return aggregate_reports(out_dir)

    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    run_id = digest[:12]
    logger.info("[Config] mode=%s seed=%d run_id=%s output=%s", cfg.mode, cfg.seed, run_id, out_dir)

    ctx = suites.SuiteContext(cfg=cfg, pool=ReplicatePool(cfg.workers))
    reports: List[TestReport] = []
    if cfg.mode == "simulate":
        reports = _simulate(ctx)
    elif cfg.mode == "welltime":
        reports = _welltime(ctx, out_dir)
    else:
        for name in suites.expand(cfg.suites):
            reports.extend(_run_suite(name, ctx))

    for r in reports:
        r.metadata.setdefault("seed", cfg.seed)
        r.metadata.setdefault("config_hash", digest)

    if ctx.main_used:
        ledgers = [led for _, led in ctx.main_family()]
        write_jumps(out_dir / "jumps.csv", ledgers, cfg.params.beta)
        write_counts(out_dir / "counts.csv", ctx.main_table())

    write_reports(out_dir / "report.json", reports, run_id)
    per_suite: Dict[str, bool] = {}
    for r in reports:
        s = str(r.metadata.get("suite", cfg.mode))
        per_suite[s] = per_suite.get(s, True) and r.passed
    manifest = RunManifest(
        config_hash=digest,
        tool_version=__version__,
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        suites=per_suite,
    )
    write_manifest(out_dir / "manifest.json", manifest)

    print(format_reports(reports))
    return exit_status(reports)


# ---------------------------------------------------------------- aggregation


def _load_report(path: Path) -> Tuple[str, List[TestReport]]:
    payload = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(payload, dict) or not isinstance(payload.get("reports"), list):
        raise ValueError("missing 'reports' list")
    run_id = str(payload.get("run_id") or path.parent.name)
    return run_id, [TestReport.from_dict(d) for d in payload["reports"]]


def collect_reports(directory: Path) -> Tuple[pd.DataFrame, List[Dict[str, Any]], List[str]]:
    rows: List[Dict[str, Any]] = []
    skipped: List[str] = []
    for path in sorted(Path(directory).rglob("report.json")):
        try:
            run_id, reports = _load_report(path)
        except (ValueError, KeyError, TypeError) as e:
            logger.warning("[Report] skipping malformed %s: %s", path, e)
            skipped.append(str(path))
            continue
        for r in reports:
            beta = r.metadata.get("beta")
            rows.append({
                "suite": str(r.metadata.get("suite", "")),
                "name": r.name,
                "beta": float(beta) if isinstance(beta, (int, float)) else math.nan,
                "lambdas": str(r.metadata.get("lambdas", "")),
                "statistic": r.statistic,
                "threshold": r.threshold,
                "passed": r.passed,
                "n": r.n,
                "run_id": run_id,
                "source": str(path),
            })
    table = pd.DataFrame(rows, columns=["suite", "name", "beta", "lambdas", "statistic", "threshold",
                                        "passed", "n", "run_id", "source"])
    table = table.sort_values(["suite", "beta", "lambdas", "name", "run_id"], kind="mergesort",
                              na_position="last").reset_index(drop=True)

    trends: List[Dict[str, Any]] = []
    for (suite, name, lams), grp in table.groupby(["suite", "name", "lambdas"], sort=True):
        grp = grp.dropna(subset=["beta"]).drop_duplicates(subset=["beta"], keep="last")
        if len(grp) < 2:
            continue
        grp = grp.sort_values("beta", ascending=False, kind="mergesort")
        vals = grp["statistic"].astype(float).tolist()
        steps = [b - a for a, b in zip(vals, vals[1:])]
        if all(d < 0 for d in steps):
            trend = "decreasing"
        elif all(d > 0 for d in steps):
            trend = "increasing"
        else:
            trend = "mixed"
        trends.append({"suite": suite, "name": name, "lambdas": lams, "betas": grp["beta"].tolist(),
                       "values": vals, "trend": trend})
    return table, trends, skipped


def aggregate_reports(directory: Path) -> int:
    directory = Path(directory)
    table, trends, skipped = collect_reports(directory)
    if table.empty and not skipped:
        logger.warning("[Report] no report.json under %s", directory)
    records = table.drop(columns=["source"]).to_dict(orient="records")
    write_json(directory / "summary.json", {
        "schema_version": SCHEMA_VERSION,
        "records": records,
        "trends": trends,
        "skipped": skipped,
    })
    text = format_summary(table, trends, skipped)
    write_text(directory / "summary.txt", text)
    print(text)
    ok = not table.empty and not skipped and bool(table["passed"].all())
    return 0 if ok else 1
