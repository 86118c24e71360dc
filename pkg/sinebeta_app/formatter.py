from __future__ import annotations

import math
from typing import Any, Dict, List, Sequence

import pandas as pd

from sinebeta_app.models import TestReport


def _num(x: Any) -> str:
    if x is None:
        return "-"
    if isinstance(x, bool):
        return "yes" if x else "no"
    if isinstance(x, (int, float)):
        if isinstance(x, float) and not math.isfinite(x):
            return str(x)
        return f"{x:.4g}"
    return str(x)


def format_reports(reports: Sequence[TestReport], limit: int = 200) -> str:
    if not reports:
        return "No reports produced."

    lines = []
    for r in list(reports)[: max(1, limit)]:
        mark = "PASS" if r.passed else "FAIL"
        suite = r.metadata.get("suite", "")
        lines.append(
            f"  {mark}  {suite:<12} {r.name:<26} stat={_num(r.statistic):>10}  thr={_num(r.threshold):>9}  n={r.n}"
        )
    passed = sum(1 for r in reports if r.passed)
    lines.append(f"  {passed}/{len(reports)} passed")
    return "\n".join(lines)


def format_summary(table: pd.DataFrame, trends: List[Dict[str, Any]], skipped: Sequence[str]) -> str:
    if table.empty:
        return "No report records found."

    lines = ["suite        name                       beta        lambdas              stat        pass  run"]
    for row in table.itertuples(index=False):
        lines.append(
            f"{row.suite:<12} {row.name:<26} {_num(row.beta):<11} {str(row.lambdas):<20} "
            f"{_num(row.statistic):<11} {'yes' if row.passed else 'no':<5} {row.run_id}"
        )
    if trends:
        lines.append("")
        lines.append("trends (statistic as beta decreases)")
        for t in trends:
            vals = "  ".join(f"{b:g}:{_num(v)}" for b, v in zip(t["betas"], t["values"]))
            lines.append(f"  {t['suite']:<12} {t['name']:<26} {t['trend']:<10} {vals}")
    if skipped:
        lines.append("")
        lines.append("skipped (malformed):")
        lines.extend(f"  {p}" for p in skipped)
    return "\n".join(lines)
