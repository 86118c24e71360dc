# sinebeta_app/writer.py
from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd

from sinebeta_app.models import SCHEMA_VERSION, CountTable, JumpLedger, RunManifest, TestReport

logger = logging.getLogger(__name__)

JUMP_COLUMNS = ["schema_version", "replicate", "process_id", "kind", "t_physical", "t_rescaled", "count_after"]
COUNT_COLUMNS = ["schema_version", "replicate", "interval_id", "count", "unsettled_flag"]


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(x: Any) -> Any:
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    return x


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    _atomic_write(Path(path), json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def _write_frame(path: Path, df: pd.DataFrame) -> None:
    _atomic_write(Path(path), df.to_csv(index=False, lineterminator="\n", float_format="%.12g"))


def jumps_frame(ledgers: Sequence[JumpLedger], beta: float) -> pd.DataFrame:
    scale = beta / (8.0 * np.pi)
    rows: List[Dict[str, Any]] = []
    for led in ledgers:
        for tr in led.tracks:
            for k, t in enumerate(tr.times, start=1):
                rows.append({
                    "schema_version": SCHEMA_VERSION,
                    "replicate": led.replicate,
                    "process_id": tr.process_id,
                    "kind": tr.kind,
                    "t_physical": t,
                    "t_rescaled": t * scale,
                    "count_after": k,
                })
    df = pd.DataFrame(rows, columns=JUMP_COLUMNS)
    # mergesort keeps repeated same-time entries in count order
    return df.sort_values(["replicate", "process_id", "t_physical"], kind="mergesort").reset_index(drop=True)


def counts_frame(table: CountTable) -> pd.DataFrame:
    rows = []
    for rep, counts, flag in zip(table.replicates, table.counts, table.flags):
        for k, c in enumerate(counts):
            rows.append({
                "schema_version": SCHEMA_VERSION,
                "replicate": rep,
                "interval_id": k,
                "count": int(c),
                "unsettled_flag": int(flag),
            })
    df = pd.DataFrame(rows, columns=COUNT_COLUMNS)
    return df.sort_values(["replicate", "interval_id"], kind="mergesort").reset_index(drop=True)


def write_jumps(path: Path, ledgers: Sequence[JumpLedger], beta: float) -> None:
    _write_frame(path, jumps_frame(ledgers, beta))
    logger.info("[Report] wrote %s", path)


def write_counts(path: Path, table: CountTable) -> None:
    _write_frame(path, counts_frame(table))
    logger.info("[Report] wrote %s", path)


def write_rows(path: Path, rows: Sequence[Dict[str, Any]]) -> None:
    df = pd.DataFrame(list(rows))
    df.insert(0, "schema_version", SCHEMA_VERSION)
    _write_frame(path, df)
    logger.info("[Report] wrote %s", path)


def write_reports(path: Path, reports: Sequence[TestReport], run_id: str) -> None:
    write_json(path, {
        "schema_version": SCHEMA_VERSION,
        "run_id": run_id,
        "reports": [r.to_dict() for r in reports],
    })
    logger.info("[Report] wrote %s (%d records)", path, len(reports))


def write_manifest(path: Path, manifest: RunManifest) -> None:
    write_json(path, asdict(manifest))


def write_text(path: Path, text: str) -> None:
    _atomic_write(Path(path), text if text.endswith("\n") else text + "\n")
