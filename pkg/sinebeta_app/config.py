# sinebeta_app/config.py
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import re
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from sinebeta_app.models import (
    IntegratorSettings,
    ModelParams,
    QuadratureSettings,
    RunConfig,
    VerifyConfig,
    WelltimeConfig,
)
from sinebeta_app.suites import SUITES

logger = logging.getLogger(__name__)

MODES = ("simulate", "welltime", "verify", "report")
OUTPUT_ENV = "SINEBETA_OUTPUT_DIR"

_PI_RE = re.compile(r"^\s*([+-]?(?:\d+(?:\.\d*)?|\.\d+)?)\s*\*?\s*pi\s*$", re.IGNORECASE)


def _require(d: Dict[str, Any], key: str, where: str) -> Any:
    if key not in d:
        raise ValueError(f"Missing '{key}' in {where}")
    return d[key]


def parse_lambda(v: Any, where: str) -> float:
    """Numbers pass through; strings like '2pi', '0.5pi', 'pi' are multiples of pi."""
    if isinstance(v, bool):
        raise ValueError(f"{where} must be a number or a multiple of pi, got {v!r}")
    if isinstance(v, (int, float)):
        x = float(v)
    elif isinstance(v, str):
        m = _PI_RE.match(v)
        if m:
            coef = m.group(1)
            x = (float(coef) if coef not in ("", "+", "-") else float(coef + "1")) * math.pi
        else:
            try:
                x = float(v)
            except ValueError:
                raise ValueError(f"{where}='{v}' is not a number or a multiple of pi") from None
    else:
        raise ValueError(f"{where} must be a number or a multiple of pi, got {v!r}")
    if not math.isfinite(x):
        raise ValueError(f"{where} must be finite")
    return x


def _merge(base: Dict[str, Any], extra: Mapping[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        elif v is not None:
            out[k] = copy.deepcopy(v)
    return out


def _floats(raw: Any, where: str) -> Tuple[float, ...]:
    if not isinstance(raw, list) or len(raw) == 0:
        raise ValueError(f"{where} must be a non-empty list")
    return tuple(parse_lambda(v, f"{where}[{i}]") for i, v in enumerate(raw))


def _resolve_intervals(raw: Any, params: ModelParams) -> Tuple[Tuple[float, float], ...]:
    if not isinstance(raw, list):
        raise ValueError("intervals must be a list of [lo, hi] pairs")
    out: List[Tuple[float, float]] = []
    for i, pair in enumerate(raw):
        where = f"intervals[{i}]"
        if not isinstance(pair, list) or len(pair) != 2:
            raise ValueError(f"{where} must be a [lo, hi] pair")
        lo, hi = parse_lambda(pair[0], f"{where}[0]"), parse_lambda(pair[1], f"{where}[1]")
        if hi < lo:
            raise ValueError(f"{where} has hi < lo")
        if lo < 0:
            # translation invariance: Sine_beta[lo, hi] has the law of Sine_beta[0, hi - lo]
            logger.info("[Config] %s shifted from [%g, %g] to [0, %g]", where, lo, hi, hi - lo)
            lo, hi = 0.0, hi - lo
        for x in (lo, hi):
            if params.index_of(x) is None:
                raise ValueError(f"{where} endpoint {x:g} not in lambda grid")
        out.append((lo, hi))
    return tuple(out)


def _welltime(raw: Dict[str, Any]) -> WelltimeConfig:
    method = str(raw.get("method", "quadrature")).strip().lower()
    if method not in ("quadrature", "mc"):
        raise ValueError("welltime.method must be 'quadrature' or 'mc'")
    damping = raw.get("damping")
    qset = QuadratureSettings(
        rel_tol=float(raw.get("rel_tol", 1e-8)),
        truncation_ratio=float(raw.get("truncation_ratio", 1e-16)),
        limit=int(raw.get("limit", 200)),
        grid_points=int(raw.get("grid_points", 40001)),
        max_iterations=int(raw.get("max_iterations", 500)),
        damping=None if damping is None else float(damping),
    )
    cfg = WelltimeConfig(
        method=method,
        lam=parse_lambda(raw.get("lambda", 1.0), "welltime.lambda"),
        betas=_floats(raw.get("betas", [1e-2, 1e-3, 1e-4]), "welltime.betas"),
        xi=float(raw.get("xi", 1.0)),
        mc_beta=float(raw.get("mc_beta", 1e-3)),
        agreement_betas=_floats(raw.get("agreement_betas", [1e-1, 1e-2, 1e-3]), "welltime.agreement_betas"),
        samples=int(raw.get("samples", 1000)),
        step=float(raw.get("step", 0.01)),
        quadrature=qset,
    )
    if cfg.lam <= 0:
        raise ValueError("welltime.lambda must be > 0")
    if any(b <= 0 for b in cfg.betas + cfg.agreement_betas) or cfg.mc_beta <= 0:
        raise ValueError("welltime betas must be > 0")
    if cfg.xi <= 0:
        raise ValueError("welltime.xi must be > 0")
    if cfg.samples < 1:
        raise ValueError("welltime.samples must be >= 1")
    if not 0 < cfg.step <= 0.05:
        raise ValueError("welltime.step must be in (0, 0.05]")
    return cfg


def _verify(raw: Dict[str, Any], params: ModelParams) -> VerifyConfig:
    d = VerifyConfig()
    pair = raw.get("coupling_pair", list(d.coupling_pair))
    cfg = VerifyConfig(
        coupling_betas=_floats(raw.get("coupling_betas", list(d.coupling_betas)), "verify.coupling_betas"),
        coupling_pair=(int(pair[0]), int(pair[1])),
        coupling_replicates=int(raw.get("coupling_replicates", d.coupling_replicates)),
        crossover_betas=_floats(raw.get("crossover_betas", list(d.crossover_betas)), "verify.crossover_betas"),
        crossover_replicates=int(raw.get("crossover_replicates", d.crossover_replicates)),
        probe_samples=int(raw.get("probe_samples", d.probe_samples)),
        probe_epsilon=float(raw.get("probe_epsilon", d.probe_epsilon)),
        intensity_times=_floats(raw.get("intensity_times", list(d.intensity_times)), "verify.intensity_times"),
        mean_beta=float(raw.get("mean_beta", d.mean_beta)),
        mean_replicates=int(raw.get("mean_replicates", d.mean_replicates)),
        mean_checkpoints=int(raw.get("mean_checkpoints", d.mean_checkpoints)),
        scaling_replicates=int(raw.get("scaling_replicates", d.scaling_replicates)),
    )
    i, j = cfg.coupling_pair
    if not (0 <= i < j < len(params.lambdas)):
        raise ValueError("verify.coupling_pair must index two lambdas with i < j")
    if len(cfg.coupling_betas) < 2 or len(cfg.crossover_betas) < 2:
        raise ValueError("verify beta ladders need at least two values")
    if not 0 < cfg.probe_epsilon < 1:
        raise ValueError("verify.probe_epsilon must be in (0, 1)")
    if cfg.mean_replicates < 100:
        raise ValueError("verify.mean_replicates must be >= 100")
    if cfg.scaling_replicates < 1:
        raise ValueError("verify.scaling_replicates must be >= 1")
    if cfg.mean_checkpoints < 1:
        raise ValueError("verify.mean_checkpoints must be >= 1")
    return cfg


def build_config(raw: Dict[str, Any]) -> RunConfig:
    run_raw = _require(raw, "run", "root")
    model_raw = _require(raw, "model", "root")
    integ_raw = raw.get("integrator", {})

    mode = str(_require(run_raw, "mode", "run")).strip().lower()
    if mode not in MODES:
        raise ValueError(f"run.mode='{mode}' not in {list(MODES)}")

    seed = run_raw.get("seed")
    if seed is None or isinstance(seed, bool):
        raise ValueError("run.seed is required (there is no clock-based default)")
    seed = int(seed)
    if seed < 0:
        raise ValueError("run.seed must be >= 0")

    replicates = int(_require(run_raw, "replicates", "run"))
    if replicates < 1:
        raise ValueError("run.replicates must be >= 1")
    workers = int(run_raw.get("workers", 1))
    if workers < 1:
        raise ValueError("run.workers must be >= 1")
    batch_size = int(run_raw.get("batch_size", 250))
    if batch_size < 1:
        raise ValueError("run.batch_size must be >= 1")

    output_dir = str(_require(run_raw, "output_dir", "run")).strip()
    if not output_dir:
        raise ValueError("run.output_dir cannot be empty")

    suites_raw = run_raw.get("suites", ["all"])
    if isinstance(suites_raw, str):
        suites_raw = [s for s in suites_raw.split(",") if s.strip()]
    suites = tuple(str(s).strip().lower() for s in suites_raw)
    for s in suites:
        if s not in SUITES and s != "all":
            raise ValueError(f"run.suites entry '{s}' not in supported suites: {sorted(SUITES) + ['all']}")

    params = ModelParams(
        beta=float(_require(model_raw, "beta", "model")),
        lambdas=_floats(_require(model_raw, "lambdas", "model"), "model.lambdas"),
    )
    settings = IntegratorSettings(
        step=float(integ_raw.get("step", 0.01)),
        horizon_rescaled=float(integ_raw.get("horizon_rescaled", 3.0)),
        settle_band=float(integ_raw.get("settle_band", 0.1)),
    )
    intervals = _resolve_intervals(raw.get("intervals", []), params)

    return RunConfig(
        mode=mode,
        params=params,
        settings=settings,
        intervals=intervals,
        replicates=replicates,
        seed=seed,
        output_dir=output_dir,
        suites=suites,
        workers=workers,
        batch_size=batch_size,
        welltime=_welltime(raw.get("welltime", {})),
        verify=_verify(raw.get("verify", {}), params),
    )


def load_settings(path: str, overrides: Optional[Mapping[str, Any]] = None,
                  env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Settings file, then the output-dir environment variable, then flag overrides."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Settings file not found: {p.resolve()}")
    raw = json.loads(p.read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValueError("settings root must be a JSON object")

    env = os.environ if env is None else env
    out_env = env.get(OUTPUT_ENV)
    if out_env:
        raw = _merge(raw, {"run": {"output_dir": out_env}})
    if overrides:
        raw = _merge(raw, overrides)
    return build_config(raw)


def config_dict(cfg: RunConfig) -> Dict[str, Any]:
    d = asdict(cfg)
    # neither the output location nor the worker count changes what is computed
    d.pop("output_dir", None)
    d.pop("workers", None)
    return d


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(config_dict(cfg), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
