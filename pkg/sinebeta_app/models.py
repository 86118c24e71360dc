# sinebeta_app/models.py
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
SCHEMA_VERSION = 1

# Well exists iff lambda*beta/8 stays below the maximum of
# (e^-r - e^r)/(e^r + e^-r)^2, which is 1/4.
WELL_THRESHOLD = 0.25

# Reach probability required of the fast-reach check at beta=0.005, eps=1/2.
FAST_REACH_LEVEL = 0.95


def near_zero_threshold(beta: float) -> float:
    """4*arctan(beta^(1/4)): the angle that separates 'near 0 mod 2pi' from the rest."""
    return 4.0 * math.atan(beta ** 0.25)


def fast_reach_window(beta: float) -> float:
    return 9.0 * math.log(1.0 / beta)


# ---------------------------------------------------------------- sinesde


@dataclass(frozen=True)
class ModelParams:
    beta: float
    lambdas: Tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError("model.beta must be > 0")
        if self.beta > 4.0:
            logger.warning("[Config] beta=%g is outside the recommended range (0, 4]", self.beta)
        if len(self.lambdas) == 0:
            raise ValueError("model.lambdas must be a non-empty list")
        if self.lambdas[0] < 0:
            raise ValueError(
                "model.lambdas must be >= 0 (shift negative intervals by translation invariance)"
            )
        for lo, hi in zip(self.lambdas, self.lambdas[1:]):
            if not hi > lo:
                raise ValueError("model.lambdas must be strictly ascending")

    @property
    def horizon_scale(self) -> float:
        # physical time per rescaled unit
        return 8.0 * math.pi / self.beta

    def index_of(self, lam: float) -> Optional[int]:
        for i, x in enumerate(self.lambdas):
            if math.isclose(x, lam, rel_tol=1e-12, abs_tol=1e-12):
                return i
        return None


@dataclass(frozen=True)
class IntegratorSettings:
    step: float = 0.01
    horizon_rescaled: float = 3.0
    settle_band: float = 0.1

    def __post_init__(self) -> None:
        if not 0 < self.step <= 0.05:
            raise ValueError("integrator.step must be in (0, 0.05]")
        if not self.horizon_rescaled >= 3.0:
            raise ValueError("integrator.horizon_rescaled must be >= 3")
        if not 0 < self.settle_band < math.pi:
            raise ValueError("integrator.settle_band must be in (0, pi)")

    def n_steps(self, beta: float) -> int:
        horizon = (8.0 * math.pi / beta) * self.horizon_rescaled
        return int(math.ceil(horizon / self.step))


@dataclass(frozen=True)
class FamilyState:
    t: float
    alphas: Tuple[float, ...]


@dataclass(frozen=True)
class NoiseIncrements:
    # real and imaginary parts of dZ, each N(0, h)
    dx: float
    dy: float


@dataclass(frozen=True)
class ProcessTrack:
    process_id: str           # "L<i>" level, "D<i>-<j>" difference alpha_j - alpha_i
    kind: str                 # "level" | "difference"
    times: Tuple[float, ...]  # physical jump times, step midpoints
    endpoint: float           # process value at the horizon
    endpoint_count: int       # nearest integer of endpoint / 2pi
    unsettled: bool           # residue inside [band, 2pi - band]

    @property
    def count(self) -> int:
        return len(self.times)

    @property
    def disagrees(self) -> bool:
        return self.endpoint_count != self.count

    @property
    def negative(self) -> bool:
        return self.endpoint_count < 0

    @property
    def flagged(self) -> bool:
        return self.unsettled or self.disagrees or self.negative


@dataclass(frozen=True)
class JumpLedger:
    replicate: int
    tracks: Tuple[ProcessTrack, ...]
    multi_jump: bool = False
    aborted: Optional[str] = None

    def track(self, process_id: str) -> ProcessTrack:
        for tr in self.tracks:
            if tr.process_id == process_id:
                return tr
        raise KeyError(f"process '{process_id}' not tracked in replicate {self.replicate}")

    def has(self, process_id: str) -> bool:
        return any(tr.process_id == process_id for tr in self.tracks)

    @property
    def unsettled_flag(self) -> Dict[str, bool]:
        return {tr.process_id: tr.unsettled for tr in self.tracks}


@dataclass(frozen=True)
class FamilyPath:
    """Per-replicate summary of the integrated family (the trajectories themselves are not kept)."""

    replicate: int
    steps: int
    final_alphas: Tuple[float, ...]
    checkpoint_times: Tuple[float, ...] = ()
    checkpoint_alphas: Tuple[Tuple[float, ...], ...] = ()
    monotone_violations: int = 0
    floor_decrements: int = 0
    diagnostic_pairs: Tuple[Tuple[int, int], ...] = ()
    below_steps: Tuple[int, ...] = ()      # steps with wrap(alpha_j) < wrap(alpha_i), per pair
    off_zero_steps: Tuple[int, ...] = ()   # steps with wrap(alpha) >= 4 arctan(beta^1/4), per level


@dataclass(frozen=True)
class MeanCurve:
    times: Tuple[float, ...]
    lambdas: Tuple[float, ...]
    means: Tuple[Tuple[float, ...], ...]        # [checkpoint][lambda]
    std_errors: Tuple[Tuple[float, ...], ...]
    replicates: int

    def half_widths(self, sigmas: float = 3.0) -> np.ndarray:
        return sigmas * np.asarray(self.std_errors)


# ---------------------------------------------------------------- welltime


@dataclass(frozen=True)
class WellSpec:
    beta: float
    lam: float

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValueError("well.beta must be > 0")
        if not self.lam > 0:
            raise ValueError("well.lambda must be > 0")
        if not self.has_well:
            logger.warning(
                "[Well] lambda*beta/8=%g >= %g: the potential has no interior well",
                self.lam * self.beta / 8.0, WELL_THRESHOLD,
            )

    @property
    def drift(self) -> float:
        return self.lam * self.beta / 4.0

    @property
    def has_well(self) -> bool:
        return self.lam * self.beta / 8.0 < WELL_THRESHOLD

    @property
    def mean_exit_time(self) -> float:
        return 8.0 * math.pi / (self.beta * self.lam)

    @property
    def rescale(self) -> float:
        return self.beta * self.lam / (8.0 * math.pi)


@dataclass(frozen=True)
class CriticalPoints:
    a: float
    b: float
    v_a: float
    v_b: float


@dataclass(frozen=True)
class QuadratureSettings:
    rel_tol: float = 1e-8
    truncation_ratio: float = 1e-16
    limit: int = 200             # adaptive subinterval budget
    grid_points: int = 40001     # dense-grid oracle / fixed-point grid
    max_iterations: int = 500
    damping: Optional[float] = None

    def __post_init__(self) -> None:
        if not 0 < self.rel_tol < 1e-4:
            raise ValueError("quadrature.rel_tol must be in (0, 1e-4)")
        if not 0 < self.truncation_ratio < 1:
            raise ValueError("quadrature.truncation_ratio must be in (0, 1)")
        if self.grid_points < 101:
            raise ValueError("quadrature.grid_points must be >= 101")
        if self.max_iterations < 2:
            raise ValueError("quadrature.max_iterations must be >= 2")
        if self.damping is not None and not 0 < self.damping <= 1:
            raise ValueError("quadrature.damping must be in (0, 1]")

    @property
    def log_drop(self) -> float:
        return -math.log(self.truncation_ratio)


@dataclass(frozen=True)
class QuadratureResult:
    value: float
    est_error: float
    evaluations: int
    iterations: int = 0
    lower: Optional[float] = None
    upper: Optional[float] = None
    bounds_held: Optional[bool] = None


@dataclass(frozen=True)
class PassageSample:
    raw_times: Tuple[float, ...]
    rescale: float
    censored: int = 0
    theta0: float = 0.0
    step: float = 0.01

    @property
    def rescaled(self) -> np.ndarray:
        return np.asarray(self.raw_times, dtype=float) * self.rescale

    @property
    def n(self) -> int:
        return len(self.raw_times) + self.censored


# ---------------------------------------------------------------- ppstats


@dataclass(frozen=True)
class RescaledMeasure:
    points: Tuple[float, ...]
    source: str

    def mass(self, t: float) -> int:
        return int(np.searchsorted(np.asarray(self.points), t, side="right"))


@dataclass(frozen=True)
class CountTable:
    intervals: Tuple[Tuple[float, float], ...]
    replicates: Tuple[int, ...]
    counts: Tuple[Tuple[int, ...], ...]   # [row][interval]
    flags: Tuple[bool, ...]               # unsettled or ledger/endpoint disagreement

    def column(self, interval_id: int, settled_only: bool = True) -> np.ndarray:
        arr = np.asarray(self.counts, dtype=int).reshape(len(self.replicates), len(self.intervals))
        col = arr[:, interval_id]
        if settled_only:
            col = col[~np.asarray(self.flags, dtype=bool)]
        return col

    @property
    def flagged_fraction(self) -> float:
        if not self.flags:
            return 0.0
        return float(np.mean(self.flags))


@dataclass(frozen=True)
class TestReport:
    name: str
    statistic: float
    reference: Any
    threshold: float
    passed: bool
    n: int
    p_value: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "TestReport":
        return TestReport(
            name=str(d["name"]),
            statistic=float(d["statistic"]) if d.get("statistic") is not None else float("nan"),
            reference=d.get("reference"),
            threshold=float(d["threshold"]) if d.get("threshold") is not None else float("nan"),
            passed=bool(d["pass"]),
            n=int(d.get("n", 0)),
            p_value=None if d.get("p_value") is None else float(d["p_value"]),
            metadata=dict(d.get("metadata") or {}),
        )


@dataclass(frozen=True)
class CouplingDiagnostics:
    theta_hat: float
    xi_hat: float
    inclusion_fraction: float
    simultaneity_fraction: float
    superposition_fraction: float
    window: float
    replicates: int


# ---------------------------------------------------------------- harness


@dataclass(frozen=True)
class WelltimeConfig:
    method: str = "quadrature"          # quadrature | mc
    lam: float = 1.0
    betas: Tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    xi: float = 1.0
    mc_beta: float = 1e-3
    agreement_betas: Tuple[float, ...] = (1e-1, 1e-2, 1e-3)
    samples: int = 1000
    step: float = 0.01
    quadrature: QuadratureSettings = QuadratureSettings()


@dataclass(frozen=True)
class VerifyConfig:
    coupling_betas: Tuple[float, ...] = (0.05, 0.02, 0.005)
    coupling_pair: Tuple[int, int] = (1, 2)
    coupling_replicates: int = 200
    crossover_betas: Tuple[float, ...] = (0.02, 1.0, 20.0)
    crossover_replicates: int = 500
    probe_samples: int = 1000
    probe_epsilon: float = 0.5
    intensity_times: Tuple[float, ...] = (0.5, 1.0, 2.0)
    mean_beta: float = 0.1
    mean_replicates: int = 1000
    mean_checkpoints: int = 5
    scaling_replicates: int = 40


@dataclass(frozen=True)
class RunConfig:
    mode: str
    params: ModelParams
    settings: IntegratorSettings
    intervals: Tuple[Tuple[float, float], ...]
    replicates: int
    seed: int
    output_dir: str
    suites: Tuple[str, ...] = ("all",)
    workers: int = 1
    batch_size: int = 250
    welltime: WelltimeConfig = WelltimeConfig()
    verify: VerifyConfig = VerifyConfig()

    def tracked_pairs(self) -> List[Tuple[int, int]]:
        pairs: List[Tuple[int, int]] = []
        for lo, hi in self.intervals:
            i, j = self.params.index_of(lo), self.params.index_of(hi)
            if i is None or j is None or i == j:
                continue
            p = (min(i, j), max(i, j))
            # alpha_j - alpha_0 is level j itself
            if self.params.lambdas[p[0]] == 0:
                continue
            if p not in pairs:
                pairs.append(p)
        return pairs


@dataclass(frozen=True)
class RunManifest:
    config_hash: str
    tool_version: str
    timestamp: str
    suites: Dict[str, bool]
    schema_version: int = SCHEMA_VERSION
