import math
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

TWO_PI = 2.0 * math.pi

# Calibrated experimental operating point
EXPERIMENT_N_ATOMS = 26000
EXPERIMENT_C2 = -TWO_PI * 3.8
EXPERIMENT_Q = TWO_PI * 3.9
EXPERIMENT_GAMMA = 0.069
EXPERIMENT_DELTA_ETA = 0.3
EXPERIMENT_DELTA_THETA = 0.0075 * TWO_PI
EXPERIMENT_SIGMA_DET = 24.0
# c2 follows the Thomas-Fermi density, c2 ~ N^(2/5)
C2_DECAY_PER_LOSS = 0.4

SCENARIO_NAMES = (
    "squeeze-scan",
    "gain-map",
    "calibrate-crosstalk",
    "calibrate-pump-phase",
    "detect-calib",
    "rf-calib",
    "oracle-compare",
    "kunkel-compare",
)

ScenarioName = Literal[
    "squeeze-scan",
    "gain-map",
    "calibrate-crosstalk",
    "calibrate-pump-phase",
    "detect-calib",
    "rf-calib",
    "oracle-compare",
    "kunkel-compare",
]

Profile = Literal["ci", "fast", "paper"]


# Simulation schemas
class SimConfig(BaseModel):
    """Physical and numerical parameters of one trajectory ensemble."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_atoms: int = Field(EXPERIMENT_N_ATOMS, ge=1)
    c2: float = EXPERIMENT_C2
    q0: float = EXPERIMENT_Q
    q_pre: Optional[float] = None
    t_quench: float = Field(0.0, ge=0.0)
    q_ramp: bool = True
    gamma: float = Field(EXPERIMENT_GAMMA, ge=0.0)
    gamma_c: Optional[float] = Field(None, ge=0.0)
    dt: float = 5e-5
    t_end: float = Field(0.0, ge=0.0)
    n_traj: int = Field(10000, ge=1)
    seed: int = Field(0, ge=0, le=2**64 - 1)
    record_times: Tuple[float, ...] = ()
    integrator: Literal["euler", "heun"] = "euler"
    initial_state: Literal["polar", "coherent"] = "polar"
    # (re, im) per component in the order m = +1, 0, -1
    initial_spinor: Optional[Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]] = None
    seed_namespace: str = "engine"
    stream: int = Field(0, ge=0, le=255)
    abort_budget: float = Field(1e-3, ge=0.0, le=1.0)
    block_size: int = Field(512, ge=1)
    dump_path: Optional[str] = None

    @field_validator("c2", "q0", "q_pre")
    @classmethod
    def finite_rates(cls, value):
        if value is not None and not math.isfinite(value):
            raise ValueError("rates must be finite")
        return value

    @field_validator("dt")
    @classmethod
    def positive_dt(cls, value):
        if not value > 0:
            raise ValueError("dt must be positive")
        return value

    @field_validator("record_times")
    @classmethod
    def sorted_times(cls, value):
        if any(t < 0 for t in value):
            raise ValueError("record times must be non-negative")
        return tuple(sorted(value))

    @model_validator(mode="before")
    @classmethod
    def fill_times(cls, data):
        if isinstance(data, dict):
            data = dict(data)
            times = list(data.get("record_times") or ())
            t_end = data.get("t_end", 0.0) or 0.0
            if times:
                data["t_end"] = max(float(t_end), max(float(t) for t in times))
            else:
                data["record_times"] = (float(t_end),)
        return data

    @model_validator(mode="after")
    def check_consistency(self):
        if self.initial_state == "coherent":
            if self.initial_spinor is None:
                raise ValueError("coherent initial state needs initial_spinor")
            weight = sum(re * re + im * im for re, im in self.initial_spinor)
            if abs(weight - 1.0) > 1e-9:
                raise ValueError(f"initial_spinor must be normalized, got |z|^2 = {weight}")
        return self

    def with_changes(self, **changes) -> "SimConfig":
        """Validated copy; new record_times reset t_end unless it is given too."""
        data = self.model_dump()
        if "record_times" in changes and "t_end" not in changes:
            data["t_end"] = 0.0
        data.update(changes)
        return SimConfig.model_validate(data)

    @property
    def c2_decay(self) -> float:
        return self.gamma_c if self.gamma_c is not None else C2_DECAY_PER_LOSS * self.gamma

    @property
    def q_decay(self) -> float:
        return self.c2_decay if self.q_ramp else 0.0


class NoiseConfig(BaseModel):
    """Readout imperfections: crosstalk, pump phase jitter, detection noise, pump splitting."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    delta_eta: float = Field(0.0, ge=0.0)
    delta_theta: float = Field(0.0, ge=0.0)
    sigma_det: float = Field(0.0, ge=0.0)
    eps1: float = Field(1.0 / math.sqrt(2.0), ge=0.0)
    eps2: float = Field(1.0 / math.sqrt(2.0), ge=0.0)
    residual_pump: float = Field(0.0, ge=0.0)
    crosstalk_convention: Literal["total_power", "per_quadrature"] = "total_power"
    phase_correlation: Literal["independent", "common"] = "independent"

    @model_validator(mode="after")
    def check_splitting(self):
        if self.eps1 ** 2 + self.eps2 ** 2 > 1.0 + 1e-12:
            raise ValueError("pump splitting must satisfy eps1^2 + eps2^2 <= 1")
        return self

    @classmethod
    def calibrated(cls, sigma_det: float = EXPERIMENT_SIGMA_DET, **overrides) -> "NoiseConfig":
        values = dict(delta_eta=EXPERIMENT_DELTA_ETA, delta_theta=EXPERIMENT_DELTA_THETA, sigma_det=sigma_det)
        values.update(overrides)
        return cls(**values)


class PulseCoupling(BaseModel):
    """Resonant coupling between |F=1, m=i> and |F=2, m=j> with rotation angle and MW phase."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    levels: Tuple[int, int]
    angle: float
    phase: float = 0.0

    @field_validator("levels")
    @classmethod
    def valid_levels(cls, value):
        lower, upper = value
        if lower not in (-1, 0, 1) or upper not in (-2, -1, 0, 1, 2):
            raise ValueError(f"levels must be (F=1 m, F=2 m), got {value}")
        return value

    @field_validator("angle", "phase")
    @classmethod
    def finite_angle(cls, value):
        if not math.isfinite(value):
            raise ValueError("pulse angles and phases must be finite")
        return value


class PulseStep(BaseModel):
    """Couplings driven by the same MW pulse; they act on disjoint level pairs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    couplings: Tuple[PulseCoupling, ...]
    label: str = ""

    @field_validator("couplings")
    @classmethod
    def disjoint(cls, value):
        if not value:
            raise ValueError("a pulse needs at least one coupling")
        lower = [c.levels[0] for c in value]
        upper = [c.levels[1] for c in value]
        if len(set(lower)) != len(lower) or len(set(upper)) != len(upper):
            raise ValueError("concurrent couplings must address disjoint levels")
        return value


class PulseProgram(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    version: int = 1
    steps: Tuple[PulseStep, ...]
    # readout noise is injected after this many steps
    noise_after: int = Field(3, ge=0)

    @model_validator(mode="after")
    def noise_slot(self):
        if self.noise_after > len(self.steps):
            raise ValueError("noise_after exceeds the number of pulses")
        return self


class PhasePoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    phi1: float = 0.0
    phi2: float = 0.0

    @classmethod
    def from_polar(cls, alpha: float, theta: float) -> "PhasePoint":
        return cls(phi1=alpha * math.cos(theta), phi2=alpha * math.sin(theta))

    @property
    def alpha(self) -> float:
        return math.hypot(self.phi1, self.phi2)

    @property
    def theta(self) -> float:
        if self.phi1 == 0.0 and self.phi2 == 0.0:
            return 0.0
        return math.atan2(self.phi2, self.phi1) % TWO_PI


class GainResult(BaseModel):
    phi1: float
    phi2: float
    delta_phi1: float = Field(gt=0.0)
    delta_phi2: float = Field(gt=0.0)
    sql_phi1: float = Field(gt=0.0)
    sql_phi2: float = Field(gt=0.0)
    zeta_db: float
    n_atoms: float
    shots: int
    probe: str = "squeezed"
    reference: Literal["joint", "split"] = "joint"
    noise: Dict[str, Any] = {}

    @field_validator("zeta_db")
    @classmethod
    def finite_gain(cls, value):
        if not math.isfinite(value):
            raise ValueError("gain must be finite")
        return value


# Scenario parameter blocks
class ScenarioParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_atoms: Optional[int] = Field(None, ge=1)
    n_traj: Optional[int] = Field(None, ge=1)
    c2: float = EXPERIMENT_C2
    q_over_c2: float = 1.0
    gamma: float = Field(EXPERIMENT_GAMMA, ge=0.0)
    dt: float = Field(5e-5, gt=0.0)
    integrator: Literal["euler", "heun"] = "euler"
    q_ramp: bool = True
    block_size: Optional[int] = Field(None, ge=1)


class SqueezeScanParams(ScenarioParams):
    times_ms: List[float] = [0.0, 2.5, 5.0, 7.5, 10.0, 12.5, 15.0, 20.0, 25.0, 30.0, 40.0, 50.0, 60.0]
    quench_hold_ms: float = Field(0.0, ge=0.0)
    alignment: Literal["fixed", "optimal"] = "fixed"
    delta_eta: float = Field(0.0, ge=0.0)
    delta_theta: float = Field(0.0, ge=0.0)
    sigma_det: Optional[float] = Field(0.0, ge=0.0)


class GainMapParams(ScenarioParams):
    shots: Optional[int] = Field(None, ge=2)
    # rays: alpha sweeps along n_rays directions theta; grid: phi1 x phi2 grid
    sweep: Literal["rays", "grid"] = "rays"
    n_rays: int = Field(8, ge=1)
    alpha_points: int = Field(11, ge=6)
    grid_points: int = Field(11, ge=6)
    phi_max_over_pi: float = Field(0.05, gt=0.0)
    squeeze_time_ms: Optional[float] = Field(None, ge=0.0)
    candidate_times_ms: List[float] = [20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0]
    n_traj_calib: Optional[int] = Field(None, ge=10)
    quench_hold_ms: float = Field(5.0, ge=0.0)
    delta_eta: float = Field(EXPERIMENT_DELTA_ETA, ge=0.0)
    delta_theta: float = Field(EXPERIMENT_DELTA_THETA, ge=0.0)
    sigma_det: Optional[float] = Field(None, ge=0.0)
    crosstalk_convention: Literal["total_power", "per_quadrature"] = "total_power"
    readout_layer: Literal["ideal", "pulses"] = "ideal"
    reference: Literal["joint", "split"] = "joint"
    include_polar: bool = True


class CrosstalkCalibParams(ScenarioParams):
    delta_etas: List[float] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
    sigma_det: Optional[float] = Field(None, ge=0.0)
    crosstalk_convention: Literal["total_power", "per_quadrature"] = "total_power"


class PumpPhaseCalibParams(ScenarioParams):
    delta_thetas_over_2pi: List[float] = [0.0, 0.0025, 0.005, 0.0075, 0.01, 0.0125, 0.015]
    squeeze_time_ms: float = Field(30.0, ge=0.0)
    delta_eta: float = Field(EXPERIMENT_DELTA_ETA, ge=0.0)
    sigma_det: Optional[float] = Field(None, ge=0.0)
    phase_correlation: Literal["independent", "common"] = "independent"


class DetectCalibParams(ScenarioParams):
    atom_numbers: List[int] = [1000, 2000, 5000, 10000, 20000, 30000]
    shots: Optional[int] = Field(None, ge=2)
    sigma_det: float = Field(EXPERIMENT_SIGMA_DET, ge=0.0)


class RfCalibParams(ScenarioParams):
    alphas: List[float] = [-0.05, -0.04, -0.03, -0.02, -0.01, 0.0, 0.01, 0.02, 0.03, 0.04, 0.05]
    shots: Optional[int] = Field(None, ge=2)


class OracleCompareParams(ScenarioParams):
    times_ms: List[float] = [5.0, 10.0, 15.0]
    gamma: float = Field(0.0, ge=0.0)
    observables: List[str] = ["Qyz", "Qxz", "Lx", "Ly"]
    # compare after the spinor phase rotation that exposes the squeezed quadrature
    aligned: bool = True


class KunkelCompareParams(ScenarioParams):
    times_ms: List[float] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 50.0, 60.0]
    gamma: float = Field(0.0, ge=0.0)


SCENARIO_PARAMS = {
    "squeeze-scan": SqueezeScanParams,
    "gain-map": GainMapParams,
    "calibrate-crosstalk": CrosstalkCalibParams,
    "calibrate-pump-phase": PumpPhaseCalibParams,
    "detect-calib": DetectCalibParams,
    "rf-calib": RfCalibParams,
    "oracle-compare": OracleCompareParams,
    "kunkel-compare": KunkelCompareParams,
}


class Scenario(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: ScenarioName
    params: Dict[str, Any] = {}
    out_dir: str = "runs"
    seed: int = Field(0, ge=0, le=2**64 - 1)
    workers: int = Field(1, ge=1)
    profile: Profile = "fast"


class RunManifest(BaseModel):
    scenario: ScenarioName
    schema_version: int
    code_version: str
    rng_algorithm: str
    seed: int
    profile: Profile
    workers: int
    resolved_params: Dict[str, Any]
    timestamp: str
    files: Dict[str, str]


# HTTP request/response schemas
class ScenarioRunRequest(BaseModel):
    params: Dict[str, Any] = {}
    seed: int = Field(0, ge=0, le=2**64 - 1)
    profile: Profile = "fast"
    workers: int = Field(1, ge=1)


class ScenarioRunResponse(BaseModel):
    run_id: str
    summary: Dict[str, Any]
    manifest: RunManifest


class ScenarioInfo(BaseModel):
    name: str
    defaults: Dict[str, Any]
