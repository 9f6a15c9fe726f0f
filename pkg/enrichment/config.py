"""
Run configuration documents for the command-line front end.

Each command reads one flat JSON document; unknown keys are rejected.
Defaults for parallelism, log level and output directory come from the
environment (a `.env` file is honoured).
"""

import hashlib
import json
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Type, TypeVar

import dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from enrichment.design import DesignSpec, ThetaConfig
from enrichment.errors import ConfigError
from enrichment.estimators import Method
from enrichment.simdata import JointModelParams

ALL_METHODS = [m.value for m in Method]


class Settings(BaseModel):
    jobs: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    log_level: str = "WARNING"
    out: Path = Path("results")

    @classmethod
    def from_env(cls) -> "Settings":
        dotenv.load_dotenv()
        values = {
            "jobs": os.getenv("ENRICHMENT_JOBS"),
            "log_level": os.getenv("ENRICHMENT_LOG_LEVEL"),
            "out": os.getenv("ENRICHMENT_OUT"),
        }
        return cls(**{k: v for k, v in values.items() if v})


class _Document(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class DesignInputs(_Document):
    psi: float = Field(0.6, gt=0, lt=1, description="Target probability of selecting S1 under the alternative")
    delta: float = Field(0.5, gt=0, description="Planned benefit in S1")
    lam: float = Field(1 / 3, gt=0, lt=1, alias="lambda")
    alpha: float = Field(0.025, gt=0, lt=1)
    beta: float = Field(0.10, gt=0, lt=1)

    def design_spec(self) -> DesignSpec:
        return DesignSpec.calibrated(self.psi, self.delta, self.lam, self.alpha, self.beta)


class ModelInputs(_Document):
    """Joint-model knobs varied in the power studies; everything else stays at its default."""
    gamma: float = 0.8
    sigma: float = Field(1.0, ge=0, description="Measurement-error standard deviation")
    phi2: float = Field(5.0, ge=0, description="Random-slope variance")
    scenario: Literal["null", "alternative"] = "alternative"

    def joint_params(self, lam: float, scenario: Optional[str] = None) -> JointModelParams:
        return JointModelParams.scenario(scenario or self.scenario, lam, gamma=self.gamma,
                                         sigma2=self.sigma ** 2, phi2=self.phi2)


class Sharding(_Document):
    replicates: int = Field(2000, ge=1)
    replicate_start: int = Field(0, ge=0)
    seed: int = Field(20240601, ge=0)
    jobs: Optional[int] = Field(None, ge=1)
    out: Optional[Path] = None


class CalibrateConfig(DesignInputs):
    seed: int = Field(20240601, ge=0)
    method: Method = Method.COX
    n_patients: int = Field(5000, ge=100)
    accrual_rate: float = Field(200.0, gt=0)
    n_snapshots: int = Field(40, ge=2)
    min_events: int = Field(20, ge=1)
    gamma: float = 0.8
    sigma: float = Field(1.0, ge=0)
    phi2: float = Field(5.0, ge=0)
    m: Optional[float] = Field(None, gt=0, description="Skip simulation and use this events-per-information constant")
    out: Optional[Path] = None

    def joint_params(self) -> JointModelParams:
        return JointModelParams.scenario("null", self.lam, gamma=self.gamma, sigma2=self.sigma ** 2, phi2=self.phi2)


class SimulateConfig(DesignInputs, ModelInputs, Sharding):
    replicates: int = Field(100, ge=1)
    design_report: Optional[Path] = None
    d1_stage1: Optional[int] = Field(None, ge=1)
    d_total: Optional[int] = Field(None, ge=1)
    methods: List[Method] = Field(default_factory=lambda: list(Method))
    analytic_z: bool = False
    n_max: int = Field(800, ge=1)
    accrual_rate: float = Field(400.0, gt=0)

    @model_validator(mode="after")
    def _has_design(self):
        if self.design_report is None and (self.d1_stage1 is None or self.d_total is None):
            raise ValueError("give either design_report or both d1_stage1 and d_total")
        return self


class StudyConfig(DesignInputs, Sharding):
    gamma_grid: List[float] = Field(default_factory=lambda: [0.0, 0.4, 0.8, 1.2])
    sigma_grid: List[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5])
    phi2_grid: List[float] = Field(default_factory=lambda: [0.0, 2.5, 5.0, 7.5])
    scenario: Literal["null", "alternative"] = "alternative"
    methods: List[Method] = Field(default_factory=lambda: list(Method))
    designs: Literal["table", "planned"] = "table"
    calibration_method: Method = Method.COND_SCORE
    analytic_z: bool = False
    n_max: int = Field(800, ge=1)
    accrual_rate: float = Field(400.0, gt=0)

    @field_validator("gamma_grid", "sigma_grid", "phi2_grid")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("grids must not be empty")
        return v


class ScanConfig(DesignInputs, Sharding):
    replicates: int = Field(10000, ge=1)
    d1_stage1: int = Field(49, ge=1)
    d_total: int = Field(215, ge=1)
    theta_grid: Optional[List[Tuple[float, float]]] = None

    @field_validator("theta_grid")
    @classmethod
    def _has_true_null(cls, v):
        for t1, t2 in v or []:
            if t1 > 0 and t2 > 0:
                raise ValueError(f"configuration ({t1}, {t2}) has no true null hypothesis")
        return v

    def thetas(self, default: List[Tuple[float, float]]) -> List[ThetaConfig]:
        return [ThetaConfig(t1, t2, self.lam) for t1, t2 in (self.theta_grid or default)]


class ReportConfig(_Document):
    inputs: List[Path] = Field(min_length=1)
    out: Optional[Path] = None


Doc = TypeVar("Doc", bound=_Document)


def load_config(model: Type[Doc], path: Optional[Path], **overrides) -> Doc:
    """Read a config document (or an empty one) and apply CLI overrides that were given."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return model.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid {model.__name__}: {e}") from e


def config_hash(doc: BaseModel) -> str:
    payload = json.dumps(doc.model_dump(mode="json", by_alias=True), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
