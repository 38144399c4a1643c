from __future__ import annotations

import hashlib
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError


class ToolkitSettings(BaseSettings):
    """
    Process-wide numerical settings.

    - Uses env vars (prefix VVS_) and an optional .env file.
    - Defaults are the tolerances the acceptance runs are calibrated against.
    """

    model_config = SettingsConfigDict(
        env_prefix="VVS_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    log_level: str = Field("INFO")

    # Flow maps and rays.
    flow_time_max: float = Field(50.0, gt=0)
    ode_tol: float = Field(1e-10, gt=0)

    # Dense linear algebra.
    max_dense_dimension: int = Field(5000, ge=1)
    residual_tol: float = Field(1e-8, gt=0)
    resolvent_tol: float = Field(1e-10, gt=0)
    singular_shift_tol: float = Field(1e-10, gt=0)

    # Riesz projections.
    riesz_nodes: int = Field(64, ge=16)
    riesz_guard_band: float = Field(0.05, gt=0, lt=1)
    riesz_defect_tol: float = Field(1e-6, gt=0)
    trace_tol: float = Field(0.05, gt=0, lt=0.5)
    cluster_tol: float = Field(1e-6, gt=0)

    # Pseudodifferential operators.
    aliasing_threshold: float = Field(1e-6, gt=0)

    # Lyapunov estimation.
    renorm_interval: float = Field(1.0, gt=0)


@lru_cache(maxsize=1)
def get_settings() -> ToolkitSettings:
    """Cached accessor so settings are constructed once per process."""
    return ToolkitSettings()


# -------------------------
# Run configuration
# -------------------------


class FlowSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: Literal["zero", "shear", "kolmogorov", "cellular", "custom"]
    params: Dict[str, float] = Field(default_factory=dict)
    # Only for name == "custom": path to a JSON list of {k, re, im} entries.
    coeffs_path: Optional[str] = None

    @model_validator(mode="after")
    def _check_custom(self) -> "FlowSpec":
        if self.name == "custom" and not self.coeffs_path:
            raise ValueError("custom flow requires coeffs_path")
        return self


class ContourSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    center_re: float = 0.0
    center_im: float = 0.0
    radius: float = Field(0.05, gt=0)
    nodes: int = Field(64, ge=16)

    @property
    def center(self) -> complex:
        return complex(self.center_re, self.center_im)


class PacketSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    deltas: List[float] = Field(default_factory=lambda: [0.25, 0.125, 0.0625])
    eps_list: List[float] = Field(default_factory=lambda: [1e-2, 1e-3, 1e-4])
    t: float = Field(1.0, gt=0)
    carrier: List[int] = Field(default_factory=lambda: [1, 0])
    # Grid points per cutoff for apply_H; raise it when the aliasing check fires.
    grid_factor: int = Field(4, ge=4)

    @field_validator("deltas")
    @classmethod
    def _deltas_reciprocal_integers(cls, value: List[float]) -> List[float]:
        for d in value:
            if d <= 0 or abs(1.0 / d - round(1.0 / d)) > 1e-9:
                raise ValueError(f"packet scale {d} is not 1/integer")
        return value


class Tolerances(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ode_tol: float = Field(1e-10, gt=0)
    eigen_residual: float = Field(1e-8, gt=0)


class RunConfig(BaseModel):
    """
    Validated description of one run.

    Serialized verbatim into every output manifest. `output_dir` and `threads`
    do not influence numbers and are excluded from the config hash.
    """

    model_config = ConfigDict(extra="forbid")

    flow: FlowSpec
    dim: int = Field(2)
    cutoff: int = Field(8, ge=1)
    eps: float = Field(0.0, ge=0)
    eps_grid: List[float] = Field(
        default_factory=lambda: [1e-1, 3e-2, 1e-2, 3e-3, 1e-3]
    )
    contour: ContourSpec = Field(default_factory=ContourSpec)
    delta: Optional[float] = Field(None, ge=0)
    mu_hat: Optional[float] = None
    lambda0_re: Optional[float] = None
    lambda0_im: Optional[float] = None
    horizon: float = Field(200.0, gt=0)
    samples: int = Field(64, ge=1)
    weight_m: int = Field(0, ge=0)
    seed: int = 0
    t: float = Field(1.0, ge=0)
    n_list: List[int] = Field(default_factory=list)
    packet: PacketSpec = Field(default_factory=PacketSpec)
    tolerances: Tolerances = Field(default_factory=Tolerances)
    threads: int = Field(1, ge=1)
    output_dir: str = "var/runs/default"

    @field_validator("dim")
    @classmethod
    def _dim_supported(cls, value: int) -> int:
        if value not in (2, 3):
            raise ValueError(f"unsupported dimension {value}; expected 2 or 3")
        return value

    @field_validator("eps_grid")
    @classmethod
    def _grid_decreasing(cls, value: List[float]) -> List[float]:
        if any(e < 0 for e in value):
            raise ValueError("eps_grid entries must be non-negative")
        if any(b >= a for a, b in zip(value, value[1:])):
            raise ValueError("eps_grid must be strictly decreasing")
        return value

    @field_validator("n_list")
    @classmethod
    def _n_list_increasing(cls, value: List[int]) -> List[int]:
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("n_list must be strictly increasing")
        return value

    @property
    def lambda0(self) -> Optional[complex]:
        if self.lambda0_re is None:
            return None
        return complex(self.lambda0_re, self.lambda0_im or 0.0)

    def hashed_fields(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", exclude={"output_dir", "threads"})

    def config_hash(self) -> str:
        canonical = json.dumps(
            self.hashed_fields(),
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _read_mapping(path: Path) -> Dict[str, Any]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc}") from exc

    try:
        if path.suffix.lower() in {".yaml", ".yml"}:
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config '{path}': {exc}") from exc

    if not isinstance(data, dict):
        raise ConfigError(f"config root in '{path}' must be a mapping")
    return data


def load_run_config(
    path: str | Path,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Load and validate a run configuration.

    Preconditions: `path` names a JSON (or .yaml/.yml) mapping.
    Postconditions: returns a RunConfig; CLI overrides (out, seed, threads)
    are applied before validation so they are checked too.
    Raises: ConfigError, pydantic.ValidationError.
    """
    data = _read_mapping(Path(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return RunConfig.model_validate(data)


__all__ = [
    "ContourSpec",
    "FlowSpec",
    "PacketSpec",
    "RunConfig",
    "ToolkitSettings",
    "Tolerances",
    "get_settings",
    "load_run_config",
]
