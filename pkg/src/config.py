"""Run configuration: defaults, then a ``key = value`` file, then command-line flags."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

from dotenv import dotenv_values

from errors import ConfigError


logger = logging.getLogger(__name__)

THREADS_ENV = "SPATIOTEMP_THREADS"
MODEL_KINDS = ("lmm", "gmrf", "mean")
DEFAULT_MAX_THREADS = 8


def thread_count() -> int:
    """Worker threads for per-day and per-fold parallelism: SPATIOTEMP_THREADS, else the cores up to 8."""
    raw = os.getenv(THREADS_ENV, "").strip()
    if not raw:
        return min(os.cpu_count() or 1, DEFAULT_MAX_THREADS)
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {value}")
    return value


@dataclass(frozen=True)
class CvScheme:
    """``kfold:K`` or ``lpo:p:h``."""

    kind: str
    k: int = 10
    p: int = 5
    h: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "CvScheme":
        parts = [p.strip() for p in text.strip().split(":")]
        try:
            if parts[0] == "kfold" and len(parts) == 2:
                return cls("kfold", k=int(parts[1]))
            if parts[0] == "lpo" and len(parts) == 3:
                return cls("lpo", p=int(parts[1]), h=float(parts[2]))
        except ValueError:
            pass
        raise ConfigError(f"bad cv scheme {text!r}; expected kfold:K or lpo:p:h")

    @property
    def label(self) -> str:
        return f"kfold:{self.k}" if self.kind == "kfold" else f"lpo:{self.p}:{self.h:g}"


@dataclass(frozen=True)
class RunConfig:
    input: Optional[str] = None
    models: Tuple[str, ...] = ("lmm", "gmrf")
    region_cell_km: float = 50.0
    region_origin_x: float = 0.0
    region_origin_y: float = 0.0
    min_per_day: int = 30
    min_per_station: int = 30
    mesh_buffer_fraction: float = 0.2
    mesh_max_edge_km: Optional[float] = None
    mesh_max_nodes: int = 600
    cv_schemes: Tuple[CvScheme, ...] = field(default_factory=lambda: (CvScheme("kfold", k=10),))
    n_iter: int = 10
    sweep_p: int = 20
    h_list: Tuple[float, ...] = (0.0, 25.0, 50.0, 100.0, 150.0)
    seed: int = 1
    max_rounds: int = 200
    max_evals: Optional[int] = None
    tol: float = 1e-6
    output_dir: str = "output"
    fit_path: Optional[str] = None
    day: Optional[str] = None
    raster_nx: int = 100
    raster_ny: int = 100
    lat0: Optional[float] = None

    def __post_init__(self) -> None:
        bad = [m for m in self.models if m not in MODEL_KINDS]
        if bad:
            raise ConfigError(f"unknown model kinds {bad}; choose from {list(MODEL_KINDS)}")
        if self.region_cell_km <= 0:
            raise ConfigError("region_cell_km must be positive")
        if self.min_per_day < 1 or self.min_per_station < 1:
            raise ConfigError("min_per_day and min_per_station must be >= 1")
        if self.mesh_buffer_fraction < 0:
            raise ConfigError("mesh_buffer_fraction must be >= 0")
        if self.mesh_max_edge_km is not None and self.mesh_max_edge_km <= 0:
            raise ConfigError("mesh_max_edge_km must be positive")
        if self.max_evals is not None and self.max_evals < 1:
            raise ConfigError("max_evals must be >= 1")
        if self.mesh_max_nodes < 3:
            raise ConfigError("mesh_max_nodes must be >= 3")
        if self.n_iter < 1 or self.max_rounds < 1 or self.sweep_p < 1:
            raise ConfigError("n_iter, sweep_p and max_rounds must be >= 1")
        for scheme in self.cv_schemes:
            if scheme.kind == "kfold" and scheme.k < 2:
                raise ConfigError(f"cv scheme {scheme.label}: K must be >= 2")
            if scheme.kind == "lpo" and (scheme.p < 1 or scheme.h < 0):
                raise ConfigError(f"cv scheme {scheme.label}: need p >= 1 and h >= 0")
        if list(self.h_list) != sorted(self.h_list) or not self.h_list:
            raise ConfigError("h_list must be non-empty and ascending")
        if self.tol <= 0:
            raise ConfigError("tol must be positive")
        if any(h < 0 for h in self.h_list):
            raise ConfigError("h_list entries must be >= 0")
        if self.raster_nx < 2 or self.raster_ny < 2:
            raise ConfigError("raster_nx and raster_ny must be >= 2")

    # -----------------------
    # Sources
    # -----------------------

    @classmethod
    def from_file(cls, path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """Defaults < config file < ``overrides`` (flags; ``None`` values are ignored)."""
        raw: Dict[str, Any] = {}
        if path:
            if not os.path.exists(path):
                raise ConfigError(f"config file not found: {path}")
            raw.update({k.strip().lower(): v for k, v in dotenv_values(path).items() if v is not None})
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: Dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        values = {}
        for key, value in raw.items():
            try:
                values[key] = _coerce(key, value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["models"] = list(self.models)
        out["cv_schemes"] = [s.label for s in self.cv_schemes]
        out["h_list"] = list(self.h_list)
        return out


# -----------------------
# Helpers
# -----------------------

_INT_KEYS = {
    "min_per_day", "min_per_station", "mesh_max_nodes", "n_iter", "sweep_p", "seed",
    "max_rounds", "max_evals", "raster_nx", "raster_ny",
}
_FLOAT_KEYS = {
    "region_cell_km", "region_origin_x", "region_origin_y", "mesh_buffer_fraction",
    "mesh_max_edge_km", "tol", "lat0",
}


def _split(value: Any) -> List[str]:
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return list(value)


def _coerce(key: str, value: Any) -> Any:
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key == "day":
        return str(value).strip()
    if key == "models":
        return tuple(str(v).lower() for v in _split(value))
    if key == "h_list":
        return tuple(float(v) for v in _split(value))
    if key == "cv_schemes":
        return tuple(v if isinstance(v, CvScheme) else CvScheme.parse(str(v)) for v in _split(value))
    return value
