from __future__ import annotations
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ccbif.interval import DEFAULT_PRECISION, MAX_PRECISION, MIN_PRECISION
from ccbif.polysys import MassParams

THREADS_ENV = "CCBIF_THREADS"


def resolve_threads(threads=None):
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if threads is None:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise ValueError("thread count must be at least 1")
    return threads


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    command: str = "solve"
    family: Literal["three-equal", "two-pairs", "general"] = "three-equal"
    m: Optional[float] = None
    masses: Optional[Tuple[float, float, float, float]] = None
    m_range: Optional[Tuple[float, float]] = None
    system: Literal["ac", "dziobek"] = "ac"
    precision: int = Field(DEFAULT_PRECISION, ge=MIN_PRECISION, le=MAX_PRECISION)
    budget: int = Field(100000, ge=1)
    seed: int = 0
    tolerance: float = Field(1e-10, gt=0)
    threads: Optional[int] = Field(None, ge=1)
    out: Optional[str] = None

    @field_validator("m")
    @classmethod
    def _positive_m(cls, value):
        if value is not None and value <= 0:
            raise ValueError("masses must be positive")
        return value

    @field_validator("masses")
    @classmethod
    def _positive_masses(cls, value):
        if value is not None and any(x <= 0 for x in value):
            raise ValueError("masses must be positive")
        return value

    @field_validator("m_range")
    @classmethod
    def _non_empty_range(cls, value):
        if value is not None and value[0] == value[1]:
            raise ValueError("sweep range must be non-empty")
        return value

    @model_validator(mode="after")
    def _masses_for_general(self):
        if self.family == "general" and self.masses is None:
            raise ValueError("family 'general' needs explicit masses m1..m4")
        return self

    def mass_params(self, m=None):
        if self.family == "general":
            masses = list(self.masses)
            if m is not None:
                masses[3] = m
            return MassParams(*masses, pattern="general")
        value = m if m is not None else (self.m if self.m is not None else 1.0)
        return MassParams.family(self.family, value)

    def resolved_threads(self):
        return resolve_threads(self.threads)

    def header(self):
        data = self.model_dump()
        data["threads"] = self.resolved_threads()
        return data


def _coerce(key, raw):
    raw = raw.strip()
    if key in ("masses", "m_range"):
        return [float(x) for x in raw.replace(",", " ").split()]
    return raw


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment and dashes in keys become underscores."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"config file {path} does not exist")
    values = {}
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{number}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = key.strip().replace("-", "_")
        values[key] = _coerce(key, raw)
    return values


def build_config(config_file=None, **options):
    """RunConfig from an optional file overlaid with explicit options (None means unset)."""
    values = read_config_file(config_file) if config_file else {}
    values.update({k: v for k, v in options.items() if v is not None})
    return RunConfig(**values)


def parse_masses(values: List[Optional[float]]):
    """Explicit m1..m4 with unset entries defaulting to 1, or None when none is set."""
    if all(v is None for v in values):
        return None
    return tuple(1.0 if v is None else v for v in values)
