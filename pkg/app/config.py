import json
import os
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, field_validator, model_validator

from .models import InvalidArgumentError, Mechanism, Scale

if os.path.exists("local.env"):
    load_dotenv("local.env")
load_dotenv()

ENV_PREFIX = "SDN_"
ENV_FIELDS = ("seed", "scale", "mechanism", "jobs", "out", "catalog", "checkpoint", "data", "log_level")


class RunConfig(BaseModel):
    """Everything one CLI invocation needs; file < SDN_* environment < flags."""
    command: str
    catalog: Optional[str] = None
    data: str = "data"
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    baseline: Optional[str] = None
    split: Optional[str] = None
    val_split: Optional[str] = "test_seen_pose"
    seed: int = 0
    scale: Scale = Scale.TINY
    mechanism: Optional[str] = None
    windows: Optional[Dict[int, int]] = None
    max_nqd: Optional[float] = None
    diff_min: Optional[int] = None
    diff_max: Optional[int] = None
    jobs: Optional[int] = None
    preset: Optional[str] = None
    train: dict = {}
    epochs: Optional[int] = None
    max_steps: Optional[int] = None
    pair: int = 0
    query: Optional[List[int]] = None
    level: int = 0
    suites: Optional[List[str]] = None
    unseen_parts: Optional[List[str]] = None
    log_level: str = "INFO"

    @field_validator("seed")
    @classmethod
    def _u64(cls, value):
        if not 0 <= value < 2 ** 64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {value}")
        return value

    @field_validator("mechanism")
    @classmethod
    def _known_mechanism(cls, value):
        if value is not None:
            Mechanism.parse(value)
        return value

    @field_validator("jobs")
    @classmethod
    def _positive_jobs(cls, value):
        if value is not None and value < 1:
            raise ValueError(f"jobs must be >= 1, got {value}")
        return value

    @field_validator("query", mode="before")
    @classmethod
    def _parse_query(cls, value):
        if isinstance(value, str):
            parts = value.split(",")
            if len(parts) != 2:
                raise ValueError(f"query must be X,Y, got '{value}'")
            return [int(p) for p in parts]
        return value

    @field_validator("unseen_parts", mode="before")
    @classmethod
    def _parse_names(cls, value):
        if isinstance(value, str):
            return [name.strip() for name in value.split(",") if name.strip()]
        return value

    @field_validator("windows", mode="before")
    @classmethod
    def _parse_windows(cls, value):
        # "7,5,3" maps onto the attention resolutions 16, 8, 4
        if isinstance(value, str):
            sizes = [int(p) for p in value.split(",")]
            return dict(zip((16, 8, 4), sizes))
        return value

    @model_validator(mode="after")
    def _level(self):
        if self.level not in (0, 1, 2):
            raise ValueError(f"level must be 0, 1 or 2, got {self.level}")
        return self

    def gen_overrides(self) -> dict:
        overrides = {}
        if self.max_nqd is not None:
            overrides["max_nqd"] = self.max_nqd
        if self.diff_min is not None:
            overrides["d_min"] = self.diff_min
        if self.diff_max is not None:
            overrides["d_max"] = self.diff_max
        return overrides

    def require_file(self, name: str) -> Path:
        """Path of the named field, which must point at an existing file."""
        value = getattr(self, name)
        if value is None:
            raise InvalidArgumentError(f"--{name} is required for '{self.command}'")
        path = Path(value)
        if not path.is_file():
            raise FileNotFoundError(f"{name} not found: {path}")
        return path


def env_values(environ: Optional[dict] = None) -> dict:
    environ = os.environ if environ is None else environ
    values = {}
    for name in ENV_FIELDS:
        raw = environ.get(ENV_PREFIX + name.upper())
        if raw not in (None, ""):
            values[name] = raw
    return values


def file_values(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    with open(p, "r") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"config file {p} must hold a JSON object")
    return data


def resolve_run_config(command: str, flags: dict, config_path: Optional[str] = None,
                       environ: Optional[dict] = None) -> RunConfig:
    """Layer the JSON file, then SDN_* variables, then flags that were given."""
    merged = {}
    merged.update(file_values(config_path))
    merged.update(env_values(environ))
    merged.update({k: v for k, v in flags.items() if v is not None})
    merged["command"] = command
    return RunConfig.model_validate(merged)
