"""Run configuration: JSON file plus ``--set key=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..compose import Mode
from ..envs import TASKS

WEIGHTINGS = ("bc", "reward", "safety")
POLICIES = ("base", "skill", "composer", "fixed")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    task: str = "point_safe"
    eval_task: str | None = None
    # files
    dataset: str = "data/dataset.ndjson"
    library: str = "runs/library"
    out: str = "runs/reports"
    # dataset generation
    data_kind: str = "mixed"
    episodes: int = 200
    data_noise: float | None = None
    # networks and optimization
    T: int = 5
    hidden: tuple[int, ...] = (256, 256)
    lr: float = 3e-4
    skill_lr: float = 3e-4
    batch: int = 256
    pretrain_steps: int = 20000
    skill_steps: int = 2000
    composer_steps: int = 1000
    # critics
    critic_steps: int = 5000
    critic_hidden: tuple[int, ...] = (256, 256)
    critic_lr: float = 3e-4
    tau: float = 0.9
    gamma: float = 0.99
    target_rate: float = 1e-3
    adv_temperature: float = 1.0
    clip: float = 100.0
    # adapters and composition
    rank: int = 8
    scale: float = 16.0
    mode: str = "parameter"
    skill_name: str = "skill"
    weighting: str = "bc"
    skills: tuple[str, ...] = ()
    composer_name: str = "composer"
    fixed_alphas: tuple[float, ...] | None = None
    filter_top: int = 0
    cost_ceiling: float = 5.0
    modes: tuple[str, ...] = ("parameter", "noise", "action")
    ranks: tuple[int, ...] = (8,)
    # evaluation and features
    policy: str = "base"
    eval_episodes: int = 100
    feature_layer: int = 1
    feature_samples: int = 512

    def __post_init__(self) -> None:
        for name in ("pretrain_steps", "skill_steps", "composer_steps", "critic_steps", "episodes", "filter_top"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("lr", "skill_lr", "critic_lr", "scale", "adv_temperature", "clip"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.5 <= self.tau < 1 or not 0 <= self.gamma < 1:
            raise ConfigError(f"need tau in [0.5, 1) and gamma in [0, 1), got {self.tau}, {self.gamma}")
        if self.T < 1 or self.batch < 1 or self.rank < 1 or self.feature_samples < 1:
            raise ConfigError("T, batch, rank and feature_samples must be >= 1")
        for t in (self.task, self.eval_task):
            if t is not None and t not in TASKS:
                raise ConfigError(f"unknown task {t!r}; known: {sorted(TASKS)}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        for m in (self.mode, *self.modes):
            try:
                Mode(m)
            except ValueError:
                raise ConfigError(f"unknown composition mode {m!r}") from None
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError(f"bad hidden sizes {self.hidden}")

    @property
    def evaluation_task(self) -> str:
        return self.eval_task or self.task

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **_coerce_all(kw))


_TUPLE_FIELDS = {f.name for f in fields(RunConfig) if "tuple" in str(f.type)}


def _scalar(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def _coerce(key: str, value):
    if key in _TUPLE_FIELDS and value is not None:
        if isinstance(value, str):
            # "--set hidden=64,64" arrives as the string "64,64"
            value = [_scalar(v) for v in value.split(",") if v.strip()]
        elif isinstance(value, (int, float)):
            value = [value]
        return tuple(value)
    return value


def _coerce_all(d: dict) -> dict:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    return {k: _coerce(k, v) for k, v in d.items()}


def parse_override(item: str) -> tuple[str, object]:
    """'key=value' with value parsed as JSON when possible, else kept as a string."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path | None = None, overrides=()) -> RunConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be an object")
    for item in overrides:
        k, v = parse_override(item)
        data[k] = v
    return RunConfig(**_coerce_all(data))
