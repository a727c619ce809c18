"""Flat ``key=value`` run configuration with dotted keys and ``#`` comments."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .diffusion import NoiseSchedule
from .model import ModelConfig
from .training import DEFAULT_PLANS, STAGES, StagePlan

STAGE_KEYS = ("lr", "steps", "batch_size", "warmup_steps", "relax_after", "weight_decay")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: dict[str, StagePlan] = field(default_factory=lambda: dict(DEFAULT_PLANS))
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    data_seed: int = 0
    n_und: int = 16
    n_gen: int = 16
    out_dir: str = "runs/toy"
    seed: int = 0
    precision: int = 32
    teacher_seed: int = 1234
    sample_steps: int = 50

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")

    def plan(self, stage: str) -> StagePlan:
        return self.stages[stage]


_SCALARS = {
    "data.seed": "data_seed",
    "data.n_und": "n_und",
    "data.n_gen": "n_gen",
    "out_dir": "out_dir",
    "seed": "seed",
    "precision": "precision",
    "teacher.seed": "teacher_seed",
    "sample.steps": "sample_steps",
}


def _coerce(key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if like is None:
            return None if raw.lower() in ("", "none") else int(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    model_kw = {}
    sched_kw = {}
    stage_kw: dict[str, dict] = {}
    scalars = {}
    model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    sched_fields = {f.name for f in dataclasses.fields(NoiseSchedule)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _SCALARS:
            attr = _SCALARS[key]
            scalars[attr] = _coerce(key, raw, getattr(cfg, attr))
        elif key.startswith("model.") and key[6:] in model_fields:
            name = key[6:]
            model_kw[name] = _coerce(key, raw, getattr(cfg.model, name))
        elif key.startswith("schedule.") and key[9:] in sched_fields:
            name = key[9:]
            sched_kw[name] = _coerce(key, raw, getattr(cfg.schedule, name))
        elif key.startswith("stage."):
            parts = key.split(".")
            if len(parts) != 3 or parts[1] not in STAGES or parts[2] not in STAGE_KEYS:
                raise ConfigError(f"unknown config key: {key}")
            like = getattr(DEFAULT_PLANS[parts[1]], parts[2])
            if parts[2] == "relax_after":
                like = None
            stage_kw.setdefault(parts[1], {})[parts[2]] = _coerce(key, raw, like)
        else:
            raise ConfigError(f"unknown config key: {key}")
    try:
        model = replace(cfg.model, **model_kw)
        sched = replace(cfg.schedule, **sched_kw)
        stages = {s: replace(p, **stage_kw.get(s, {})) for s, p in cfg.stages.items()}
        return RunConfig(model=model, stages=stages, schedule=sched, **scalars)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> RunConfig:
    try:
        return parse_config(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for key, attr in _SCALARS.items():
        lines.append(f"{key}={getattr(cfg, attr)}")
    for f in dataclasses.fields(ModelConfig):
        lines.append(f"model.{f.name}={getattr(cfg.model, f.name)}")
    for f in dataclasses.fields(NoiseSchedule):
        lines.append(f"schedule.{f.name}={getattr(cfg.schedule, f.name)!r}")
    for s in STAGES:
        p = cfg.stages[s]
        for k in STAGE_KEYS:
            v = getattr(p, k)
            lines.append(f"stage.{s}.{k}={'none' if v is None else repr(v)}")
    return "\n".join(lines) + "\n"
