"""Experiment configuration: a versioned YAML document parsed into nested
dataclasses. Every key is checked against the schema and every value is
validated before any computation starts."""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .rejection import TopK, rule_from_dict
from .tasks import make_reward, make_target

SCHEMA_VERSION = 1
TASKS = ("train-base", "graft", "pgraft", "invnoise", "diagnose", "eval")


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    hidden: list = field(default_factory=lambda: [128, 128, 128])
    time_dim: int = 16


@dataclass
class ScheduleSection:
    N: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    epochs: typing.Optional[int] = None
    n_data: int = 20000
    final_lr: typing.Optional[float] = None


@dataclass
class FlowSection:
    eta: float = 0.01
    n_b: int = 10
    corrector_eta: float = 0.01
    corrector_steps: int = 3000
    corrector_hidden: typing.Optional[list] = None
    metric: str = "sliced_w2"
    lipschitz_override: bool = False
    lipschitz_probes: int = 10000
    perturb: float = 0.0


@dataclass
class DiagnoseSection:
    timesteps: list = field(default_factory=lambda: [250, 500, 750, 1000])
    n_states: int = 1000
    n_rollouts: int = 100
    histogram_steps: list = field(default_factory=lambda: [250, 1000])
    energy_times: list = field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0])
    energy_horizon: float = 5.0
    energy_mc_samples: int = 4000


@dataclass
class EvalSection:
    n_samples: int = 4096
    checkpoint: typing.Optional[str] = None
    kind: str = "diffusion"


@dataclass
class ExperimentConfig:
    task: str
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out: str = "runs"
    target: typing.Any = "mixture_2d"
    reward: typing.Any = "half_plane"
    rule: dict = field(default_factory=lambda: {"tag": "topk", "M": 4, "K": 1})
    n_i: int = 0
    rounds: int = 5
    samples_per_round: int = 4096
    reference_checkpoint: typing.Optional[str] = None
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    base_train: TrainSection = field(default_factory=TrainSection)
    finetune: TrainSection = field(default_factory=TrainSection)
    flow: FlowSection = field(default_factory=FlowSection)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)
    eval: EvalSection = field(default_factory=EvalSection)


def _is_section(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], where)
    if tp is typing.Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if tp in (list, dict):
        if not isinstance(value, tp):
            raise ConfigError(f"{where}: expected a {tp.__name__}")
        return value
    if _is_section(tp):
        return _build(tp, value, where)
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name],
                                     f"{where}.{f.name}" if where else f.name)
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"{where or 'config'}: {err}") from None


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.schema_version == SCHEMA_VERSION,
         f"schema_version {cfg.schema_version} unsupported (expected {SCHEMA_VERSION})")
    need(cfg.task in TASKS, f"task must be one of {TASKS}")
    need(cfg.seed >= 0, "seed must be non-negative")
    need(cfg.schedule.N >= 1, "schedule.N must be positive")
    need(0 < cfg.schedule.beta_start <= cfg.schedule.beta_end < 1,
         "need 0 < beta_start <= beta_end < 1")
    need(0 <= cfg.n_i <= cfg.schedule.N, f"n_i must lie in [0, {cfg.schedule.N}]")
    need(cfg.rounds >= 1 and cfg.samples_per_round >= 1, "rounds and samples must be positive")
    need(all(isinstance(h, int) and h > 0 for h in cfg.model.hidden) and cfg.model.hidden,
         "model.hidden must be a non-empty list of positive integers")
    need(cfg.model.time_dim >= 2 and cfg.model.time_dim % 2 == 0,
         "model.time_dim must be an even integer >= 2")
    for name in ("base_train", "finetune"):
        sec = getattr(cfg, name)
        need(sec.steps >= 0 and sec.batch_size >= 1 and sec.lr > 0 and sec.n_data >= 1,
             f"{name}: steps >= 0, batch_size >= 1, lr > 0, n_data >= 1 required")
        need(sec.epochs is None or sec.epochs >= 1, f"{name}.epochs must be positive")
        need(sec.final_lr is None or 0 < sec.final_lr <= sec.lr,
             f"{name}.final_lr must lie in (0, lr]")
    try:
        rule = rule_from_dict(cfg.rule)
        make_target(cfg.target)
        make_reward(cfg.reward)
    except (ValueError, TypeError, KeyError) as err:
        raise ConfigError(str(err)) from None
    if isinstance(rule, TopK):
        need(cfg.samples_per_round % rule.M == 0,
             "samples_per_round must be a multiple of the rule's M")
    fl = cfg.flow
    need(fl.eta > 0 and fl.corrector_eta > 0, "flow step sizes must be positive")
    need(fl.n_b >= 1, "flow.n_b must be at least 1")
    need(fl.metric in ("sliced_w2", "mmd"), "flow.metric must be sliced_w2 or mmd")
    need(fl.perturb >= 0 and fl.corrector_steps >= 0 and fl.lipschitz_probes >= 1,
         "flow: perturb, corrector_steps >= 0 and lipschitz_probes >= 1 required")
    dg = cfg.diagnose
    need(all(isinstance(n, int) and 0 <= n <= cfg.schedule.N
             for n in dg.timesteps + dg.histogram_steps),
         "diagnose timesteps must be integers in [0, N]")
    need(dg.n_rollouts >= 2 and dg.n_states >= 2, "diagnose needs >= 2 states and rollouts")
    need(all(0 < t < dg.energy_horizon for t in dg.energy_times),
         "energy_times must lie strictly inside (0, energy_horizon)")
    need(dg.energy_mc_samples >= 2, "energy_mc_samples must be at least 2")
    need(cfg.eval.n_samples >= 2, "eval.n_samples must be at least 2")
    need(cfg.eval.kind in ("diffusion", "flow"), "eval.kind must be diffusion or flow")
    if cfg.task == "eval":
        need(cfg.eval.checkpoint is not None, "eval needs eval.checkpoint")
    return cfg


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    if "task" not in data:
        raise ConfigError("config needs a task")
    return validate(_build(ExperimentConfig, data, ""))


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot read config: {err}") from None
    return parse_config(data)


def to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical YAML text: sorted keys, block style."""
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)


def git_blob_hash(data: bytes) -> str:
    """SHA-1 over ``blob <len>\\0<data>``, the content address git uses."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def manifest_hash(cfg: ExperimentConfig, input_files=()) -> str:
    """Content address of a run: the resolved config (minus the output
    directory, which does not affect results) and the bytes of every input."""
    resolved = to_dict(cfg)
    resolved.pop("out")
    parts = [yaml.safe_dump(resolved, sort_keys=True).encode()]
    for p in sorted(str(f) for f in input_files):
        parts.append(Path(p).read_bytes())
    return git_blob_hash(b"\0".join(parts))
