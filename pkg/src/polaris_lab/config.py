"""Typed INI configuration for experiment sweeps.

Every key lives in one section; unknown sections or keys are rejected so a
typo cannot silently fall back to a default. Lists are comma separated and
Cholesky factors list their rows separated by ``;``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .oracle import AnalyticModel, grid_mixture
from .schedule import build_schedule

OMEGA0_GRID = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.5, 9.0, 10.0)


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _strs(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    # [model]
    model_seed: int = 0
    shape: tuple = (8, 8)
    scales: tuple = (0.05, 0.5)
    lengths: tuple = (2.0, 1.0)
    weights: tuple = (0.5, 0.5)
    mean_amplitude: float = 0.5
    nugget: float = 1e-3
    channel_corr: float = 0.8
    condition: int = 0
    components: tuple = ()
    # [schedule]
    t_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps_offset: int = 1
    # [experiment]
    steps: tuple = tuple(range(10, 101, 10))
    seeds: int = 50
    seed_base: int = 0
    fixed_omega: float = 7.5
    omega0: float = 1.0
    guard: float = 1e-8
    prediction_noise: float = 0.1
    space: str = "noise"
    replay_order: str = "forward"
    # [ablation]
    ablation_steps: int = 50
    ablation_seeds: int = 100
    omega0_grid: tuple = OMEGA0_GRID
    random_lo: float = 0.0
    random_hi: float = 2.0
    # [theorems]
    dim: int = 16
    exact_noise: float = 0.1
    eta: float = 1.0
    points: int = 41
    t_min: float = 1e-6
    t_max: float = 1e-2
    noise_min: float = 1e-8
    noise_max: float = 1e-3
    contrast_noise: float = 1e-4
    trace_steps: int = 50
    trace_seeds: int = 100
    # [restore]
    tasks: tuple = ("deblur", "downsample", "inpaint", "colorize")
    methods: tuple = ("ddnm", "dps", "ddrm")
    restore_steps: int = 50
    restore_seeds: int = 10
    restore_eta: float = 0.1
    restore_lambda: float = 0.2
    baseline_omega: float = 1.0
    measurement_noise: float = 0.0
    # [invariance]
    invariance_instances: int = 100
    invariance_steps: int = 20
    invariance_omega: float = 7.5

    def __post_init__(self):
        if not self.steps:
            raise ConfigError("step list must not be empty", key="steps")
        if any(t < 1 for t in self.steps):
            raise ConfigError("every step count must be >= 1", key="steps")
        for key in ("seeds", "ablation_seeds", "trace_seeds", "restore_seeds", "invariance_instances"):
            if getattr(self, key) < 1:
                raise ConfigError("seed count must be >= 1", key=key)
        if self.space not in ("noise", "score", "velocity"):
            raise ConfigError(f"unknown space {self.space!r}", key="space")
        if self.replay_order not in ("forward", "reverse"):
            raise ConfigError(f"unknown replay order {self.replay_order!r}", key="replay_order")
        if self.prediction_noise < 0:
            raise ConfigError("must be >= 0", key="prediction_noise")
        if not self.guard > 0:
            raise ConfigError("must be > 0", key="guard")

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


SECTIONS = {
    "model": {
        "seed": ("model_seed", int),
        "shape": ("shape", _ints),
        "scales": ("scales", _floats),
        "lengths": ("lengths", _floats),
        "weights": ("weights", _floats),
        "mean_amplitude": ("mean_amplitude", float),
        "nugget": ("nugget", float),
        "channel_corr": ("channel_corr", float),
        "condition": ("condition", int),
    },
    "schedule": {
        "t_train": ("t_train", int),
        "beta_start": ("beta_start", float),
        "beta_end": ("beta_end", float),
        "steps_offset": ("steps_offset", int),
    },
    "experiment": {
        "steps": ("steps", _ints),
        "seeds": ("seeds", int),
        "seed_base": ("seed_base", int),
        "fixed_omega": ("fixed_omega", float),
        "omega0": ("omega0", float),
        "guard": ("guard", float),
        "prediction_noise": ("prediction_noise", float),
        "space": ("space", str),
        "replay_order": ("replay_order", str),
    },
    "ablation": {
        "steps": ("ablation_steps", int),
        "seeds": ("ablation_seeds", int),
        "omega0_grid": ("omega0_grid", _floats),
        "random_lo": ("random_lo", float),
        "random_hi": ("random_hi", float),
    },
    "theorems": {
        "dim": ("dim", int),
        "exact_noise": ("exact_noise", float),
        "eta": ("eta", float),
        "points": ("points", int),
        "t_min": ("t_min", float),
        "t_max": ("t_max", float),
        "noise_min": ("noise_min", float),
        "noise_max": ("noise_max", float),
        "contrast_noise": ("contrast_noise", float),
        "trace_steps": ("trace_steps", int),
        "trace_seeds": ("trace_seeds", int),
    },
    "restore": {
        "tasks": ("tasks", _strs),
        "methods": ("methods", _strs),
        "steps": ("restore_steps", int),
        "seeds": ("restore_seeds", int),
        "eta": ("restore_eta", float),
        "lambda": ("restore_lambda", float),
        "baseline_omega": ("baseline_omega", float),
        "measurement_noise": ("measurement_noise", float),
    },
    "invariance": {
        "instances": ("invariance_instances", int),
        "steps": ("invariance_steps", int),
        "omega": ("invariance_omega", float),
    },
}


def _parse_component(name, section) -> tuple:
    allowed = {"weight", "mean", "chol"}
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key in [{name}]", key=f"{name}.{key}")
    try:
        weight = float(section["weight"])
        mean = _floats(section["mean"])
        chol = tuple(_floats(row) for row in section["chol"].split(";") if row.strip())
    except KeyError as exc:
        raise ConfigError(f"missing key in [{name}]", key=f"{name}.{exc.args[0]}") from None
    except ValueError as exc:
        raise ConfigError(str(exc), key=name) from None
    return weight, mean, chol


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {}
    components = []
    for name in parser.sections():
        if name.startswith("component."):
            components.append((name, _parse_component(name, parser[name])))
            continue
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]", key=name)
        schema = SECTIONS[name]
        for key, raw in parser[name].items():
            if key not in schema:
                raise ConfigError(f"unknown key in [{name}]", key=f"{name}.{key}")
            attr, conv = schema[key]
            try:
                values[attr] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value {raw!r}: {exc}", key=f"{name}.{key}") from None
    if components:
        components.sort(key=lambda c: c[0])
        values["components"] = tuple(c for _, c in components)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", key="config") from None
    return parse_config(text, source=str(path))


def build_model(cfg: ExperimentConfig) -> AnalyticModel:
    if cfg.components:
        try:
            weights = [c[0] for c in cfg.components]
            means = [c[1] for c in cfg.components]
            chols = [np.array(c[2], dtype=np.float64) for c in cfg.components]
            return AnalyticModel.from_cholesky(weights, means, chols)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc), key="component") from None
    return grid_mixture(
        cfg.model_seed,
        shape=tuple(cfg.shape),
        scales=cfg.scales,
        lengths=cfg.lengths,
        weights=cfg.weights,
        mean_amplitude=cfg.mean_amplitude,
        nugget=cfg.nugget,
        channel_corr=cfg.channel_corr,
    )


def build_noise_schedule(cfg: ExperimentConfig):
    return build_schedule(cfg.t_train, cfg.beta_start, cfg.beta_end)


def config_keys() -> list[str]:
    return [f"{s}.{k}" for s, keys in SECTIONS.items() for k in keys]


__all__ = ["ExperimentConfig", "load_config", "parse_config", "build_model", "build_noise_schedule", "config_keys"]
