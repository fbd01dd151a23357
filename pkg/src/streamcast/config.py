"""Experiment configuration: a JSON tree mirroring the module config dataclasses."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .scenario import GeneratorConfig, ScenarioError
from .streaming import AGGREGATORS, StreamSchedule, validate
from .training import TrainConfig, TrainingError


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_episodes: int = 3000
    eval_episodes: int = 500
    data_seed: int = 0  # train split; the eval split uses data_seed + 1


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: StreamSchedule = field(default_factory=StreamSchedule)
    data: DataConfig = field(default_factory=DataConfig)
    aggregators: list = field(default_factory=lambda: list(AGGREGATORS))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    ensemble_models: int = 2
    ensemble_seed_stride: int = 1000
    nms_radius: float = 2.0
    kmeans_seed: int = 0
    init_agg_from_base: bool = True
    report_latency: bool = False
    threads: int = 1
    out: str = "runs"

    def validate(self) -> None:
        try:
            self.generator.validate()
            self.train.validate()
        except (ScenarioError, TrainingError) as exc:
            raise ConfigError(str(exc)) from None
        g, s = self.generator, self.schedule
        if not (g.h_obs == s.h_obs == self.encoder.h_obs):
            raise ConfigError("generator.h_obs, schedule.h_obs and encoder.h_obs must agree")
        if not (g.h_pred == s.h_pred == self.decoder.horizon):
            raise ConfigError("generator.h_pred, schedule.h_pred and decoder.horizon must agree")
        if g.ensemble_frames != s.window:
            raise ConfigError("generator.ensemble_frames must equal schedule.window")
        if self.encoder.width != self.decoder.width:
            raise ConfigError("encoder.width and decoder.width must agree")
        problem = validate(s)
        if problem:
            raise ConfigError(f"schedule: {problem}")
        unknown = [a for a in self.aggregators if a not in AGGREGATORS]
        if unknown:
            raise ConfigError(f"unknown aggregator(s): {unknown}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.ensemble_models < 2 and any(a.startswith("modelens") or a == "dual" for a in self.aggregators):
            raise ConfigError("model-ensemble aggregators need ensemble_models >= 2")
        if self.data.train_episodes < 1 or self.data.eval_episodes < 1:
            raise ConfigError("episode counts must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        """Hash of every setting that can change results (not the output location or thread count)."""
        tree = self.to_dict()
        del tree["out"], tree["threads"]
        return hashlib.sha256(json.dumps(tree, sort_keys=True).encode()).hexdigest()[:16]

    def member_seeds(self, seed: int) -> list[int]:
        """Base-model seeds for the ensemble built around ``seed``."""
        return [seed + k * self.ensemble_seed_stride for k in range(self.ensemble_models)]


def _build(cls, tree, path: str):
    if not isinstance(tree, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(tree) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key: {where}{unknown[0]}")
    kwargs = {}
    for name, value in tree.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name)
        elif isinstance(value, list) and isinstance(getattr(cls(), name, None), tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


_NESTED = {(ExperimentConfig, "generator"): GeneratorConfig, (ExperimentConfig, "encoder"): EncoderConfig,
           (ExperimentConfig, "decoder"): DecoderConfig, (ExperimentConfig, "train"): TrainConfig,
           (ExperimentConfig, "schedule"): StreamSchedule, (ExperimentConfig, "data"): DataConfig}


def from_dict(tree: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, tree, "")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        tree = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return from_dict(tree)
