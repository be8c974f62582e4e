"""Experiment configuration: one JSON document with a section per module."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional

from . import skeleton as sk
from .data_synth import DatasetConfig, FilterConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .losses import EXTRACTOR_SEED, LossWeights
from .meta import MetaConfig, PretrainConfig
from .model import ModelConfig
from .sampling import SamplerConfig


@dataclass(frozen=True)
class LossSection:
    l1: float = 1.0
    perceptual: float = 1.0
    temporal: float = 0.1
    extractor_seed: int = EXTRACTOR_SEED
    extractor_path: Optional[str] = None  # archive of pretrained extractor weights
    discriminator_base: int = 16

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.l1, self.perceptual, self.temporal)


@dataclass(frozen=True)
class EvalSection:
    shots: tuple = (5,)
    episodes_per_person: int = 20
    episode_query_len: int = 50
    interval: int = 5
    alpha: float = 1e-4
    steps: int = 3
    fid: bool = False
    strips: int = 8

    def eval_config(self, variant: str = "move", adapt: bool = True) -> EvalConfig:
        return EvalConfig(self.alpha, self.steps, variant, adapt, self.fid)


def _build(cls, d):
    d = dict(d or {})
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class ExperimentConfig:
    name: str = "default"
    seed: int = 0
    data_dir: Optional[str] = None
    data: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSection = field(default_factory=LossSection)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "ExperimentConfig":
        d, m = self.data, self.model
        if (d.height, d.width) != (m.height, m.width):
            raise ConfigError(f"data resolution {d.width}x{d.height} differs from model "
                              f"resolution {m.width}x{m.height}")
        if m.pose_channels != sk.NUM_LIMBS + 1:
            raise ConfigError(f"model expects {m.pose_channels} pose channels, the renderer "
                              f"produces {sk.NUM_LIMBS + 1}")
        need = self.sampler.window()
        if need > d.clip_length:
            raise ConfigError(f"a K={self.sampler.K} task needs {need} frames, clips have "
                              f"{d.clip_length}")
        for k in self.eval.shots:
            if k < 2:
                raise ConfigError(f"shot count {k} < 2")
        return self

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Route one seed into every random component."""
        return replace(self, seed=seed, data=replace(self.data, seed=seed),
                       sampler=replace(self.sampler, seed=seed),
                       pretrain=replace(self.pretrain, seed=seed),
                       meta=replace(self.meta, seed=seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval"]["shots"] = list(self.eval.shots)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        data = dict(d.get("data") or {})
        if isinstance(data.get("filter"), dict):
            data["filter"] = _build(FilterConfig, data["filter"])
        ev = dict(d.get("eval") or {})
        if "shots" in ev:
            ev["shots"] = tuple(int(k) for k in ev["shots"])
        cfg = cls(name=d.get("name", "default"), seed=int(d.get("seed", 0)),
                  data_dir=d.get("data_dir"),
                  data=_build(DatasetConfig, data), model=_build(ModelConfig, d.get("model")),
                  loss=_build(LossSection, d.get("loss")),
                  sampler=_build(SamplerConfig, d.get("sampler")),
                  pretrain=_build(PretrainConfig, d.get("pretrain")),
                  meta=_build(MetaConfig, d.get("meta")), eval=_build(EvalSection, ev))
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(d)


def parse_shots(text: str) -> List[int]:
    try:
        shots = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --shots value {text!r}") from e
    if not shots or any(k < 2 for k in shots):
        raise ConfigError(f"shots must be integers >= 2, got {text!r}")
    return shots
