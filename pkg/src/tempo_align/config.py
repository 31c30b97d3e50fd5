"""Run configuration, loadable from a YAML file whose keys mirror the fields."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError, InvalidInputError
from .features import FbankConfig
from .synth import SceneSpec, desk_fbank_config
from .optim import LarsConfig, ScheduleConfig
from .pairing import PairingStrategy

STAGES = ("synth", "extract", "pretrain_ai", "finetune_at", "evaluate", "matrix")


@dataclass
class StageConfig:
    batch_size: int
    epochs: int
    warmup_epochs: int
    lr_weights: float
    lr_bias: float
    trust_coefficient: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-6
    decay: str = "cosine"

    def lars(self) -> LarsConfig:
        return LarsConfig(self.trust_coefficient, self.momentum, self.weight_decay,
                          self.lr_weights, self.lr_bias)

    def schedule(self) -> ScheduleConfig | None:
        if self.epochs == 0:
            return None
        return ScheduleConfig(min(self.warmup_epochs, self.epochs - 1), self.epochs, self.decay)


def default_pretrain() -> StageConfig:
    # audio-image rates scaled by 0.1; few steps per epoch, so a larger trust coefficient
    return StageConfig(batch_size=32, epochs=30, warmup_epochs=10,
                       lr_weights=0.02, lr_bias=4.8e-4, trust_coefficient=0.5)


def default_finetune() -> StageConfig:
    # a short, gentle stage on 128 captioned clips; longer runs wash out pretraining
    return StageConfig(batch_size=32, epochs=10, warmup_epochs=5,
                       lr_weights=0.1, lr_bias=2.4e-3, trust_coefficient=0.02)


@dataclass
class RunConfig:
    stage: str = "pretrain_ai"
    strategy: str = "random"
    pretrain: StageConfig = field(default_factory=default_pretrain)
    finetune: StageConfig = field(default_factory=default_finetune)
    D: int = 32
    L: int = 4
    width: int = 64
    depth: int = 2
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    clip_seed: int = 1234
    stub_jitter: float = 0.05
    data_dir: str = "data"
    out_dir: str = "runs"
    checkpoint: str | None = None
    audit: bool = False
    scene: dict = field(default_factory=dict)
    fbank: dict = field(default_factory=dict)
    matrix_rows: list[str] = field(default_factory=lambda: [
        "random", "nearest:0", "nearest:5", "nearest:10", "nearest:15", "multiframe"])

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        try:
            self.pairing()
            for row in self.matrix_rows:
                PairingStrategy.parse(row)
            for st in (self.pretrain, self.finetune):
                st.lars()
                st.schedule()
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc
        for st in (self.pretrain, self.finetune):
            if st.batch_size < 1 or st.epochs < 0:
                raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        for name, build in (("fbank", self.fbank_config), ("scene", self.scene_spec)):
            try:
                build()
            except (TypeError, InvalidInputError) as exc:
                raise ConfigError(f"bad {name} settings: {exc}") from exc
        if self.L < 1 or self.D < 1 or self.width < 1 or self.depth < 0:
            raise ConfigError("L, D, width must be >= 1 and depth >= 0")

    def fbank_config(self) -> FbankConfig:
        """Desk-scale front end with any ``fbank`` overrides applied."""
        return FbankConfig(**{**asdict(desk_fbank_config()), **self.fbank})

    def scene_spec(self, seed: int | None = None) -> SceneSpec:
        scene = dict(self.scene)
        if seed is not None:
            scene["seed"] = seed
        return SceneSpec(**scene)

    def pairing(self) -> PairingStrategy:
        return PairingStrategy.parse(self.strategy)

    def model_hash(self) -> str:
        """Hash of everything that shapes training, excluding paths and stage."""
        d = asdict(self)
        for k in ("stage", "data_dir", "out_dir", "checkpoint", "audit", "matrix_rows", "seeds"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            for key, default in (("pretrain", default_pretrain), ("finetune", default_finetune)):
                if key in d and not isinstance(d[key], StageConfig):
                    base = asdict(default())
                    extra = set(d[key]) - set(base)
                    if extra:
                        raise ConfigError(f"unknown {key} keys: {sorted(extra)}")
                    base.update(d[key])
                    d[key] = StageConfig(**base)
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_dict(raw)
