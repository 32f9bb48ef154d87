"""Training configuration with JSON round-tripping and dotted-key overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data.world import ToyWorldSpec
from .errors import ConfigError
from .objectives import AblationFlags, CptSchedule, LossWeights
from .optim import WarmupSchedule
from .transformer import TransformerConfig

MODES = ("unsupervised", "real-pivot", "supervised")


@dataclass
class TrainConfig:
    seed: int = 0
    mode: str = "unsupervised"
    overlap: float = 0.0
    low_resource: int | None = None
    ablation: str = "Full"
    model: TransformerConfig = field(default_factory=lambda: TransformerConfig(layers=1, heads=4, model_dim=32, ffn_dim=64))
    world: ToyWorldSpec = field(default_factory=ToyWorldSpec)
    world_sizes: dict = field(default_factory=lambda: {"train": 1000, "valid": 200, "test": 100})
    weights: LossWeights = field(default_factory=LossWeights)
    cpt_schedule: CptSchedule = field(default_factory=CptSchedule)
    lambda_v: float = 1.0
    image_dropout: float = 0.7
    margin: float = 0.1
    optimizer: WarmupSchedule = field(default_factory=lambda: WarmupSchedule(1e-5, 3e-3, 20))
    clip_norm: float | None = 5.0
    batch_tokens: int = 256
    epochs: int = 18
    mass_epochs: int = 30
    mass_fraction: float = 0.5
    caption_epochs: int = 60
    pretrain_optimizer: WarmupSchedule = field(default_factory=lambda: WarmupSchedule(1e-5, 2e-3, 50))
    select_with_images: bool = True
    vocab_mode: str = "word"
    bpe_merges: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "unsupervised" and self.overlap > 0:
            raise ConfigError("image overlap requires the real-pivot mode")
        if self.lambda_v < 0:
            raise ConfigError("lambda_v must be nonnegative")
        if not 0.0 <= self.image_dropout < 1.0:
            raise ConfigError("image_dropout must lie in [0, 1)")
        if self.margin <= 0:
            raise ConfigError("VSE margin must be positive")
        if self.batch_tokens <= 0 or self.epochs < 0:
            raise ConfigError("batch_tokens must be positive and epochs nonnegative")
        AblationFlags.parse(self.ablation)

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags.parse(self.ablation)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def override(self, **updates) -> "TrainConfig":
        """Copy with dotted keys replaced, e.g. ``override(**{"model.model_dim": 16})``."""
        d = self.to_dict()
        for key, val in updates.items():
            node = d
            *path, last = key.split(".")
            for p in path:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if last not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[last] = val
        return TrainConfig.from_dict(d)


_TUPLE_FIELDS = {"colors", "classes", "actions", "counts", "relations", "languages"}
_NESTED = {"model": TransformerConfig, "world": ToyWorldSpec, "weights": LossWeights,
           "cpt_schedule": CptSchedule, "optimizer": WarmupSchedule, "pretrain_optimizer": WarmupSchedule}


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"expected an object for {cls.__name__}")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, val in d.items():
        target = _NESTED.get(name) if cls is TrainConfig else None
        if target is not None and isinstance(val, dict):
            kwargs[name] = _build(target, val)
        elif isinstance(val, list) and name in _TUPLE_FIELDS:
            kwargs[name] = tuple(val)
        else:
            kwargs[name] = val
    return cls(**kwargs)
