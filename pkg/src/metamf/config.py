"""Run configuration: one YAML file, every field defaulted, flags override."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .dataset import SplitConfig
from .exceptions import MetaMFError
from .fedruntime import TrainConfig
from .metanet import DEFAULT_MEMORY_BUDGET, ModelDims


class ConfigError(MetaMFError, ValueError):
    pass


@dataclass
class DatasetSection:
    path: str | None = None
    sep: str | None = None
    skip_header: bool = False


@dataclass
class SplitSection:
    train_frac: float = 0.8
    valid_frac: float = 0.1
    test_frac: float = 0.1
    min_ratings: int = 3


@dataclass
class ModelSection:
    user_dim: int = 32
    item_dim: int = 32
    memory_dim: int = 128
    rank: int = 8
    hidden_dim: int = 512
    layer_sizes: list = field(default_factory=lambda: [8, 1])
    memory_budget: int = DEFAULT_MEMORY_BUDGET


@dataclass
class TrainSection:
    users_per_round: int = 64
    ratings_per_user: int = 32
    learning_rate: float = 1e-4
    reg_lambda: float = 1e-3
    max_rounds: int = 20000
    patience: int = 10
    eval_every: int = 50
    variant: str = "full"
    n_workers: int = 1


SECTIONS = {"dataset": DatasetSection, "split": SplitSection, "model": ModelSection, "train": TrainSection}


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    split: SplitSection = field(default_factory=SplitSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    seed: int = 0
    output_dir: str = "runs/metamf"

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        unknown = set(data) - set(SECTIONS) - {"seed", "output_dir"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, section in SECTIONS.items():
            values = data.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in fields(section)}
            bad = set(values) - allowed
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = section(**values)
        kwargs["seed"] = int(data.get("seed", 0))
        kwargs["output_dir"] = str(data.get("output_dir", "runs/metamf"))
        cfg = cls(**kwargs)
        cfg.model.layer_sizes = [int(x) for x in cfg.model.layer_sizes]
        cfg.train.variant = str(cfg.train.variant).lower()
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def with_overrides(self, **overrides) -> "RunConfig":
        """Apply flag values; ``None`` means the flag was not given."""
        d = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            section, _, name = key.rpartition(".")
            (d[section] if section else d)[name] = value
        return RunConfig.from_dict(d)

    def validate(self) -> None:
        try:
            self.split_config()
            self.train_config()
            ModelDims(num_users=1, num_items=1, **self._model_kwargs())
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def _model_kwargs(self) -> dict:
        m = self.model
        return dict(user_dim=m.user_dim, item_dim=m.item_dim, memory_dim=m.memory_dim, rank=m.rank,
                    hidden_dim=m.hidden_dim, layer_sizes=tuple(m.layer_sizes),
                    variant=self.train.variant, memory_budget=m.memory_budget)

    def split_config(self) -> SplitConfig:
        s = self.split
        return SplitConfig(s.train_frac, s.valid_frac, s.test_frac, seed=self.seed, min_ratings=s.min_ratings)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **dataclasses.asdict(self.train))

    def model_dims(self, num_users: int, num_items: int) -> ModelDims:
        return ModelDims(num_users=num_users, num_items=num_items, **self._model_kwargs())
