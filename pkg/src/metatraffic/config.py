"""Run configuration: nested dataclasses, JSON round trip and dotted-key overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .losses import LossWeights


@dataclass
class ModelConfig:
    T: int = 12
    T_out: int = 12
    hidden: int = 32
    memory_items: int = 20
    embed_dim: int = 64
    tau: float = 0.5
    use_memory: bool = True
    hard_graph: bool = False  # sample hard graphs while training too


@dataclass
class TaskConfig:
    periods: tuple[int, ...] = (1, 7, 30)
    enable_mpe: bool = True
    enable_pe: bool = True
    finetune_pe: bool = True  # daily code on fine-tune / evaluation inputs
    finetune_mpe: bool = False  # also add the meta code on the target


@dataclass
class TrainConfig:
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    inner_steps: int = 1
    batch_size: int = 66  # nearest multiple of 6 to 64
    max_epochs: int = 100
    finetune_lr: float = 0.001
    finetune_epochs: int = 100
    finetune_batch_size: int = 64
    eval_seed: int = 0


@dataclass
class DataConfig:
    samples_per_hour: int = 12
    stride: int = 1  # source window stride
    finetune_stride: int = 1
    eval_stride: int = 1
    finetune_days: int = 7


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    tasks: TaskConfig = field(default_factory=TaskConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        t = self.train
        for name in ("inner_lr", "outer_lr", "finetune_lr"):
            if not getattr(t, name) > 0:
                raise ValueError(f"train.{name} must be positive")
        n_parts = len(self.tasks.periods)
        if not 1 <= n_parts <= 3:
            raise ValueError("tasks.periods must list 1 to 3 periods")
        if t.batch_size % (2 * n_parts) or t.batch_size <= 0:
            raise ValueError(f"train.batch_size {t.batch_size} must be a multiple of {2 * n_parts}")
        if t.finetune_batch_size <= 0:
            raise ValueError("train.finetune_batch_size must be positive")
        if self.model.memory_items < 2:
            raise ValueError("model.memory_items must be >= 2")
        if not self.model.tau > 0:
            raise ValueError("model.tau must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tasks"]["periods"] = list(self.tasks.periods)
        d["loss"]["lambda"] = d["loss"].pop("margin")
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        d = json.loads(json.dumps(d))
        loss = d.get("loss", {})
        if "lambda" in loss:
            loss["margin"] = loss.pop("lambda")
        tasks = d.get("tasks", {})
        if "periods" in tasks:
            tasks["periods"] = tuple(int(v) for v in tasks["periods"])
        sections = {f.name: f.default_factory for f in dataclasses.fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise KeyError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            sub_cls = sections[f.name]
            values = d.get(f.name, {})
            allowed = {sf.name for sf in dataclasses.fields(sub_cls)}
            bad = set(values) - allowed
            if bad:
                raise KeyError(f"unknown key(s) in {f.name}: {sorted(bad)}")
            kwargs[f.name] = sub_cls(**values)
        return cls(**kwargs)

    def replace(self, **dotted: Any) -> "Config":
        """Copy with ``section.key`` overrides (``__`` accepted in place of the dot)."""
        d = self.to_dict()
        for key, value in dotted.items():
            section, _, name = key.replace("__", ".").partition(".")
            if section not in d or name not in d[section]:
                raise KeyError(f"unknown config key {key!r}")
            d[section][name] = list(value) if isinstance(value, tuple) else value
        return Config.from_dict(d)


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    return Config.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def parse_value(raw: str, current: Any) -> Any:
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, (list, tuple)):
        raw = raw.strip()
        items = json.loads(raw) if raw.startswith("[") else [v for v in raw.split(",") if v]
        return [int(v) for v in items]
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def apply_overrides(cfg: Config, pairs: list[tuple[str, str]]) -> Config:
    d = cfg.to_dict()
    updates = {}
    for key, raw in pairs:
        section, _, name = key.partition(".")
        if section not in d or name not in d[section]:
            raise KeyError(f"unknown config key {key!r}")
        updates[key] = parse_value(raw, d[section][name])
    return cfg.replace(**updates) if updates else cfg


def desk_config(**overrides: Any) -> Config:
    """Small CPU configuration used by the acceptance experiments."""
    cfg = Config(
        model=ModelConfig(T=12, T_out=6, hidden=16, memory_items=8, embed_dim=16, tau=0.5),
        train=TrainConfig(
            inner_lr=0.01,
            outer_lr=0.05,
            inner_steps=1,
            batch_size=24,
            max_epochs=20,
            finetune_lr=0.005,
            finetune_epochs=5,
            finetune_batch_size=24,
        ),
        data=DataConfig(samples_per_hour=6, stride=24, finetune_stride=3, eval_stride=3, finetune_days=7),
    )
    return cfg.replace(**overrides) if overrides else cfg
