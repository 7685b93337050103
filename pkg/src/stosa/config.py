"""Run configuration: one flat record shared by training, evaluation and the CLI."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .model import ModelConfig, STOSA
from .wasserstein import SOFTMAX

# hyperparameter search ranges; values outside need allow_deviation
SEARCH_RANGES = {
    "d": (64, 128),
    "n": (50, 100),
    "n_layers": (1, 2, 3),
    "n_heads": (1, 2, 4),
    "dropout": (0.3, 0.5, 0.7),
    "lr": (1e-3, 1e-4),
    "beta": (1e-1, 1e-2, 1e-3),
}

RNG_STREAMS = {"init": 0, "shuffle": 1, "negatives": 2, "dropout": 3}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    manifest: str = ""
    variant: str = STOSA
    d: int = 64
    n: int = 50
    n_layers: int = 1
    n_heads: int = 1
    dropout: float = 0.3
    attention_dropout: bool = True
    attention_residual: bool = True
    normalization: str = SOFTMAX
    lr: float = 1e-3
    beta: float = 1e-3
    lam: float = 0.1
    batch_size: int = 256
    seed: int = 0
    patience: int = 50
    max_epochs: int = 500
    eval_ns: list = field(default_factory=lambda: [1, 5])
    rank_all: bool = False
    dtype: str = "float32"
    allow_deviation: bool = False

    def __post_init__(self):
        if self.d % 2:
            raise ConfigError("d must be even (split between mean and covariance)")
        self.eval_ns = [int(x) for x in self.eval_ns]
        self.model_config()  # validates structural fields

    def model_config(self):
        try:
            return ModelConfig(variant=self.variant, d=self.d, n=self.n, n_layers=self.n_layers,
                               n_heads=self.n_heads, dropout=self.dropout,
                               normalization=self.normalization,
                               attention_dropout=self.attention_dropout,
                               attention_residual=self.attention_residual)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def check_ranges(self):
        """Reject values outside the searched ranges unless ``allow_deviation`` is set."""
        if self.allow_deviation:
            return
        bad = [f"{k}={getattr(self, k)!r} not in {allowed}"
               for k, allowed in SEARCH_RANGES.items()
               if not any(np.isclose(getattr(self, k), a) for a in allowed)]
        if bad:
            raise ConfigError("; ".join(bad) + " (pass allow_deviation to override)")

    def rng(self, stream):
        """Independent generator for a named randomness stream."""
        seq = np.random.SeedSequence(self.seed, spawn_key=(RNG_STREAMS[stream],))
        return np.random.default_rng(seq)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a flat JSON object")
        return cls.from_dict(data)

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return RunConfig.from_dict(data)
