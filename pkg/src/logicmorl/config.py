"""Run configuration: a JSON document in which every key has a default."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .agent import AgentConfig
from .errors import ConfigError
from .gridworld import OBJECTIVE_COUNTS, SIZES

DEFAULT_BUDGETS = {"small": 200_000, "medium": 500_000, "large": 500_000}


@dataclass
class RunConfig:
    size: str = "small"
    n_objectives: int = 2
    world_seed: int = 0
    slip_prob: float = 0.1

    specset_count: int = 12_500
    specset_split: float = 0.8
    specset_seed: int = 0
    specset_max_atoms: int = 5
    specset_dir: str | None = None      # read train.txt/test.txt from here instead of generating

    curriculum: bool = True
    base_length: int = 25
    increment_every: int = 5_000
    total_increments: int = 20

    linear: bool = False
    dirichlet_alpha: float = 1.0
    fixed_spec: str | None = None       # train on this one specification only

    total_steps: int | None = None      # None picks the per-size default
    eval_every: int = 5_000
    eval_panel: int = 100
    eval_specs: list[str] | None = None  # explicit panel; weight vectors in linear mode
    stop_score: float | None = None     # end early once the panel mean reaches this
    log_every: int = 1_000
    checkpoint_every: int = 25_000
    checkpoint_steps: list[int] = field(default_factory=lambda: [100_000])
    seed: int = 0

    agent: AgentConfig = field(default_factory=AgentConfig)

    def __post_init__(self):
        if isinstance(self.agent, dict):
            self.agent = AgentConfig.from_dict(self.agent)
        self.validate()

    @property
    def budget(self) -> int:
        return DEFAULT_BUDGETS[self.size] if self.total_steps is None else self.total_steps

    def validate(self) -> None:
        if self.size not in SIZES:
            raise ConfigError(f"size must be one of {sorted(SIZES)}")
        if self.n_objectives not in OBJECTIVE_COUNTS:
            raise ConfigError(f"n_objectives must be one of {OBJECTIVE_COUNTS}")
        if not 0.0 < self.specset_split < 1.0:
            raise ConfigError("specset_split must lie in (0, 1)")
        if self.specset_count < 1:
            raise ConfigError("specset_count must be positive")
        for key in ("increment_every", "total_increments", "eval_every", "log_every",
                    "checkpoint_every", "eval_panel"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.total_steps is not None and self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        a = self.agent
        if a.train_every < 1 or a.batch_size < 1 or a.specs_per_batch < 1 or a.target_sync_every < 1:
            raise ConfigError("agent intervals and batch sizes must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(data)
