"""Run configuration: a validated, typed view of an experiment JSON file.

Every run names its experiment, all four seeds, and its inputs explicitly;
nothing falls back to wall-clock or global RNG state, which is what makes
output files reproducible byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

from ..errors import InvalidInputError
from ..gaussbench import BenchmarkSpec
from ..metalearn import AdaptationMethod, MamlConfig
from ..nnet import MlpConfig

__all__ = [
    "EXPERIMENTS",
    "SeedSet",
    "TaskShape",
    "UslConfig",
    "RunConfig",
    "ConfigError",
    "load_config",
]

EXPERIMENTS = (
    "div_sweep",
    "train",
    "eval_matrix",
    "repsim",
    "pathology",
    "correlate",
    "histogram",
)


class ConfigError(InvalidInputError):
    """Malformed or inconsistent run configuration (a usage error)."""


@dataclass(frozen=True)
class SeedSet:
    """The four independent top-level seeds every run must state."""

    benchmark: int
    train: int
    eval: int
    probe: int

    @classmethod
    def from_dict(cls, d) -> "SeedSet":
        required = {"benchmark", "train", "eval", "probe"}
        if not isinstance(d, dict) or set(d) != required:
            raise ConfigError(f"seeds must name exactly {sorted(required)}, got {d!r}")
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class TaskShape:
    n_way: int = 5
    k_support: int = 10
    k_query: int = 15


@dataclass(frozen=True)
class UslConfig:
    epochs: int = 100
    batch_size: int = 100
    eval_interval: int = 5
    n_val_tasks: int = 100
    outer_lr: float = 1e-3


def _sub(d, cls, name):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{name} must be an object")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


def _adaptation(d, name) -> AdaptationMethod:
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError(f"{name} must be an object with a 'kind'")
    try:
        return AdaptationMethod(**d)
    except (TypeError, InvalidInputError) as exc:
        raise ConfigError(f"bad {name}: {exc}") from exc


_KNOWN_KEYS = {
    "experiment",
    "out_dir",
    "seeds",
    "benchmarks",
    "model",
    "task",
    "maml",
    "usl",
    "n_tasks",
    "n_pairs",
    "n_mc",
    "n_workers",
    "train_methods",
    "checkpoints",
    "train_inline",
    "adapt_a",
    "adapt_b",
    "repsim_n_tasks",
    "repsim_k_query",
    "pathology_dims",
    "pathology_n_points",
    "pathology_n_seeds",
    "hist_bins",
    "dump_embeddings",
    "sweep_csv",
    "plots",
}


@dataclass(frozen=True)
class RunConfig:
    """One experiment run, fully specified.

    Defaults mirror the full-scale setup (1 -> 128 -> 128 -> 5 network,
    5-way 10-shot tasks, 100k Hellinger pairs); CI presets override budgets
    only, never semantics.
    """

    experiment: str
    seeds: SeedSet
    benchmarks: tuple = ()
    model: MlpConfig = field(
        default_factory=lambda: MlpConfig(input_size=1, hidden_sizes=(128, 128), output_size=5)
    )
    task: TaskShape = field(default_factory=TaskShape)
    maml: MamlConfig = field(default_factory=MamlConfig)
    usl: UslConfig = field(default_factory=UslConfig)
    n_tasks: int = 100
    n_pairs: int = 100000
    n_mc: int = 5
    n_workers: int | None = None
    train_methods: tuple = ("maml", "usl")
    checkpoints: dict = field(default_factory=dict)
    train_inline: bool = False
    adapt_a: AdaptationMethod | None = None
    adapt_b: AdaptationMethod | None = None
    repsim_n_tasks: int = 20
    repsim_k_query: int = 256
    pathology_dims: tuple = (10, 16, 32, 64, 100)
    pathology_n_points: tuple = (32, 100, 300, 320, 1000)
    pathology_n_seeds: int = 10
    hist_bins: int = 20
    dump_embeddings: bool = False
    sweep_csv: str | None = None
    out_dir: str | None = None
    plots: bool = True

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}"
            )
        if self.experiment == "correlate":
            if not self.sweep_csv:
                raise ConfigError("correlate needs a 'sweep_csv' path")
        elif self.experiment != "pathology" and not self.benchmarks:
            raise ConfigError(f"{self.experiment} needs at least one benchmark spec")
        for m in self.train_methods:
            if m not in ("maml", "usl"):
                raise ConfigError(f"unknown training method {m!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(raw) - _KNOWN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in raw:
            raise ConfigError("config must name its 'experiment'")
        if "seeds" not in raw:
            raise ConfigError("config must state all seeds explicitly")
        kwargs = dict(raw)
        kwargs["seeds"] = SeedSet.from_dict(raw["seeds"])
        specs = []
        for i, entry in enumerate(raw.get("benchmarks", ())):
            if not (isinstance(entry, (list, tuple)) and len(entry) == 4):
                raise ConfigError(f"benchmarks[{i}] must be [mu_m, sigma_m, mu_s, sigma_s]")
            specs.append(BenchmarkSpec(*(float(v) for v in entry)))
        kwargs["benchmarks"] = tuple(specs)
        if "model" in raw:
            kwargs["model"] = _sub(
                {**raw["model"], "hidden_sizes": tuple(raw["model"].get("hidden_sizes", ()))}
                if isinstance(raw["model"], dict)
                else raw["model"],
                MlpConfig,
                "model",
            )
        kwargs["task"] = _sub(raw.get("task"), TaskShape, "task")
        kwargs["maml"] = _sub(raw.get("maml"), MamlConfig, "maml")
        kwargs["usl"] = _sub(raw.get("usl"), UslConfig, "usl")
        if "adapt_a" in raw:
            kwargs["adapt_a"] = _adaptation(raw["adapt_a"], "adapt_a")
        if "adapt_b" in raw:
            kwargs["adapt_b"] = _adaptation(raw["adapt_b"], "adapt_b")
        for key in ("train_methods", "pathology_dims", "pathology_n_points"):
            if key in raw:
                kwargs[key] = tuple(raw[key])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc

    def echo(self) -> dict:
        """JSON-serializable copy of the full effective configuration."""
        d = asdict(self)
        d["benchmarks"] = [list(s.as_tuple()) for s in self.benchmarks]
        return d


def load_config(path) -> RunConfig:
    """Parse and validate a JSON config file; any problem is a ConfigError."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)
