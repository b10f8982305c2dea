"""Run configuration: one JSON parameter tree shared by every command.

Unknown keys are rejected at every level, and missing keys take the
defaults below. A run manifest embeds the fully resolved tree under
``"config"``, and :func:`load_config` accepts either form, so rerunning
from a manifest reproduces the original run.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .generators import FamilySpec, SyntheticDataset
from .pipeline import PipelineConfig, SearchConfig

SCHEMA_VERSION = 1
BASELINE_METHODS = ("BIM", "MIM", "PGD", "DI2", "CMUA")


class ConfigError(ValueError):
    pass


def _check_keys(d, cls, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}; allowed: {sorted(allowed)}")


def _typed(value, kind, where):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


@dataclass
class DatasetConfig:
    """Where images come from and which index ranges play which role.

    ``source`` is ``"synthetic"`` or ``"directory"``; in the latter case
    images are the sorted PNG/PPM files of ``directory``. Training, scoring
    (step-size search) and evaluation ranges should not overlap.
    """

    source: str = "synthetic"
    directory: str = None
    count: int = 4096
    train_start: int = 0
    train_count: int = 32
    score_start: int = 1000
    score_count: int = 128
    eval_start: int = 2000
    eval_count: int = 128

    def validate(self):
        if self.source not in ("synthetic", "directory"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'directory', got {self.source!r}")
        if self.source == "directory" and not self.directory:
            raise ConfigError("dataset.directory is required when source is 'directory'")
        for name in ("train", "score", "eval"):
            start, count = getattr(self, f"{name}_start"), getattr(self, f"{name}_count")
            if start < 0 or count < 1:
                raise ConfigError(f"dataset.{name}_start must be >= 0 and {name}_count >= 1")
            if self.source == "synthetic" and start + count > self.count:
                raise ConfigError(f"dataset.{name} range [{start}, {start + count}) exceeds count {self.count}")
        return self


@dataclass
class MetricConfig:
    frd: bool = True
    feature_dim: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    method: str = "CMUA"
    family: FamilySpec = field(default_factory=FamilySpec.default)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    two_phase: bool = False
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def validate(self):
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be a non-negative 64-bit integer")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.method not in BASELINE_METHODS:
            raise ConfigError(f"method must be one of {BASELINE_METHODS}, got {self.method!r}")
        if not self.family.models:
            raise ConfigError("family needs at least one model")
        try:
            for spec in self.family.models:
                spec.validate()
            self.pipeline.validate(len(self.family.models))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.dataset.validate()
        if self.search.budget < 1:
            raise ConfigError("search.budget must be >= 1")
        if not self.search.space_low < self.search.space_high:
            raise ConfigError("search.space_low must be < search.space_high")
        if self.dataset.train_count % self.pipeline.batch_size:
            raise ConfigError(
                f"dataset.train_count {self.dataset.train_count} is not a multiple of "
                f"pipeline.batch_size {self.pipeline.batch_size}"
            )
        search_count = self.dataset.train_count if self.search.train_count is None else self.search.train_count
        if self.search.train_count is not None and not 1 <= search_count <= self.dataset.train_count:
            raise ConfigError(
                f"search.train_count must lie in [1, dataset.train_count={self.dataset.train_count}], "
                f"got {search_count}"
            )
        if (self.two_phase or self.method == "CMUA") and search_count % self.search.batch_size:
            raise ConfigError(
                f"search train count {search_count} is not a multiple of "
                f"search.batch_size {self.search.batch_size}"
            )
        if self.metrics.feature_dim < 1:
            raise ConfigError("metrics.feature_dim must be >= 1")
        return self

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "threads": self.threads,
            "method": self.method,
            "family": self.family.to_dict(),
            "dataset": asdict(self.dataset),
            "pipeline": self.pipeline.to_dict(),
            "search": self.search.to_dict(),
            "two_phase": self.two_phase,
            "metrics": asdict(self.metrics),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        _check_keys(d, cls, "config")
        cfg = cls()
        for key in ("seed", "threads"):
            if key in d:
                setattr(cfg, key, _typed(d[key], int, key))
        if "method" in d:
            cfg.method = _typed(d["method"], str, "method").upper()
        if "two_phase" in d:
            cfg.two_phase = _typed(d["two_phase"], bool, "two_phase")
        try:
            if "family" in d:
                cfg.family = FamilySpec.from_dict(d["family"])
            if "pipeline" in d:
                cfg.pipeline = PipelineConfig.from_dict(d["pipeline"])
            if "search" in d:
                cfg.search = SearchConfig.from_dict(d["search"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for key, sub in (("dataset", DatasetConfig), ("metrics", MetricConfig)):
            if key in d:
                _check_keys(d[key], sub, key)
                kinds = {f.name: f.type for f in fields(sub)}
                values = {}
                for k, v in d[key].items():
                    kind = {"int": int, "str": str, "bool": bool, "float": float}.get(
                        getattr(kinds[k], "__name__", kinds[k]), None)
                    values[k] = v if v is None else _typed(v, kind, f"{key}.{k}")
                setattr(cfg, key, sub(**values))
        return cfg.validate()


def load_config(path):
    """Read a config file or a run manifest (whose ``"config"`` entry is used)."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if isinstance(doc, dict) and "config" in doc and "watermark" in doc:
        doc = doc["config"]
    return RunConfig.from_dict(doc)


def synthetic_dataset(cfg):
    return SyntheticDataset(seed=cfg.seed, count=cfg.dataset.count, image_shape=tuple(cfg.family.image_shape))
