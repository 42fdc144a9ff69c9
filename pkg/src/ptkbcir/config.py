"""Experiment configuration: one YAML or JSON file, API key from the environment."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .evaluation import DEFAULT_METRICS, MetricConfig
from .reformulation import RetrieverKind, Strategy

API_KEY_ENV = "PTKBCIR_API_KEY"

TABLE_STRATEGIES = ("none", "all", "human", "automatic", "str", "sar")


@dataclass
class Paths:
    topics: str = ""
    qrels: str = ""
    collection: str = ""
    vectors: str | None = None
    train_topics: str | None = None
    train_annotations: str | None = None
    train_qrels: str | None = None
    ptkb_judgments: str | None = None
    cache_dir: str = "cache"
    templates_dir: str | None = None
    output_dir: str = "output"


@dataclass
class RetrieverSettings:
    k1: float = 0.9
    b: float = 0.4
    stemming: bool = True
    depth: int = 1000
    dense_dimension: int | None = None


@dataclass
class GatewaySettings:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-3.5-turbo-16k"
    temperature: float = 0.0
    max_tokens: int = 1024
    retries: int = 4
    backoff: float = 1.0
    parallelism: int = 4
    retry_budget: int = 1
    include_responses: bool = True


@dataclass
class EmbeddingSettings:
    endpoint: str = "https://api.openai.com/v1/embeddings"
    model: str = "text-embedding-3-small"
    batch_size: int = 32
    retries: int = 4
    backoff: float = 1.0
    parallelism: int = 2


@dataclass
class GridSettings:
    strategies: list[str] = field(default_factory=lambda: list(TABLE_STRATEGIES))
    shots: list[int] = field(default_factory=lambda: [0])
    retrievers: list[str] = field(default_factory=lambda: ["sparse", "dense"])
    # reformulate and retrieve only turns that have relevance judgments
    assessed_only: bool = True


@dataclass
class AnnotationSettings:
    metric: str = "ndcg@3"
    retriever: str = "sparse"


@dataclass
class MetricSettings:
    names: list[str] = field(default_factory=lambda: list(DEFAULT_METRICS))
    threshold: int = 1
    subset: bool = True

    def to_metric_config(self) -> MetricConfig:
        return MetricConfig(tuple(self.names), self.threshold)


@dataclass
class ExperimentConfig:
    paths: Paths = field(default_factory=Paths)
    retriever: RetrieverSettings = field(default_factory=RetrieverSettings)
    gateway: GatewaySettings = field(default_factory=GatewaySettings)
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    grid: GridSettings = field(default_factory=GridSettings)
    annotation: AnnotationSettings = field(default_factory=AnnotationSettings)
    metrics: MetricSettings = field(default_factory=MetricSettings)
    seed: int = 42
    base_dir: str = "."

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | Path = ".") -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name == "base_dir" or f.name not in raw:
                continue
            value = raw[f.name]
            factory = f.default_factory
            if isinstance(factory, type) and dataclasses.is_dataclass(factory):
                value = _build(factory, value, f.name)
            kwargs[f.name] = value
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = cls(**kwargs, base_dir=str(Path(base_dir).resolve()))
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML/JSON: {e}") from e
        return cls.from_dict(raw, path.parent)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("base_dir")
        return out

    def check(self) -> None:
        for s in self.grid.strategies:
            try:
                Strategy(s)
            except ValueError:
                raise ConfigError(f"unknown strategy {s!r}; expected one of {[x.value for x in Strategy]}") from None
        for r in [*self.grid.retrievers, self.annotation.retriever]:
            try:
                RetrieverKind(r)
            except ValueError:
                raise ConfigError(f"unknown retriever {r!r}") from None
        if any(k < 0 for k in self.grid.shots):
            raise ConfigError("shots must be >= 0")
        if self.gateway.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.retriever.depth < 1:
            raise ConfigError("depth must be >= 1")
        try:
            self.metrics.to_metric_config()
            MetricConfig((self.annotation.metric,))
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def validate_paths(self) -> None:
        """Every configured input file must exist."""
        required = {"topics": self.paths.topics, "qrels": self.paths.qrels, "collection": self.paths.collection}
        optional = {
            k: getattr(self.paths, k)
            for k in ("vectors", "train_topics", "train_annotations", "train_qrels", "ptkb_judgments", "templates_dir")
        }
        for name, value in required.items():
            if not value:
                raise ConfigError(f"paths.{name} is required")
        for name, value in {**required, **optional}.items():
            if value and not self.resolve(value).exists():
                raise ConfigError(f"paths.{name}: {self.resolve(value)} does not exist")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.paths.output_dir)

    @property
    def cache_dir(self) -> Path:
        return self.resolve(self.paths.cache_dir)

    @property
    def api_key(self) -> str:
        return os.environ.get(API_KEY_ENV, "")

    @property
    def hash(self) -> str:
        """Digest of every setting that shapes outputs (not the API key)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _build(cls, value, name: str):
    if value is None:
        return cls()
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {', '.join(sorted(unknown))}")
    try:
        return cls(**value)
    except TypeError as e:
        raise ConfigError(f"{name}: {e}") from None
