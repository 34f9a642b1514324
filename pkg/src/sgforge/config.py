"""Pipeline configuration loaded from a TOML file."""

from __future__ import annotations

import dataclasses
import hashlib
import importlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .llm import ChatClient, MockFixtureStore
from .rooms import DEFAULT_LABELS, TypicalLabels


class ConfigError(ValueError):
    pass


@dataclass
class ClientConfig:
    backend: str = "mock"
    model_name: str = "mock"
    endpoint: str | None = None
    temperature: float = 0.1
    max_retries: int = 3
    timeout: float = 30.0
    backoff: float = 0.5
    max_concurrency: int = 4
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    fixtures: str | None = None
    strict: bool = True
    default_response: str = ""
    audit_path: str | None = None
    responder: str | None = None

    def resolve_responder(self):
        """Import a ``module:function`` responder for the mock backend."""
        if not self.responder:
            return None
        mod, _, name = self.responder.partition(":")
        try:
            return getattr(importlib.import_module(mod), name)
        except (ImportError, AttributeError, ValueError) as exc:
            raise ConfigError(f"cannot import responder {self.responder!r}: {exc}") from exc

    def make_client(self, base: Path | None = None, **overrides) -> ChatClient:
        store = None
        if self.backend == "mock" and self.fixtures:
            p = Path(self.fixtures)
            if base is not None and not p.is_absolute():
                p = base / p
            store = MockFixtureStore.load(p, strict=self.strict, default=self.default_response)
        elif self.backend == "mock":
            store = MockFixtureStore(strict=self.strict, default=self.default_response)
        audit = self.audit_path
        if audit and base is not None and not Path(audit).is_absolute():
            audit = str(base / audit)
        kwargs = dict(backend=self.backend, model_name=self.model_name, endpoint=self.endpoint,
                      temperature=self.temperature, max_retries=self.max_retries,
                      timeout=self.timeout, backoff=self.backoff,
                      max_concurrency=self.max_concurrency, auth_header=self.auth_header,
                      auth_scheme=self.auth_scheme, fixtures=store, audit_path=audit,
                      responder=self.resolve_responder())
        kwargs.update(overrides)
        return ChatClient(**kwargs)


@dataclass
class PipelineConfig:
    voxel_size: float = 0.05
    truncation: float = 0.15
    agent_height: float = 1.0
    slice_height: float | None = None
    min_points: int = 50
    association_threshold: float = 0.55
    w_geometric: float = 0.5
    w_semantic: float = 0.5
    background_classes: list[str] = field(default_factory=lambda: ["wall", "floor", "ceiling"])
    typical_labels: list[str] = field(default_factory=lambda: list(DEFAULT_LABELS))
    poll_rounds: int = 10
    persistence_min: float = 0.3
    floor_gap: float = 1.5
    captioning: bool = True
    floors: bool = True
    max_captions_per_node: int = 3
    templates_dir: str | None = None
    query_char_budget: int = 6000
    client: ClientConfig = field(default_factory=ClientConfig)

    def __post_init__(self):
        if isinstance(self.client, dict):
            self.client = ClientConfig(**self.client)
        self.validate()

    def validate(self) -> None:
        for name in ("voxel_size", "truncation", "agent_height", "persistence_min", "floor_gap"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.slice_height is not None and self.slice_height <= 0:
            raise ConfigError("slice_height must be positive")
        if self.w_geometric < 0 or self.w_semantic < 0 \
                or abs(self.w_geometric + self.w_semantic - 1.0) > 1e-9:
            raise ConfigError("similarity weights must be non-negative and sum to 1")
        if not 0 < self.association_threshold < 1:
            raise ConfigError("association_threshold must be in (0, 1)")
        if self.poll_rounds < 1 or self.min_points < 1 or self.max_captions_per_node < 0:
            raise ConfigError("poll_rounds and min_points must be >= 1")
        try:
            TypicalLabels(tuple(self.typical_labels))
        except ValueError as exc:
            raise ConfigError(f"typical_labels: {exc}") from exc

    @property
    def labels(self) -> TypicalLabels:
        return TypicalLabels(tuple(self.typical_labels))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        data = self.to_dict()
        for k in ("audit_path", "fixtures", "responder", "strict"):
            data["client"].pop(k, None)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_toml(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = tomli.loads(path.read_text(encoding="utf-8"))
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        client = data.pop("client", {})
        cknown = {f.name for f in dataclasses.fields(ClientConfig)}
        if set(client) - cknown:
            raise ConfigError(f"unknown client keys: {sorted(set(client) - cknown)}")
        try:
            return cls(client=ClientConfig(**client), **data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
