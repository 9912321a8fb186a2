"""Declarative experiment configuration.

Config files are TOML: one table per section, ``key = value`` pairs inside.
Unknown sections or keys are rejected so typos fail loudly.

    kind = "cross_silo"
    seeds = [0, 1, 2]

    [dataset]
    num_domains = 5
    discrepancy_level = 1.0

    [federation]
    strategies = ["fedd3a", "feddf"]
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import tomli
import tomli_w

KINDS = ("cross_silo", "cross_device", "heterogeneous", "ablation", "probe_domains", "probe_overlap", "comm")
STRATEGIES = ("fedavg", "fedprox", "feddf", "fedd3a")
WEIGHTINGS = ("soft", "onehot", "random", "avg", "ceiling")
SERVER_STYLES = ("domain", "blend", "client1")


class ConfigError(ValueError):
    """Schema violation; the message carries the offending field path."""


@dataclass
class DatasetConfig:
    num_domains: int = 5
    server_domain: int = 0
    num_classes: int = 10
    input_dim: int = 32
    latent_dim: int = 4
    discrepancy_level: float = 1.0
    shift_scale: float = 1.0
    class_sep: float = 2.0
    noise_std: float = 0.5
    label_flip_prob: float = 0.0
    client_n: int = 400
    server_n: int = 1000
    test_n: int = 300
    # "domain": draw from the server domain's own transform.
    # "blend": each server sample takes a client domain's style seen through
    #          the server domain's transform applied at server_discrepancy.
    # "client1": server data comes from the first client's domain.
    server_style: str = "blend"
    server_discrepancy: float = 0.3
    client_domains: list = field(default_factory=list)  # empty: every non-server domain
    clients_per_domain: int = 1
    beta: float = 1.0
    partition: str = "silo"  # "silo" or "dirichlet"


@dataclass
class ModelConfig:
    hidden_dims: list = field(default_factory=lambda: [64, 32])
    # Per-domain hidden widths for heterogeneous runs; entry i is used by the
    # clients of the i-th client domain (cycled).
    client_hidden_dims: list = field(default_factory=list)
    lambda_kd: float = 1.0
    kl_direction: str = "student_teacher"


@dataclass
class FederationConfig:
    strategies: list = field(default_factory=lambda: ["fedd3a", "feddf", "fedavg", "fedprox"])
    weighting: str = "soft"
    clients_per_round: int = 0  # 0 means every client
    global_rounds: int = 30
    local_epochs: int = 1
    distill_epochs: int = 1
    lambda_weights: list = field(default_factory=list)
    affinity_backbone: str = "broadcast"  # or "student"


@dataclass
class OptimConfig:
    lr0: float = 0.01
    lr_min: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 64
    mu: float = 0.1


@dataclass
class SubspaceConfig:
    ridge_alpha: float = 1e-2
    accumulation: str = "sample"
    batch_size: int = 32
    projection_variant: str = "scaled"


@dataclass
class ExperimentConfig:
    kind: str = "cross_silo"
    name: str = ""
    seeds: list = field(default_factory=lambda: [0])
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    subspace: SubspaceConfig = field(default_factory=SubspaceConfig)

    def validate(self) -> "ExperimentConfig":
        _choice("kind", self.kind, KINDS)
        if not self.seeds:
            raise ConfigError("seeds: must be non-empty")
        d = self.dataset
        _choice("dataset.server_style", d.server_style, SERVER_STYLES)
        _choice("dataset.partition", d.partition, ("silo", "dirichlet"))
        if d.num_domains < 2:
            raise ConfigError("dataset.num_domains: need a server domain and at least one client domain")
        if not 0 <= d.server_domain < d.num_domains:
            raise ConfigError("dataset.server_domain: out of range")
        if not 0 <= d.label_flip_prob < 0.5:
            raise ConfigError("dataset.label_flip_prob: must lie in [0, 0.5)")
        if d.beta <= 0:
            raise ConfigError("dataset.beta: must be positive")
        if d.server_domain in d.client_domains and d.server_style != "client1":
            raise ConfigError("dataset.client_domains: the server domain cannot also be a client domain")
        if any(not 0 <= c < d.num_domains for c in d.client_domains):
            raise ConfigError("dataset.client_domains: out of range")
        if d.clients_per_domain < 1:
            raise ConfigError("dataset.clients_per_domain: must be >= 1")
        for s in self.federation.strategies:
            _choice("federation.strategies", s, STRATEGIES)
        _choice("federation.weighting", self.federation.weighting, WEIGHTINGS)
        _choice("federation.affinity_backbone", self.federation.affinity_backbone, ("broadcast", "student"))
        _choice("model.kl_direction", self.model.kl_direction, ("student_teacher", "teacher_student"))
        _choice("subspace.accumulation", self.subspace.accumulation, ("sample", "batch_mean"))
        _choice("subspace.projection_variant", self.subspace.projection_variant, ("scaled", "paper_literal"))
        if self.subspace.ridge_alpha <= 0:
            raise ConfigError("subspace.ridge_alpha: must be positive")
        if not self.model.hidden_dims:
            raise ConfigError("model.hidden_dims: must be non-empty")
        lw = self.federation.lambda_weights
        if lw and (min(lw) < 0 or abs(sum(lw) - 1.0) > 1e-9):
            raise ConfigError("federation.lambda_weights: must be non-negative and sum to 1")
        return self

    @property
    def num_clients(self) -> int:
        d = self.dataset
        return (len(d.client_domains) or d.num_domains - 1) * d.clients_per_domain


def _choice(path: str, value, allowed) -> None:
    if value not in allowed:
        raise ConfigError(f"{path}: {value!r} is not one of {list(allowed)}")


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "federation": FederationConfig,
    "optim": OptimConfig,
    "subspace": SubspaceConfig,
}


def _coerce(path: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    return value


def _build_section(name: str, cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected a table")
    obj = cls()
    known = {f.name for f in fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
        setattr(obj, key, _coerce(f"{name}.{key}", value, getattr(obj, key)))
    return obj


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in data.items():
        if key in _SECTIONS:
            setattr(cfg, key, _build_section(key, _SECTIONS[key], value))
        elif key in ("kind", "name", "seeds"):
            setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
        else:
            raise ConfigError(f"{key}: unknown key")
    return cfg.validate()


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def loads_config(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"<file>: {exc}") from None
    return config_from_dict(data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        return loads_config(path.read_text(encoding="utf-8"))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dumps_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def _digest(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the parsed config; blind to key order, comments and seeds."""
    d = config_to_dict(cfg)
    d.pop("seeds")
    return _digest(d)


def lineage_hash(cfg: ExperimentConfig) -> str:
    """Like :func:`config_hash` but ignoring which strategy arms are run."""
    d = config_to_dict(cfg)
    d.pop("seeds")
    d["federation"].pop("strategies")
    d["federation"].pop("weighting")
    return _digest(d)


def section_hashes(cfg: ExperimentConfig) -> dict:
    d = config_to_dict(cfg)
    return {k: _digest(v) for k, v in d.items() if k in _SECTIONS}


def replace(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy ``cfg`` with per-section overrides, e.g. ``replace(cfg, dataset={"beta": 0.2})``."""
    data = config_to_dict(cfg)
    for key, value in sections.items():
        if isinstance(value, dict):
            data[key].update(value)
        else:
            data[key] = value
    return config_from_dict(data)
