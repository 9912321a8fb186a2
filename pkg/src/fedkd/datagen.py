"""Synthetic multi-domain classification data and federated partitioning.

All domains share one set of class means living in a ``latent_dim``
subspace of the input space ("same classes").  A domain re-styles every
sample with its own orthogonal map and shift ("different style"): the map
rotates by ``discrepancy_level * pi/2`` inside every plane of a seeded
random decomposition of the input space, so at level 1 each sample is
moved to a direction orthogonal to where it started.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import DatasetConfig
from .numerics import make_rng, random_orthogonal


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    num_classes: int
    input_dim: int
    class_means: np.ndarray
    rotation: np.ndarray
    shift: np.ndarray
    noise_std: float = 0.0
    label_flip_prob: float = 0.0
    noise_basis: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0 <= self.label_flip_prob < 0.5:
            raise ValueError("label_flip_prob must lie in [0, 0.5)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.rotation.T + self.shift


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.domain_ids.shape != (n,):
            raise ValueError("features, labels and domain_ids must have equal length")
        if n and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.features[idx], self.labels[idx], self.domain_ids[idx])

    @staticmethod
    def concat(sets: Sequence["LabeledSet"]) -> "LabeledSet":
        return LabeledSet(
            np.concatenate([s.features for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.domain_ids for s in sets]),
        )


class MaskedSet:
    """Server-side unlabeled pool.

    Labels exist only for diagnostics; every access through :attr:`labels`
    is counted so runs can prove training never looked at them.
    """

    def __init__(self, data: LabeledSet):
        self._features = data.features
        self.domain_ids = data.domain_ids
        self._labels = data.labels
        self.label_reads = 0
        self.feature_reads = 0

    def __len__(self) -> int:
        return self._features.shape[0]

    @property
    def features(self) -> np.ndarray:
        self.feature_reads += 1
        return self._features

    @property
    def labels(self) -> np.ndarray:
        self.label_reads += 1
        return self._labels


@dataclass
class FederatedDataset:
    clients: list
    server_unlabeled: MaskedSet
    server_eval: dict
    client_domain_of: list
    lambda_weights: np.ndarray
    domains: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def domain_weights(self) -> dict:
        """lambda mass per client domain, used to average per-domain accuracy."""
        out: dict = {}
        for k, d in enumerate(self.client_domain_of):
            out[d] = out.get(d, 0.0) + float(self.lambda_weights[k])
        return out


def _block_rotation(rng: np.random.Generator, d: int, theta: float) -> np.ndarray:
    q = random_orthogonal(rng, d)
    block = np.eye(d)
    c, s = math.cos(theta), math.sin(theta)
    for i in range(0, d - 1, 2):
        block[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    return q @ block @ q.T


def make_domain(
    base_seed: int,
    domain_id: int,
    discrepancy_level: float,
    *,
    num_classes: int = 10,
    input_dim: int = 32,
    latent_dim: int = 4,
    class_sep: float = 2.0,
    noise_std: float = 0.5,
    label_flip_prob: float = 0.0,
    shift_scale: float = 1.0,
) -> DomainSpec:
    """Domain ``domain_id`` of the family rooted at ``base_seed``.

    Class means depend on ``base_seed`` only; the style transform depends on
    ``(base_seed, domain_id)``.  Level 0 gives the exact identity transform.
    """
    if not math.isfinite(discrepancy_level):
        raise ValueError("discrepancy_level must be finite")
    if not 1 <= latent_dim <= input_dim:
        raise ValueError("latent_dim must lie in [1, input_dim]")
    base = make_rng(base_seed, "base-geometry")
    basis = random_orthogonal(base, input_dim)[:, :latent_dim]
    latent_means = base.standard_normal((num_classes, latent_dim))
    latent_means *= class_sep / np.linalg.norm(latent_means, axis=1, keepdims=True)
    class_means = latent_means @ basis.T

    style = make_rng(base_seed, "domain-style", domain_id)
    theta = discrepancy_level * math.pi / 2
    direction = style.standard_normal(input_dim)
    direction /= np.linalg.norm(direction)
    if discrepancy_level == 0:
        rotation, shift = np.eye(input_dim), np.zeros(input_dim)
    else:
        rotation = _block_rotation(style, input_dim, theta)
        shift = discrepancy_level * shift_scale * direction
    return DomainSpec(
        domain_id=domain_id,
        num_classes=num_classes,
        input_dim=input_dim,
        class_means=class_means,
        rotation=rotation,
        shift=shift,
        noise_std=noise_std,
        label_flip_prob=label_flip_prob,
        noise_basis=basis,
    )


def domain_from_config(cfg: DatasetConfig, seed: int, domain_id: int, level: Optional[float] = None) -> DomainSpec:
    return make_domain(
        seed,
        domain_id,
        cfg.discrepancy_level if level is None else level,
        num_classes=cfg.num_classes,
        input_dim=cfg.input_dim,
        latent_dim=cfg.latent_dim,
        class_sep=cfg.class_sep,
        noise_std=cfg.noise_std,
        label_flip_prob=cfg.label_flip_prob,
        shift_scale=cfg.shift_scale,
    )


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.resize(np.arange(num_classes), n))


def _clean_samples(spec: DomainSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    x = spec.class_means[labels].copy()
    if spec.noise_std > 0:
        if spec.noise_basis is None:
            x += spec.noise_std * rng.standard_normal(x.shape)
        else:
            x += spec.noise_std * rng.standard_normal((len(labels), spec.noise_basis.shape[1])) @ spec.noise_basis.T
    return x


def _flip(labels: np.ndarray, prob: float, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    if prob == 0:
        return labels
    flip = rng.random(len(labels)) < prob
    offsets = rng.integers(1, num_classes, size=len(labels))
    return np.where(flip, (labels + offsets) % num_classes, labels)


def sample_domain(spec: DomainSpec, n: int, rng: np.random.Generator) -> LabeledSet:
    if n <= 0:
        raise ValueError("n must be positive")
    labels = _balanced_labels(n, spec.num_classes, rng)
    x = spec.apply(_clean_samples(spec, labels, rng))
    labels = _flip(labels, spec.label_flip_prob, spec.num_classes, rng)
    return LabeledSet(x, labels, np.full(n, spec.domain_id))


def sample_blended(
    server: DomainSpec, components: Sequence[DomainSpec], n: int, rng: np.random.Generator
) -> LabeledSet:
    """Server pool whose samples each borrow one component domain's style.

    Sample ``i`` is drawn from ``components[i % m]`` (then shuffled) and
    passed through the server transform, so the pool is a mixture of
    sub-populations that each resemble one client domain.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    which = rng.permutation(np.resize(np.arange(len(components)), n))
    labels = _balanced_labels(n, server.num_classes, rng)
    x = np.empty((n, server.input_dim))
    for j, comp in enumerate(components):
        mask = which == j
        x[mask] = server.apply(comp.apply(_clean_samples(comp, labels[mask], rng)))
    labels = _flip(labels, server.label_flip_prob, server.num_classes, rng)
    return LabeledSet(x, labels, np.full(n, server.domain_id))


def dirichlet_partition(
    data: LabeledSet, k: int, beta: float, rng: np.random.Generator, num_classes: Optional[int] = None
) -> list:
    """Split ``data`` across ``k`` clients with per-class Dir(beta) proportions.

    For each class the shuffled items are cut into contiguous slices of
    ``round(p_j * n_c)`` items (clamped to what is left); the last client
    takes the remainder.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if beta <= 0:
        raise ValueError("beta must be positive")
    present = np.unique(data.labels)
    classes = np.arange(num_classes) if num_classes is not None else present
    missing = np.setdiff1d(classes, present)
    if missing.size:
        raise ValueError(f"class {int(missing[0])} has no samples")
    parts: list = [[] for _ in range(k)]
    for c in classes:
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        p = rng.dirichlet(np.full(k, beta)) if k > 1 else np.ones(1)
        start = 0
        for j in range(k - 1):
            take = min(int(round(p[j] * len(idx))), len(idx) - start)
            parts[j].append(idx[start:start + take])
            start += take
        parts[k - 1].append(idx[start:])
    return [data.subset(np.sort(np.concatenate(p))) for p in parts]


def client_domains(cfg: DatasetConfig) -> list:
    if cfg.client_domains:
        return sorted(cfg.client_domains)
    return [d for d in range(cfg.num_domains) if d != cfg.server_domain]


def build_federation(cfg: DatasetConfig, seed: int, lambda_weights: Optional[Sequence[float]] = None) -> FederatedDataset:
    doms = client_domains(cfg)
    if cfg.server_domain in doms:
        raise ValueError("server domain cannot also be a client domain")
    if cfg.partition == "silo" and cfg.clients_per_domain != 1:
        raise ValueError("cross-silo partition uses exactly one client per domain")
    specs = {d: domain_from_config(cfg, seed, d) for d in range(cfg.num_domains)}

    clients, owner = [], []
    for d in doms:
        rng = make_rng(seed, "client-data", d)
        if cfg.partition == "silo":
            clients.append(sample_domain(specs[d], cfg.client_n, rng))
            owner.append(d)
        else:
            pool = sample_domain(specs[d], cfg.client_n * cfg.clients_per_domain, rng)
            for part in dirichlet_partition(pool, cfg.clients_per_domain, cfg.beta, rng, cfg.num_classes):
                clients.append(part)
                owner.append(d)

    srng = make_rng(seed, "server-data")
    if cfg.server_style == "domain":
        server = sample_domain(specs[cfg.server_domain], cfg.server_n, srng)
    elif cfg.server_style == "client1":
        server = sample_domain(specs[doms[0]], cfg.server_n, srng)
    else:
        style = domain_from_config(cfg, seed, cfg.server_domain, level=cfg.server_discrepancy)
        server = sample_blended(style, [specs[d] for d in doms], cfg.server_n, srng)

    evals = {d: sample_domain(specs[d], cfg.test_n, make_rng(seed, "eval-data", d)) for d in doms}

    k = len(clients)
    if lambda_weights is None or len(lambda_weights) == 0:
        lam = np.full(k, 1.0 / k)
    else:
        lam = np.asarray(lambda_weights, dtype=np.float64)
        if lam.shape != (k,) or np.any(lam < 0) or abs(lam.sum() - 1) > 1e-9:
            raise ValueError("lambda_weights must have one non-negative entry per client and sum to 1")
    return FederatedDataset(clients, MaskedSet(server), evals, owner, lam, specs)


def save_csv(data: LabeledSet, path) -> None:
    d = data.features.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(d)] + ["label", "domain"])
        for x, y, dom in zip(data.features, data.labels, data.domain_ids):
            w.writerow([repr(float(v)) for v in x] + [int(y), int(dom)])


def load_csv(path, num_classes: Optional[int] = None) -> LabeledSet:
    """Read ``f0,...,f{d-1},label,domain`` rows.

    Errors name the offending line (1-based, header is line 1).
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        d = len(header) - 2
        expected = [f"f{i}" for i in range(d)] + ["label", "domain"]
        if d < 1 or header != expected:
            raise ValueError(f"{path}:1: header must be f0,...,f{{d-1}},label,domain")
        feats, labels, doms = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise ValueError(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
            try:
                x = [float(v) for v in row[:d]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric feature value") from None
            if not all(math.isfinite(v) for v in x):
                raise ValueError(f"{path}:{lineno}: non-finite feature value")
            try:
                y, dom = int(row[d]), int(row[d + 1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: label and domain must be integers") from None
            if y < 0 or (num_classes is not None and y >= num_classes):
                raise ValueError(f"{path}:{lineno}: unknown label {y}")
            if dom < 0:
                raise ValueError(f"{path}:{lineno}: domain must be non-negative")
            feats.append(x)
            labels.append(y)
            doms.append(dom)
    return LabeledSet(np.array(feats).reshape(len(feats), d), np.array(labels, dtype=np.int64), np.array(doms, dtype=np.int64))
