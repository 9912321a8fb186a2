"""Client subspace summaries and per-sample teacher weighting.

A client condenses the backbone features ``Z`` of its local data into the
damped projector ``P = Z^T (Z Z^T + alpha I)^{-1} Z``.  The server never sees
``Z``; it scores each of its own samples ``u`` by ``cos(u, P u)`` against every
uploaded projector and converts the scores into teacher weights.

The recursive form accumulates the ridge inverse ``Phat = (alpha I + sum z z^T)^{-1}``
one rank-one update at a time and returns ``P = I - alpha * Phat``, which is
the closed form above by the push-through identity.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .numerics import EPS_NORM, ShapeError, as_matrix, rowwise_cosine, softmax, solve_spd, standardize

DEFAULT_RIDGE_ALPHA = 1e-2
WIRE_MAGIC = b"FD3P"
WIRE_VERSION = 1
_HEADER = struct.Struct("<4sIIdQ")
VARIANTS = ("scaled", "paper_literal")
ACCUMULATION_MODES = ("sample", "batch_mean")


@dataclass(frozen=True)
class ProjectionMatrix:
    p: np.ndarray
    ridge_alpha: float
    sample_count: int

    @property
    def dim(self) -> int:
        return self.p.shape[0]

    def apply(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=np.float64) @ self.p.T

    @property
    def nbytes(self) -> int:
        return projection_wire_size(self.dim)


@dataclass
class TeacherWeights:
    weights: np.ndarray
    raw_cosines: np.ndarray


class ProjectionAccumulator:
    """Recursive least-squares accumulation of the ridge inverse."""

    def __init__(self, dim: int, ridge_alpha: float = DEFAULT_RIDGE_ALPHA):
        if ridge_alpha <= 0:
            raise ValueError("ridge_alpha must be positive")
        self.dim = int(dim)
        self.ridge_alpha = float(ridge_alpha)
        self.p_hat = np.eye(self.dim) / self.ridge_alpha
        self.count = 0

    def update(self, z) -> None:
        z = np.asarray(z, dtype=np.float64).ravel()
        if z.size != self.dim:
            raise ShapeError(f"feature of length {z.size} fed to a {self.dim}-dim accumulator")
        k = self.p_hat @ z
        self.p_hat -= np.outer(k, k) / (1.0 + z @ k)
        self.count += 1

    def update_many(self, zs: Iterable) -> None:
        for z in zs:
            self.update(z)

    def result(self, variant: str = "scaled") -> ProjectionMatrix:
        p_hat = 0.5 * (self.p_hat + self.p_hat.T)
        if variant == "scaled":
            p = np.eye(self.dim) - self.ridge_alpha * p_hat
        elif variant == "paper_literal":
            p = np.eye(self.dim) - p_hat
        else:
            raise ValueError(f"unknown projection variant {variant!r}")
        return ProjectionMatrix(p, self.ridge_alpha, self.count)


def batch_means(z: np.ndarray, batch_size: int) -> np.ndarray:
    z = as_matrix(z)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return np.stack([z[i:i + batch_size].mean(axis=0) for i in range(0, len(z), batch_size)]) if len(z) else z


def projection_iterative(
    features,
    ridge_alpha: float = DEFAULT_RIDGE_ALPHA,
    *,
    dim: int | None = None,
    mode: str = "sample",
    batch_size: int = 32,
    variant: str = "scaled",
) -> ProjectionMatrix:
    """Build a projector by rank-one updates.

    ``features`` is an ``n x d`` matrix or any iterable of length-``d``
    vectors.  In ``batch_mean`` mode consecutive groups of ``batch_size``
    rows are averaged first and each mean counts as one update.
    """
    if mode not in ACCUMULATION_MODES:
        raise ValueError(f"unknown accumulation mode {mode!r}")
    if isinstance(features, np.ndarray) and features.ndim == 2:
        rows = features
    else:
        rows = [np.asarray(f, dtype=np.float64).ravel() for f in features]
        if len({r.size for r in rows}) > 1:
            raise ShapeError("feature dimension changed mid-stream")
        rows = np.vstack(rows) if rows else np.zeros((0, dim or 0))
    if dim is None:
        if rows.shape[1] == 0:
            raise ValueError("dim is required for an empty stream")
        dim = rows.shape[1]
    if rows.shape[0] and rows.shape[1] != dim:
        raise ShapeError(f"features have {rows.shape[1]} columns, expected {dim}")
    if mode == "batch_mean":
        rows = batch_means(rows, batch_size)
    acc = ProjectionAccumulator(dim, ridge_alpha)
    acc.update_many(rows)
    return acc.result(variant)


def projection_closed_form(z, ridge_alpha: float = DEFAULT_RIDGE_ALPHA) -> ProjectionMatrix:
    z = as_matrix(z)
    if z.shape[0] < 1:
        raise ValueError("need at least one feature row")
    gram = z @ z.T + ridge_alpha * np.eye(z.shape[0])
    p = z.T @ solve_spd(gram, z)
    return ProjectionMatrix(0.5 * (p + p.T), float(ridge_alpha), z.shape[0])


def affinity(p: ProjectionMatrix, feature) -> float:
    feature = np.asarray(feature, dtype=np.float64).ravel()
    if feature.size != p.dim:
        raise ShapeError(f"feature length {feature.size} != projector dim {p.dim}")
    return float(affinity_batch(p, feature[None, :])[0])


def affinity_batch(p: ProjectionMatrix, features) -> np.ndarray:
    f = as_matrix(features)
    if f.shape[1] != p.dim:
        raise ShapeError(f"feature length {f.shape[1]} != projector dim {p.dim}")
    return rowwise_cosine(f, p.apply(f))


def _check_dims(projections: Sequence[ProjectionMatrix]) -> int:
    if not projections:
        raise ValueError("at least one projection is required")
    dims = {p.dim for p in projections}
    if len(dims) != 1:
        raise ShapeError(f"projections disagree on dimension: {sorted(dims)}")
    return dims.pop()


def weights_from_scores(scores) -> np.ndarray:
    """softmax of standardized scores along the last axis."""
    return softmax(standardize(scores, axis=-1), axis=-1)


def teacher_weights(projections: Sequence[ProjectionMatrix], feature) -> TeacherWeights:
    _check_dims(projections)
    r = np.array([affinity(p, feature) for p in projections])
    return TeacherWeights(weights_from_scores(r), r)


def affinity_matrix(projections: Sequence[ProjectionMatrix], features) -> np.ndarray:
    """``n x m`` matrix of scores, one column per projector."""
    _check_dims(projections)
    return np.column_stack([affinity_batch(p, features) for p in projections])


def teacher_weights_batch(projections: Sequence[ProjectionMatrix], features) -> np.ndarray:
    return weights_from_scores(affinity_matrix(projections, features))


def onehot_weights(tw: TeacherWeights) -> TeacherWeights:
    w = np.zeros_like(tw.weights)
    w[int(np.argmax(tw.weights))] = 1.0  # argmax picks the lowest index on ties
    return TeacherWeights(w, tw.raw_cosines)


def onehot_rows(weights: np.ndarray) -> np.ndarray:
    out = np.zeros_like(weights)
    out[np.arange(len(weights)), np.argmax(weights, axis=1)] = 1.0
    return out


def projection_wire_size(dim: int) -> int:
    return _HEADER.size + 8 * dim * dim


def serialize_projection(p: ProjectionMatrix) -> bytes:
    header = _HEADER.pack(WIRE_MAGIC, WIRE_VERSION, p.dim, p.ridge_alpha, p.sample_count)
    return header + np.ascontiguousarray(p.p, dtype="<f8").tobytes()


def deserialize_projection(data: bytes, expected_dim: int | None = None) -> ProjectionMatrix:
    if len(data) < _HEADER.size:
        raise ValueError("truncated projection header")
    magic, version, dim, alpha, count = _HEADER.unpack_from(data, 0)
    if magic != WIRE_MAGIC:
        raise ValueError("not a projection payload (bad magic)")
    if version != WIRE_VERSION:
        raise ValueError(f"unsupported projection version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise ShapeError(f"projection dim {dim} != expected {expected_dim}")
    if len(data) != projection_wire_size(dim):
        raise ValueError(f"projection payload is {len(data)} bytes, expected {projection_wire_size(dim)}")
    p = np.frombuffer(data, dtype="<f8", count=dim * dim, offset=_HEADER.size).reshape(dim, dim)
    return ProjectionMatrix(p.astype(np.float64), float(alpha), int(count))


def prototype(features) -> np.ndarray:
    """Mean feature vector, the baseline summary a client could upload instead."""
    return as_matrix(features).mean(axis=0)


def prototype_scores(prototypes: Sequence[np.ndarray], features) -> np.ndarray:
    f = as_matrix(features)
    protos = as_matrix(np.stack(prototypes))
    norms = np.linalg.norm(f, axis=1)[:, None] * np.linalg.norm(protos, axis=1)[None, :]
    dots = f @ protos.T
    return np.where(norms < EPS_NORM, 0.0, dots / np.where(norms < EPS_NORM, 1.0, norms))
