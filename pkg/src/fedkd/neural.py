"""Small tanh MLP classifiers with hand-written backpropagation.

Layer ``i`` maps ``h -> h @ weights[i] + biases[i]``.  Every hidden layer is
followed by ``tanh``; the output of the last hidden layer is the backbone
feature ``B(x)`` and the final affine layer is the classifier head.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics import ShapeError, as_matrix, softmax

PROB_CLAMP = 1e-12
CHECKPOINT_MAGIC = b"FD3A"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpArch:
    input_dim: int
    hidden_dims: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if min(self.hidden_dims + (self.input_dim, self.num_classes)) < 1:
            raise ValueError("all layer widths must be positive")

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = (self.input_dim,) + self.hidden_dims + (self.num_classes,)
        return list(zip(widths[:-1], widths[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)


@dataclass
class MlpParams:
    weights: list
    biases: list

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def layout(self) -> list[tuple]:
        return [a.shape for a in self.arrays()]

    def ravel(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, flat: np.ndarray) -> "MlpParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(flat[pos:pos + a.size], dtype=np.float64).reshape(a.shape).copy())
            pos += a.size
        return MlpParams(out[0::2], out[1::2])

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def matches(self, arch: MlpArch) -> bool:
        return [w.shape for w in self.weights] == arch.layer_shapes and [
            b.shape for b in self.biases
        ] == [(o,) for _, o in arch.layer_shapes]


def _check_layout(a: MlpParams, b: MlpParams) -> None:
    if a.layout() != b.layout():
        raise ShapeError("parameter layouts differ")


def init_params(arch: MlpArch, rng: np.random.Generator) -> MlpParams:
    weights = [rng.standard_normal((i, o)) / math.sqrt(i) for i, o in arch.layer_shapes]
    biases = [np.zeros(o) for _, o in arch.layer_shapes]
    return MlpParams(weights, biases)


def zeros_like(params: MlpParams) -> MlpParams:
    return MlpParams([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])


def _forward_trace(arch: MlpArch, params: MlpParams, x) -> tuple[list[np.ndarray], np.ndarray]:
    x = as_matrix(x)
    if x.shape[1] != arch.input_dim:
        raise ShapeError(f"input has {x.shape[1]} columns, arch expects {arch.input_dim}")
    if not params.matches(arch):
        raise ShapeError("params do not match arch")
    acts = [x]
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w + b)
        acts.append(h)
    logits = h @ params.weights[-1] + params.biases[-1]
    return acts, logits


def forward(arch: MlpArch, params: MlpParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features, probs)`` for a batch of inputs."""
    acts, logits = _forward_trace(arch, params, x)
    return acts[-1], softmax(logits, axis=1)


def features(arch: MlpArch, params: MlpParams, x) -> np.ndarray:
    return forward(arch, params, x)[0]


def predict(arch: MlpArch, params: MlpParams, x) -> np.ndarray:
    return forward(arch, params, x)[1].argmax(axis=1)


def accuracy(arch: MlpArch, params: MlpParams, x, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(predict(arch, params, x) == labels))


def cross_entropy(probs, labels) -> float:
    probs = as_matrix(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs.shape[0],):
        raise ShapeError("one label per row required")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= probs.shape[1]:
        raise ValueError("label out of range")
    picked = np.clip(probs[np.arange(len(labels)), labels], PROB_CLAMP, 1.0)
    return float(-np.mean(np.log(picked)))


def kl_div(student_probs, teacher_probs) -> float:
    """Batch mean of ``sum_c s_c * ln(s_c / t_c)``."""
    s, t = as_matrix(student_probs), as_matrix(teacher_probs)
    if s.shape != t.shape:
        raise ShapeError(f"shape mismatch {s.shape} vs {t.shape}")
    s = np.clip(s, PROB_CLAMP, 1.0)
    t = np.clip(t, PROB_CLAMP, 1.0)
    return float(np.mean(np.sum(s * (np.log(s) - np.log(t)), axis=1)))


def prox_term(params: MlpParams, anchor: MlpParams, mu: float) -> float:
    _check_layout(params, anchor)
    if mu == 0:
        return 0.0
    sq = sum(float(np.sum((a - b) ** 2)) for a, b in zip(params.arrays(), anchor.arrays()))
    return 0.5 * mu * sq


@dataclass
class LossSpec:
    """Composite objective ``ce_weight*CE + kd_weight*KL + prox``.

    ``kl_direction="student_teacher"`` is ``KL(student || teacher)``; the
    reverse order is ``"teacher_student"``.
    """

    labels: Optional[np.ndarray] = None
    ce_weight: float = 1.0
    teacher_probs: Optional[np.ndarray] = None
    kd_weight: float = 1.0
    kl_direction: str = "student_teacher"
    anchor: Optional[MlpParams] = None
    mu: float = 0.0

    @property
    def uses_ce(self) -> bool:
        return self.labels is not None and self.ce_weight != 0

    @property
    def uses_kd(self) -> bool:
        return self.teacher_probs is not None and self.kd_weight != 0

    @property
    def uses_prox(self) -> bool:
        return self.anchor is not None and self.mu != 0

    def validate(self) -> None:
        if self.kl_direction not in ("student_teacher", "teacher_student"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")
        if self.mu != 0 and self.anchor is None:
            raise ValueError("proximal term requested without anchor params")
        if not (self.uses_ce or self.uses_kd or self.uses_prox):
            raise ValueError("loss has no active terms: labels, teacher probs or anchor required")


def loss_value(arch: MlpArch, params: MlpParams, x, spec: LossSpec) -> float:
    spec.validate()
    _, probs = forward(arch, params, x)
    total = 0.0
    if spec.uses_ce:
        total += spec.ce_weight * cross_entropy(probs, spec.labels)
    if spec.uses_kd:
        if spec.kl_direction == "student_teacher":
            total += spec.kd_weight * kl_div(probs, spec.teacher_probs)
        else:
            total += spec.kd_weight * kl_div(spec.teacher_probs, probs)
    if spec.uses_prox:
        total += prox_term(params, spec.anchor, spec.mu)
    return total


def _logit_grad(probs: np.ndarray, spec: LossSpec) -> np.ndarray:
    n = probs.shape[0]
    g = np.zeros_like(probs)
    if spec.uses_ce:
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), np.asarray(spec.labels, dtype=np.int64)] = 1.0
        g += spec.ce_weight * (probs - onehot)
    if spec.uses_kd:
        t = as_matrix(spec.teacher_probs)
        if t.shape != probs.shape:
            raise ShapeError("teacher probs shape does not match batch")
        if spec.kl_direction == "student_teacher":
            s_log = np.log(np.clip(probs, PROB_CLAMP, 1.0))
            t_log = np.log(np.clip(t, PROB_CLAMP, 1.0))
            r = s_log - t_log
            g += spec.kd_weight * probs * (r - np.sum(probs * r, axis=1, keepdims=True))
        else:
            g += spec.kd_weight * (probs * t.sum(axis=1, keepdims=True) - t)
    return g / n


def backward(arch: MlpArch, params: MlpParams, x, spec: LossSpec) -> MlpParams:
    """Exact gradient of :func:`loss_value` with respect to every parameter."""
    spec.validate()
    acts, logits = _forward_trace(arch, params, x)
    probs = softmax(logits, axis=1)
    delta = _logit_grad(probs, spec)
    n_layers = len(params.weights)
    gw: list = [None] * n_layers
    gb: list = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (1.0 - acts[i] ** 2)
    grads = MlpParams(gw, gb)
    if spec.uses_prox:
        _check_layout(params, spec.anchor)
        grads = MlpParams(
            [g + spec.mu * (w - a) for g, w, a in zip(grads.weights, params.weights, spec.anchor.weights)],
            [g + spec.mu * (w - a) for g, w, a in zip(grads.biases, params.biases, spec.anchor.biases)],
        )
    return grads


@dataclass
class Optimizer:
    learning_rate: float
    momentum: float = 0.9
    velocity: Optional[MlpParams] = field(default=None, repr=False)


def sgd_step(params: MlpParams, grads: MlpParams, opt: Optimizer) -> MlpParams:
    """Heavy-ball update ``v <- momentum*v + g; w <- w - lr*v``."""
    _check_layout(params, grads)
    if opt.velocity is None:
        opt.velocity = zeros_like(params)
    _check_layout(params, opt.velocity)
    vel = [opt.momentum * v + g for v, g in zip(opt.velocity.arrays(), grads.arrays())]
    opt.velocity = MlpParams(vel[0::2], vel[1::2])
    new = [w - opt.learning_rate * v for w, v in zip(params.arrays(), vel)]
    return MlpParams(new[0::2], new[1::2])


def cosine_lr(t: float, total: int, lr0: float = 0.01, lr_min: float = 1e-4) -> float:
    if total < 1 or not 0 <= t <= total:
        raise ValueError(f"need 0 <= t <= total and total >= 1, got t={t}, total={total}")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


def average_params(models: Sequence[MlpParams], weights: Optional[Sequence[float]] = None) -> MlpParams:
    if not models:
        raise ValueError("nothing to average")
    for m in models[1:]:
        if m.layout() != models[0].layout():
            raise ShapeError("cannot average heterogeneous layouts; use the distillation path")
    if weights is None:
        weights = np.full(len(models), 1.0 / len(models))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(models),) or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative, one per model, summing to 1")
    arrays = [sum(wt * m.arrays()[j] for wt, m in zip(weights, models)) for j in range(len(models[0].arrays()))]
    return MlpParams(arrays[0::2], arrays[1::2])


def train_supervised(
    arch: MlpArch,
    params: MlpParams,
    x,
    labels,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    momentum: float = 0.9,
) -> MlpParams:
    """Plain minibatch cross-entropy training; used by diagnostics and probes."""
    x = as_matrix(x)
    labels = np.asarray(labels)
    opt = Optimizer(lr, momentum)
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            grads = backward(arch, params, x[idx], LossSpec(labels=labels[idx]))
            params = sgd_step(params, grads, opt)
    return params


def save_checkpoint(params: MlpParams) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.weights))]
    for w, b in zip(params.weights, params.biases):
        rows, cols = w.shape
        if b.shape != (cols,):
            raise ShapeError("bias length must equal weight columns")
        out.append(struct.pack("<II", rows, cols))
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def load_checkpoint(data: bytes) -> MlpParams:
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos, weights, biases = 12, [], []
    for layer in range(n_layers):
        if pos + 8 > len(data):
            raise ValueError(f"truncated checkpoint at layer {layer} header")
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        need = 8 * (rows * cols + cols)
        if pos + need > len(data):
            raise ValueError(f"truncated checkpoint in layer {layer} payload")
        w = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols)
        pos += 8 * rows * cols
        b = np.frombuffer(data, dtype="<f8", count=cols, offset=pos)
        pos += 8 * cols
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if pos != len(data):
        raise ValueError("trailing bytes after checkpoint")
    return MlpParams(weights, biases)


def checkpoint_size(arch: MlpArch) -> int:
    return 12 + sum(8 + 8 * (i * o + o) for i, o in arch.layer_shapes)
