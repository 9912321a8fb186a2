"""Client/server round loop for FedAvg, FedProx, FedDF and FedD3A.

One round: sample clients, broadcast the global model, (FedD3A) build each
client's projector from the broadcast backbone, train locally, upload, then
either average parameters (FedAvg/FedProx) or distill the uploaded teachers
into the global model on the server's unlabeled pool (FedDF/FedD3A).

Random streams are keyed per actor (``make_rng(seed, "client", k)`` etc.) so
strategies that differ only in aggregation consume identical randomness.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .config import ExperimentConfig
from .datagen import FederatedDataset, LabeledSet, MaskedSet, build_federation
from .neural import (
    LossSpec,
    MlpArch,
    MlpParams,
    Optimizer,
    accuracy,
    average_params,
    backward,
    checkpoint_size,
    cosine_lr,
    features,
    forward,
    init_params,
    kl_div,
    sgd_step,
)
from .numerics import ShapeError, make_rng, softmax
from .subspace import (
    ProjectionMatrix,
    onehot_rows,
    projection_iterative,
    projection_wire_size,
    teacher_weights_batch,
)

DISTILL_STRATEGIES = ("feddf", "fedd3a")
AVERAGING_STRATEGIES = ("fedavg", "fedprox")

# (server features, selected client ids) -> n x m teacher weights
WeightOracle = Callable[[np.ndarray, Sequence[int]], np.ndarray]


@dataclass
class ClientState:
    client_id: int
    arch: MlpArch
    params: MlpParams
    dataset: LabeledSet
    rng: np.random.Generator
    domain_id: int = -1


@dataclass
class ServerState:
    global_arch: MlpArch
    global_params: MlpParams
    server_unlabeled: MaskedSet
    strategy: str
    weighting: str = "avg"
    round_index: int = 0
    rng: Optional[np.random.Generator] = None

    def __post_init__(self):
        if self.strategy not in AVERAGING_STRATEGIES + DISTILL_STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "feddf" and self.weighting != "avg":
            raise ValueError("FedDF weights teachers equally; weighting must be 'avg'")
        if self.strategy in AVERAGING_STRATEGIES and self.weighting != "avg":
            raise ValueError("teacher weighting only applies to distillation strategies")


@dataclass
class ClientUpdate:
    client_id: int
    arch: MlpArch
    params: MlpParams
    num_samples: int
    projection: Optional[ProjectionMatrix] = None
    bytes_uploaded: int = 0


@dataclass
class RoundReport:
    round_index: int
    domain_accuracy: dict
    mean_accuracy: float
    distill_loss: list = field(default_factory=list)
    bytes_up: int = 0
    bytes_down: int = 0
    wall_time: float = 0.0
    learning_rate: float = 0.0
    selected: list = field(default_factory=list)
    mean_top_weight: float = float("nan")


@dataclass
class TrainSettings:
    """Hyperparameters shared by local training and server distillation."""

    local_epochs: int = 1
    distill_epochs: int = 1
    batch_size: int = 64
    momentum: float = 0.9
    mu: float = 0.0
    lambda_kd: float = 1.0
    kl_direction: str = "student_teacher"
    ridge_alpha: float = 1e-2
    accumulation: str = "sample"
    projection_batch: int = 32
    projection_variant: str = "scaled"

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "TrainSettings":
        return cls(
            local_epochs=cfg.federation.local_epochs,
            distill_epochs=cfg.federation.distill_epochs,
            batch_size=cfg.optim.batch_size,
            momentum=cfg.optim.momentum,
            mu=cfg.optim.mu,
            lambda_kd=cfg.model.lambda_kd,
            kl_direction=cfg.model.kl_direction,
            ridge_alpha=cfg.subspace.ridge_alpha,
            accumulation=cfg.subspace.accumulation,
            projection_batch=cfg.subspace.batch_size,
            projection_variant=cfg.subspace.projection_variant,
        )


def client_projection(global_arch: MlpArch, global_params: MlpParams, data: LabeledSet, st: TrainSettings) -> ProjectionMatrix:
    z = features(global_arch, global_params, data.features)
    return projection_iterative(
        z,
        st.ridge_alpha,
        mode=st.accumulation,
        batch_size=st.projection_batch,
        variant=st.projection_variant,
    )


def local_train(
    client: ClientState,
    global_arch: MlpArch,
    global_params: MlpParams,
    *,
    strategy: str,
    lr: float,
    settings: TrainSettings,
    heterogeneous: bool = False,
) -> ClientUpdate:
    """Run ``local_epochs`` of minibatch SGD on the client's data.

    Homogeneous clients restart from the broadcast global parameters.
    Heterogeneous clients keep their own parameters and add a distillation
    term towards the broadcast global model.
    """
    data = client.dataset
    if len(data) == 0:
        raise ValueError(f"client {client.client_id} has no data")
    projection = None
    if strategy == "fedd3a":
        projection = client_projection(global_arch, global_params, data, settings)

    if heterogeneous:
        params = client.params.copy()
    else:
        if global_params.layout() != client.params.layout():
            raise ShapeError(f"client {client.client_id} arch differs from the global arch")
        params = global_params.copy()
    anchor = global_params if strategy == "fedprox" and settings.mu != 0 and not heterogeneous else None

    opt = Optimizer(lr, settings.momentum)
    x, y = data.features, data.labels
    for _ in range(settings.local_epochs):
        order = client.rng.permutation(len(y))
        for start in range(0, len(order), settings.batch_size):
            idx = order[start:start + settings.batch_size]
            spec = LossSpec(labels=y[idx], anchor=anchor, mu=settings.mu if anchor is not None else 0.0)
            if heterogeneous and settings.lambda_kd != 0:
                spec.teacher_probs = forward(global_arch, global_params, x[idx])[1]
                spec.kd_weight = settings.lambda_kd
                spec.kl_direction = settings.kl_direction
            params = sgd_step(params, backward(client.arch, params, x[idx], spec), opt)
    client.params = params

    nbytes = checkpoint_size(client.arch)
    if projection is not None:
        nbytes += projection_wire_size(projection.dim)
    return ClientUpdate(client.client_id, client.arch, params, len(y), projection, nbytes)


def sample_clients(num_clients: int, m: int, rng: np.random.Generator) -> list:
    """Uniform sample without replacement, returned in ascending id order."""
    if not 1 <= m <= num_clients:
        raise ValueError(f"cannot select {m} of {num_clients} clients")
    if m == num_clients:
        return list(range(num_clients))
    return sorted(int(i) for i in rng.choice(num_clients, size=m, replace=False))


def aggregate_fedavg(updates: Sequence[ClientUpdate], data_sizes: Optional[Sequence[int]] = None) -> MlpParams:
    if not updates:
        raise ValueError("no updates to aggregate")
    sizes = np.asarray(data_sizes if data_sizes is not None else [u.num_samples for u in updates], dtype=np.float64)
    return average_params([u.params for u in updates], sizes / sizes.sum())


def teacher_weight_matrix(
    weighting: str,
    updates: Sequence[ClientUpdate],
    server_feats: Optional[np.ndarray],
    n: int,
    rng: Optional[np.random.Generator] = None,
    oracle: Optional[WeightOracle] = None,
    server_x: Optional[np.ndarray] = None,
) -> np.ndarray:
    m = len(updates)
    if weighting == "avg":
        return np.full((n, m), 1.0 / m)
    if weighting == "random":
        if rng is None:
            raise ValueError("random weighting needs an rng")
        return softmax(rng.standard_normal((n, m)), axis=1)
    if weighting in ("soft", "onehot"):
        projections = [u.projection for u in updates]
        if any(p is None for p in projections):
            raise ValueError(f"{weighting} weighting requires a projection from every client")
        w = teacher_weights_batch(projections, server_feats)
        return onehot_rows(w) if weighting == "onehot" else w
    if weighting == "ceiling":
        if oracle is None:
            raise ValueError("ceiling weighting requires a domain oracle")
        w = np.asarray(oracle(server_x, [u.client_id for u in updates]), dtype=np.float64)
        if w.shape != (n, m):
            raise ShapeError("oracle returned weights of the wrong shape")
        return w
    raise ValueError(f"unknown weighting {weighting!r}")


def pseudo_labels(teacher_probs: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Per-sample weighted mixture of teacher distributions."""
    stacked = np.stack(teacher_probs, axis=1)  # n x m x C
    return np.einsum("nm,nmc->nc", weights, stacked)


def distill(
    global_arch: MlpArch,
    student: MlpParams,
    updates: Sequence[ClientUpdate],
    server_x: np.ndarray,
    weights: np.ndarray,
    *,
    lr: float,
    settings: TrainSettings,
    rng: np.random.Generator,
) -> tuple[MlpParams, list]:
    """Train ``student`` towards the weighted teacher mixture on ``server_x``.

    Returns the new parameters and the per-batch KD loss trajectory.
    """
    if not updates:
        raise ValueError("no teachers")
    teachers = [forward(u.arch, u.params, server_x)[1] for u in updates]
    targets = pseudo_labels(teachers, weights)
    opt = Optimizer(lr, settings.momentum)
    losses = []
    params = student.copy()
    for _ in range(settings.distill_epochs):
        order = rng.permutation(len(server_x))
        for start in range(0, len(order), settings.batch_size):
            idx = order[start:start + settings.batch_size]
            spec = LossSpec(teacher_probs=targets[idx], kl_direction=settings.kl_direction)
            if settings.kl_direction == "student_teacher":
                losses.append(kl_div(forward(global_arch, params, server_x[idx])[1], targets[idx]))
            else:
                losses.append(kl_div(targets[idx], forward(global_arch, params, server_x[idx])[1]))
            params = sgd_step(params, backward(global_arch, params, server_x[idx], spec), opt)
    return params, losses


def evaluate(arch: MlpArch, params: MlpParams, fed: FederatedDataset) -> tuple[dict, float]:
    weights = fed.domain_weights()
    accs = {d: accuracy(arch, params, s.features, s.labels) for d, s in sorted(fed.server_eval.items())}
    total = sum(weights[d] for d in accs)
    mean = sum(weights[d] * a for d, a in accs.items()) / total
    return accs, float(mean)


class Simulation:
    """Owns one federation instance and runs rounds of one strategy arm."""

    def __init__(
        self,
        cfg: ExperimentConfig,
        seed: int,
        strategy: str,
        weighting: Optional[str] = None,
        *,
        federation: Optional[FederatedDataset] = None,
        heterogeneous: bool = False,
        weight_oracle: Optional[WeightOracle] = None,
    ):
        self.cfg = cfg
        self.seed = int(seed)
        self.heterogeneous = heterogeneous
        if heterogeneous and strategy not in DISTILL_STRATEGIES:
            raise ValueError(f"{strategy} averages parameters and cannot aggregate heterogeneous models")
        if weighting is None:
            weighting = cfg.federation.weighting if strategy == "fedd3a" else "avg"
        self.fed = federation if federation is not None else build_federation(
            cfg.dataset, self.seed, cfg.federation.lambda_weights
        )
        self.settings = TrainSettings.from_config(cfg)
        if strategy != "fedprox":
            self.settings.mu = 0.0
        d = cfg.dataset
        self.global_arch = MlpArch(d.input_dim, tuple(cfg.model.hidden_dims), d.num_classes)
        self.server = ServerState(
            self.global_arch,
            init_params(self.global_arch, make_rng(self.seed, "global-init")),
            self.fed.server_unlabeled,
            strategy,
            weighting,
            rng=make_rng(self.seed, "server"),
        )
        self.weight_rng = make_rng(self.seed, "weight-noise")
        self.distill_rng = make_rng(self.seed, "distill")
        self.weight_oracle = weight_oracle
        self.clients = []
        client_dims = cfg.model.client_hidden_dims
        domain_order = sorted(set(self.fed.client_domain_of))
        for k, data in enumerate(self.fed.clients):
            dom = self.fed.client_domain_of[k]
            if heterogeneous and client_dims:
                hidden = client_dims[domain_order.index(dom) % len(client_dims)]
                hidden = tuple(hidden) if isinstance(hidden, (list, tuple)) else (int(hidden),)
                arch = MlpArch(d.input_dim, hidden, d.num_classes)
            else:
                arch = self.global_arch
            if heterogeneous:
                params = init_params(arch, make_rng(self.seed, "client-init", k))
            else:
                params = self.server.global_params.copy()
            self.clients.append(ClientState(k, arch, params, data, make_rng(self.seed, "client", k), dom))
        self.history: list = []

    @property
    def strategy(self) -> str:
        return self.server.strategy

    @property
    def weighting(self) -> str:
        return self.server.weighting

    def clients_per_round(self) -> int:
        m = self.cfg.federation.clients_per_round
        return len(self.clients) if m <= 0 else m

    def round_lr(self, t: int) -> float:
        o = self.cfg.optim
        return cosine_lr(t, self.cfg.federation.global_rounds, o.lr0, o.lr_min)

    def run_round(self) -> RoundReport:
        t0 = time.perf_counter()
        srv = self.server
        t = srv.round_index
        lr = self.round_lr(t)
        selected = sample_clients(len(self.clients), self.clients_per_round(), srv.rng)
        broadcast = srv.global_params.copy()
        updates = [
            local_train(
                self.clients[k],
                self.global_arch,
                broadcast,
                strategy=srv.strategy,
                lr=lr,
                settings=self.settings,
                heterogeneous=self.heterogeneous,
            )
            for k in selected
        ]
        bytes_down = len(selected) * checkpoint_size(self.global_arch)
        bytes_up = sum(u.bytes_uploaded for u in updates)

        losses: list = []
        top_weight = float("nan")
        if srv.strategy in AVERAGING_STRATEGIES:
            srv.global_params = aggregate_fedavg(updates)
        else:
            pool = srv.server_unlabeled
            server_x = pool.features
            if self.heterogeneous:
                student = srv.global_params.copy()
            else:
                student = average_params([u.params for u in updates])
            feats = None
            if srv.weighting in ("soft", "onehot"):
                backbone = student if self.cfg.federation.affinity_backbone == "student" else broadcast
                feats = features(self.global_arch, backbone, server_x)
            weights = teacher_weight_matrix(
                srv.weighting, updates, feats, len(server_x), self.weight_rng, self.weight_oracle, server_x
            )
            top_weight = float(np.mean(weights.max(axis=1)))
            srv.global_params, losses = distill(
                self.global_arch, student, updates, server_x, weights,
                lr=lr, settings=self.settings, rng=self.distill_rng,
            )
        accs, mean = evaluate(self.global_arch, srv.global_params, self.fed)
        report = RoundReport(
            round_index=t,
            domain_accuracy=accs,
            mean_accuracy=mean,
            distill_loss=losses,
            bytes_up=bytes_up,
            bytes_down=bytes_down,
            wall_time=time.perf_counter() - t0,
            learning_rate=lr,
            selected=selected,
            mean_top_weight=top_weight,
        )
        srv.round_index += 1
        self.history.append(report)
        return report

    def run(self, rounds: Optional[int] = None) -> list:
        rounds = self.cfg.federation.global_rounds if rounds is None else rounds
        return [self.run_round() for _ in range(rounds)]


def run_heterogeneous_round(sim: Simulation) -> RoundReport:
    if not sim.heterogeneous:
        raise ValueError("simulation was not built in heterogeneous mode")
    return sim.run_round()
