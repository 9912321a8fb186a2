"""Experiment suites and metrics persistence.

Every suite returns plain Python structures and, when an output directory is
given, appends one JSON object per line to ``metrics.jsonl`` and writes a
CSV summary next to it.  All rows share the :class:`MetricsRecord` schema.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import config as C
from .config import ExperimentConfig
from .datagen import FederatedDataset, LabeledSet, build_federation
from .federation import RoundReport, Simulation
from .neural import MlpArch, accuracy, checkpoint_size, forward, features, init_params, train_supervised
from .numerics import make_rng, random_orthogonal
from .subspace import affinity_matrix, projection_iterative, projection_wire_size, prototype, prototype_scores

log = logging.getLogger(__name__)

TIMING_FIELDS = ("wall_time",)
ABLATION_ARMS = ("ceiling", "avg", "random", "onehot", "soft")


@dataclass
class MetricsRecord:
    kind: str
    config_hash: str
    lineage: str
    arm: str
    seed: int
    round: int
    mean_accuracy: float
    domain_accuracy: dict = field(default_factory=dict)
    bytes_up: int = 0
    bytes_down: int = 0
    learning_rate: Optional[float] = None
    distill_loss_first: Optional[float] = None
    distill_loss_last: Optional[float] = None
    mean_top_weight: Optional[float] = None
    label_reads: int = 0
    selected: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["domain_accuracy"] = {str(k): v for k, v in self.domain_accuracy.items()}
        return json.dumps(_finite(d), sort_keys=True)


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def arm_name(strategy: str, weighting: str) -> str:
    return f"{strategy}-{weighting}" if strategy == "fedd3a" else strategy


def records_from_reports(
    cfg: ExperimentConfig, arm: str, seed: int, reports: Sequence[RoundReport], label_reads: int = 0
) -> list:
    h, lin = C.config_hash(cfg), C.lineage_hash(cfg)
    out = []
    for r in reports:
        out.append(
            MetricsRecord(
                kind=cfg.kind,
                config_hash=h,
                lineage=lin,
                arm=arm,
                seed=seed,
                round=r.round_index,
                mean_accuracy=r.mean_accuracy,
                domain_accuracy=dict(r.domain_accuracy),
                bytes_up=r.bytes_up,
                bytes_down=r.bytes_down,
                learning_rate=r.learning_rate,
                distill_loss_first=r.distill_loss[0] if r.distill_loss else None,
                distill_loss_last=r.distill_loss[-1] if r.distill_loss else None,
                mean_top_weight=r.mean_top_weight,
                label_reads=label_reads,
                selected=list(r.selected),
                wall_time=r.wall_time,
            )
        )
    return out


class MetricsWriter:
    """Single writer for one output directory; rows are only ever appended."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path = self.out_dir / "metrics.jsonl"

    def write(self, records: Iterable[MetricsRecord]) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")

    def write_summary(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        path = self.out_dir / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
        return path


def read_metrics(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def strip_timing(rows: Sequence[dict]) -> list:
    return [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in rows]


def _arms(cfg: ExperimentConfig) -> list:
    return [(s, cfg.federation.weighting if s == "fedd3a" else "avg") for s in cfg.federation.strategies]


def run_arm(
    cfg: ExperimentConfig,
    seed: int,
    strategy: str,
    weighting: Optional[str] = None,
    *,
    federation: Optional[FederatedDataset] = None,
    rounds: Optional[int] = None,
) -> tuple[list, Simulation]:
    sim = Simulation(
        cfg,
        seed,
        strategy,
        weighting,
        federation=federation,
        heterogeneous=cfg.kind == "heterogeneous",
    )
    if sim.weighting == "ceiling":
        sim.weight_oracle = ceiling_oracle(sim.fed, cfg, seed).weights_for
    return sim.run(rounds), sim


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list:
    """Run every configured strategy arm for every seed.

    Returns the metrics rows; with ``out_dir`` they are also appended to
    ``metrics.jsonl`` and summarised in ``summary.csv``.
    """
    if cfg.kind not in ("cross_silo", "cross_device", "heterogeneous"):
        raise C.ConfigError(f"kind: run_experiment handles training runs, not {cfg.kind!r}")
    writer = MetricsWriter(out_dir) if out_dir is not None else None
    rows: list = []
    for seed in cfg.seeds:
        for strategy, weighting in _arms(cfg):
            arm = arm_name(strategy, weighting)
            try:
                reports, sim = run_arm(cfg, seed, strategy, weighting)
            except Exception as exc:
                raise RuntimeError(f"{cfg.kind} experiment {cfg.name!r}, seed {seed}, arm {arm}: {exc}") from exc
            recs = records_from_reports(cfg, arm, seed, reports, sim.fed.server_unlabeled.label_reads)
            log.info("seed %d %-14s final mean accuracy %.4f", seed, arm, reports[-1].mean_accuracy)
            rows.extend(recs)
            if writer:
                writer.write(recs)
    if writer:
        writer.write_summary(
            "summary.csv",
            ["arm", "seed", "rounds", "final_mean_accuracy", "best_mean_accuracy", "bytes_up_total", "bytes_down_total"],
            _summary_rows(rows),
        )
    return rows


def _summary_rows(rows: Sequence[MetricsRecord]) -> list:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.arm, r.seed), []).append(r)
    out = []
    for (arm, seed), rs in groups.items():
        rs = sorted(rs, key=lambda r: r.round)
        out.append([
            arm,
            seed,
            len(rs),
            rs[-1].mean_accuracy,
            max(r.mean_accuracy for r in rs),
            sum(r.bytes_up for r in rs),
            sum(r.bytes_down for r in rs),
        ])
    return out


def accuracy_curves(rows: Sequence[MetricsRecord]) -> dict:
    """``{(arm, seed): [mean accuracy per round]}``."""
    out: dict = {}
    for r in sorted(rows, key=lambda r: (r.arm, r.seed, r.round)):
        out.setdefault((r.arm, r.seed), []).append(r.mean_accuracy)
    return out


def rounds_to_reach(curve: Sequence[float], target: float) -> Optional[int]:
    """1-based number of rounds until ``curve`` first reaches ``target``."""
    for i, a in enumerate(curve):
        if a >= target:
            return i + 1
    return None


# ----------------------------------------------------------------------------
# Ceiling oracle
# ----------------------------------------------------------------------------


@dataclass
class CeilingOracle:
    """Domain classifier trained on pooled client data.

    Only a simulator can build this: it reads every client's raw inputs.
    """

    arch: MlpArch
    params: object
    domains: list
    client_domain_of: list
    domain_accuracy: dict

    def posterior(self, x) -> np.ndarray:
        return forward(self.arch, self.params, x)[1]

    def weights_for(self, x, selected: Sequence[int]) -> np.ndarray:
        post = self.posterior(x)
        doms = [self.client_domain_of[k] for k in selected]
        share = {d: doms.count(d) for d in set(doms)}
        w = np.column_stack([post[:, self.domains.index(d)] / share[d] for d in doms])
        total = w.sum(axis=1, keepdims=True)
        return np.where(total > 0, w / np.where(total > 0, total, 1.0), 1.0 / len(selected))


def ceiling_oracle(fed: FederatedDataset, cfg: ExperimentConfig, seed: int, epochs: int = 20) -> CeilingOracle:
    domains = sorted(set(fed.client_domain_of))
    pooled = LabeledSet.concat(fed.clients)
    targets = np.array([domains.index(d) for d in pooled.domain_ids])
    arch = MlpArch(cfg.dataset.input_dim, tuple(cfg.model.hidden_dims), len(domains))
    rng = make_rng(seed, "ceiling")
    params = train_supervised(
        arch, init_params(arch, rng), pooled.features, targets,
        epochs=epochs, lr=cfg.optim.lr0, batch_size=cfg.optim.batch_size, rng=rng, momentum=cfg.optim.momentum,
    )
    accs = {}
    for d, s in sorted(fed.server_eval.items()):
        accs[d] = accuracy(arch, params, s.features, np.full(len(s), domains.index(d)))
    return CeilingOracle(arch, params, domains, list(fed.client_domain_of), accs)


# ----------------------------------------------------------------------------
# Suites
# ----------------------------------------------------------------------------


@dataclass
class AblationTable:
    arms: list
    domains: list
    per_seed: dict  # (arm, seed) -> {domain: acc, "avg": mean}

    def mean_row(self, arm: str) -> dict:
        rows = [v for (a, _), v in self.per_seed.items() if a == arm]
        keys = list(rows[0])
        return {k: float(np.mean([r[k] for r in rows])) for k in keys}

    def seeds(self) -> list:
        return sorted({s for _, s in self.per_seed})

    def format(self) -> str:
        head = ["arm"] + [f"domain{d}" for d in self.domains] + ["Avg"]
        lines = ["  ".join(f"{h:>9}" for h in head)]
        for arm in self.arms:
            m = self.mean_row(arm)
            lines.append("  ".join([f"{arm:>9}"] + [f"{m[d]:9.3f}" for d in self.domains] + [f"{m['avg']:9.3f}"]))
        return "\n".join(lines)


def weighting_ablation(cfg: ExperimentConfig, out_dir=None, arms: Sequence[str] = ABLATION_ARMS) -> AblationTable:
    """Distill the same teachers under each weighting rule."""
    writer = MetricsWriter(out_dir) if out_dir is not None else None
    per_seed: dict = {}
    domains: list = []
    for seed in cfg.seeds:
        fed = build_federation(cfg.dataset, seed, cfg.federation.lambda_weights)
        for arm in arms:
            reports, sim = run_arm(cfg, seed, "fedd3a", arm, federation=fed)
            last = reports[-1]
            domains = sorted(last.domain_accuracy)
            per_seed[(arm, seed)] = {**last.domain_accuracy, "avg": last.mean_accuracy}
            if writer:
                writer.write(records_from_reports(cfg, arm, seed, reports[-1:], fed.server_unlabeled.label_reads))
    table = AblationTable(list(arms), domains, per_seed)
    if writer:
        writer.write_summary(
            "ablation.csv",
            ["arm"] + [f"domain{d}" for d in domains] + ["Avg"],
            [[a] + [table.mean_row(a)[d] for d in domains] + [table.mean_row(a)["avg"]] for a in arms],
        )
    return table


def one_class_clients(
    num_clients: int, latent_dim: int, n_train: int, n_test: int, seed: int, mean_scale: float = 0.5
) -> tuple[list, LabeledSet]:
    """Client ``c`` holds only class ``c``, drawn from its own orthogonal block.

    Class ``c`` is ``U_c (m_c + g)`` with ``U_c`` a ``latent_dim``-column block of
    one random orthogonal matrix, ``|m_c| = mean_scale`` and ``g ~ N(0, I)``.
    """
    rng = make_rng(seed, "one-class")
    d = num_clients * latent_dim
    q = random_orthogonal(rng, d)
    clients, tests = [], []
    for c in range(num_clients):
        u = q[:, c * latent_dim:(c + 1) * latent_dim]
        m = rng.standard_normal(latent_dim)
        m *= mean_scale / np.linalg.norm(m)
        make = lambda n: (m + rng.standard_normal((n, latent_dim))) @ u.T
        clients.append(LabeledSet(make(n_train), np.full(n_train, c), np.full(n_train, c)))
        tests.append(LabeledSet(make(n_test), np.full(n_test, c), np.full(n_test, c)))
    return clients, LabeledSet.concat(tests)


@dataclass
class ProbeResult:
    projection: dict  # seed -> accuracy
    prototype: dict

    def summary(self) -> dict:
        p, q = list(self.projection.values()), list(self.prototype.values())
        return {
            "projection_mean": float(np.mean(p)), "projection_std": float(np.std(p)),
            "prototype_mean": float(np.mean(q)), "prototype_std": float(np.std(q)),
        }


def domain_classification_probe(
    cfg: ExperimentConfig, out_dir=None, num_clients: int = 10, n_train: int = 200, n_test: int = 100
) -> ProbeResult:
    """Classify held-out samples by their closest client, two ways.

    Each client summarises its features once, using the untrained global
    backbone: a projector (scored by ``cos(u, P u)``) or a mean-feature
    prototype (scored by cosine).  The predicted client is the argmax.
    """
    proj, proto = {}, {}
    latent = cfg.dataset.latent_dim
    for seed in cfg.seeds:
        clients, test = one_class_clients(num_clients, latent, n_train, n_test, seed)
        arch = MlpArch(num_clients * latent, tuple(cfg.model.hidden_dims), num_clients)
        params = init_params(arch, make_rng(seed, "global-init"))
        feats = [features(arch, params, c.features) for c in clients]
        ps = [
            projection_iterative(
                z, cfg.subspace.ridge_alpha, mode=cfg.subspace.accumulation,
                batch_size=cfg.subspace.batch_size, variant=cfg.subspace.projection_variant,
            )
            for z in feats
        ]
        f_test = features(arch, params, test.features)
        proj[seed] = float(np.mean(affinity_matrix(ps, f_test).argmax(axis=1) == test.labels))
        proto[seed] = float(np.mean(prototype_scores([prototype(z) for z in feats], f_test).argmax(axis=1) == test.labels))
    result = ProbeResult(proj, proto)
    if out_dir is not None:
        writer = MetricsWriter(out_dir)
        h, lin = C.config_hash(cfg), C.lineage_hash(cfg)
        recs = [
            MetricsRecord("probe_domains", h, lin, method, seed, 0, acc)
            for seed in cfg.seeds
            for method, acc in (("projection", proj[seed]), ("prototype", proto[seed]))
        ]
        writer.write(recs)
        s = result.summary()
        writer.write_summary(
            "probe_domains.csv",
            ["method", "mean_accuracy", "std"],
            [["prototype", s["prototype_mean"], s["prototype_std"]], ["projection", s["projection_mean"], s["projection_std"]]],
        )
    return result


@dataclass
class OverlapReport:
    domains: list
    before: dict  # (arm, seed) -> {domain: acc, "all": mean}
    after: dict
    baseline_cfg: ExperimentConfig
    overlap_cfg: ExperimentConfig

    def delta(self, arm: str, seed: int, key) -> float:
        return self.after[(arm, seed)][key] - self.before[(arm, seed)][key]

    def rows(self) -> list:
        """Per arm and seed: per-domain accuracy after replacement, All, All_before."""
        out = []
        for (arm, seed), after in sorted(self.after.items()):
            out.append({
                "arm": arm, "seed": seed,
                **{f"domain{d}": after[d] for d in self.domains},
                "All": after["all"], "All_before": self.before[(arm, seed)]["all"],
            })
        return out


def server_overlap_probe(cfg: ExperimentConfig, out_dir=None) -> OverlapReport:
    """Re-run FedD3A and FedDF with the server pool drawn from client 1's domain."""
    base = C.replace(cfg, federation={"strategies": ["fedd3a", "feddf"]})
    overlap = C.replace(base, dataset={"server_style": "client1"})
    writer = MetricsWriter(out_dir) if out_dir is not None else None
    before, after, domains = {}, {}, []
    for seed in cfg.seeds:
        for tag, c, store in (("before", base, before), ("after", overlap, after)):
            for strategy, weighting in _arms(c):
                arm = arm_name(strategy, weighting)
                reports, sim = run_arm(c, seed, strategy, weighting)
                last = reports[-1]
                domains = sorted(last.domain_accuracy)
                store[(arm, seed)] = {**last.domain_accuracy, "all": last.mean_accuracy}
                if writer:
                    recs = records_from_reports(c, arm, seed, reports[-1:], sim.fed.server_unlabeled.label_reads)
                    for r in recs:
                        r.extra["phase"] = tag
                    writer.write(recs)
    report = OverlapReport(domains, before, after, base, overlap)
    if writer:
        rows = report.rows()
        header = list(rows[0])
        writer.write_summary("probe_overlap.csv", header, [[r[k] for k in header] for r in rows])
    return report


def overhead_ratio(feature_dim: int, total_params: float) -> float:
    return feature_dim ** 2 / total_params


def comm_report(cfg: ExperimentConfig, out_dir=None) -> list:
    """Per-round byte budget of each strategy for the configured model."""
    d = cfg.dataset
    arch = MlpArch(d.input_dim, tuple(cfg.model.hidden_dims), d.num_classes)
    m = cfg.federation.clients_per_round or cfg.num_clients
    ckpt = checkpoint_size(arch)
    proj = projection_wire_size(arch.feature_dim)
    rows = []
    for s in C.STRATEGIES:
        extra = proj if s == "fedd3a" else 0
        rows.append({
            "strategy": s,
            "clients_per_round": m,
            "bytes_down": m * ckpt,
            "bytes_up": m * (ckpt + extra),
            "projection_bytes": extra,
            "overhead_ratio": overhead_ratio(arch.feature_dim, arch.num_params) if s == "fedd3a" else 0.0,
        })
    rows.append({
        "strategy": "fedd3a-resnet34-reference",
        "clients_per_round": 1,
        "bytes_down": int(8 * 21.8e6),
        "bytes_up": int(8 * 21.8e6) + projection_wire_size(512),
        "projection_bytes": projection_wire_size(512),
        "overhead_ratio": overhead_ratio(512, 21.8e6),
    })
    if out_dir is not None:
        writer = MetricsWriter(out_dir)
        h, lin = C.config_hash(cfg), C.lineage_hash(cfg)
        writer.write([
            MetricsRecord("comm", h, lin, r["strategy"], 0, 0, float("nan"), bytes_up=r["bytes_up"],
                          bytes_down=r["bytes_down"], extra={"overhead_ratio": r["overhead_ratio"]})
            for r in rows
        ])
        header = list(rows[0])
        writer.write_summary("comm.csv", header, [[r[k] for k in header] for r in rows])
    return rows
