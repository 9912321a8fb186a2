"""``fedkd`` command-line runner.

    fedkd run configs/cross_silo.toml --seed 3 --out-dir out/
    fedkd ablate configs/ablation.toml
    fedkd probe-domains configs/probe_domains.toml
    fedkd probe-overlap configs/probe_overlap.toml
    fedkd comm configs/comm.toml

Output goes to ``--out-dir``, else ``$FEDKD_OUT``, else ``./fedkd-out``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import bench
from . import config as C

log = logging.getLogger("fedkd")

RUN_KINDS = ("cross_silo", "cross_device", "heterogeneous")


def _out_dir(arg) -> Path:
    return Path(arg or os.environ.get("FEDKD_OUT") or "fedkd-out")


def _apply_overrides(cfg: C.ExperimentConfig, args) -> C.ExperimentConfig:
    over: dict = {}
    if args.seed is not None:
        over["seeds"] = [args.seed]
    if args.strategy:
        over["federation"] = {"strategies": [args.strategy]}
    return C.replace(cfg, **over) if over else cfg


def _cmd_run(cfg, out, args) -> None:
    if cfg.kind not in RUN_KINDS:
        raise C.ConfigError(f"kind: 'run' expects one of {list(RUN_KINDS)}, got {cfg.kind!r}")
    rows = bench.run_experiment(cfg, out)
    curves = bench.accuracy_curves(rows)
    for (arm, seed), curve in sorted(curves.items()):
        print(f"seed {seed:<3d} {arm:<14s} final {curve[-1]:.4f}  best {max(curve):.4f}")


def _cmd_ablate(cfg, out, args) -> None:
    table = bench.weighting_ablation(cfg, out)
    print(table.format())


def _cmd_probe_domains(cfg, out, args) -> None:
    s = bench.domain_classification_probe(cfg, out).summary()
    print(f"prototype   {s['prototype_mean']:.4f} +/- {s['prototype_std']:.4f}")
    print(f"projection  {s['projection_mean']:.4f} +/- {s['projection_std']:.4f}")


def _cmd_probe_overlap(cfg, out, args) -> None:
    report = bench.server_overlap_probe(cfg, out)
    for row in report.rows():
        print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


def _cmd_comm(cfg, out, args) -> None:
    for r in bench.comm_report(cfg, out):
        print(
            f"{r['strategy']:<26s} up {r['bytes_up']:>12d}  down {r['bytes_down']:>12d}  "
            f"overhead {100 * r['overhead_ratio']:.3f}%"
        )


COMMANDS = {
    "run": _cmd_run,
    "ablate": _cmd_ablate,
    "probe-domains": _cmd_probe_domains,
    "probe-overlap": _cmd_probe_overlap,
    "comm": _cmd_comm,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedkd", description="Federated distillation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="TOML experiment config")
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--out-dir", help="output directory (default: $FEDKD_OUT or ./fedkd-out)")
        p.add_argument("--strategy", choices=C.STRATEGIES, help="run only this strategy")
        p.add_argument("--quiet", action="store_true", help="suppress progress logging")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = _apply_overrides(C.load_config(args.config), args)
        out = _out_dir(args.out_dir)
        COMMANDS[args.command](cfg, out, args)
    except (C.ConfigError, FileNotFoundError) as exc:
        print(f"fedkd: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced with context, nonzero exit
        print(f"fedkd: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    log.info("metrics written to %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
