"""Distill the same teachers under each weighting rule.

After one round of long local training, the server combines the clients'
predictions on its unlabeled pool with uniform, random, hard affinity, soft
affinity and oracle-domain weights, then reports the distilled student's
per-domain accuracy averaged over seeds.

    python demos/weighting_rules.py [num_seeds]
"""
import sys
from pathlib import Path

from fedkd.bench import weighting_ablation
from fedkd.config import load_config, replace

num_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 3
cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "ablation.toml")
cfg = replace(cfg, seeds=list(range(num_seeds)))

table = weighting_ablation(cfg)
print(table.format())
print()
for s in table.seeds():
    row = {a: table.per_seed[(a, s)]["avg"] for a in table.arms}
    chain = row["ceiling"] >= row["soft"] >= row["onehot"] >= max(row["avg"], row["random"])
    print(f"seed {s}: " + "  ".join(f"{a}={v:.3f}" for a, v in row.items()) + f"  ordered={chain}")
