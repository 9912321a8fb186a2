"""Score samples against client feature subspaces.

Each of three clients streams features from its own 4-dimensional block of a
12-dimensional space. The server receives only each client's projector and
asks, for a fresh sample, which client it most resembles.

    python demos/subspace_affinity.py
"""
import numpy as np

from fedkd.numerics import make_rng, random_orthogonal
from fedkd.subspace import (
    affinity_matrix,
    projection_closed_form,
    projection_iterative,
    projection_wire_size,
    prototype,
    prototype_scores,
    teacher_weights_batch,
)

rng = make_rng(0, "demo")
d, k, n = 12, 4, 200
basis = random_orthogonal(rng, d)
blocks = [basis[:, i * k:(i + 1) * k] for i in range(3)]
# small client means: the spread, not the centre, is what tells clients apart
means = [0.3 * rng.standard_normal(k) for _ in blocks]
client_feats = [(m + rng.standard_normal((n, k))) @ b.T for m, b in zip(means, blocks)]

# one pass over each client's stream, no matrix inverse on the client
projs = [projection_iterative(z, ridge_alpha=0.01) for z in client_feats]
err = max(np.abs(p.p - projection_closed_form(z, 0.01).p).max() for p, z in zip(projs, client_feats))
print(f"streamed vs closed-form projector, max entry gap {err:.1e}")
print(f"projector upload for d_f={d}: {projection_wire_size(d)} bytes")

# probe samples drawn from client 1's block
probes = rng.standard_normal((5, k)) @ blocks[1].T
print("\ncosine(u, Pu) per client:")
print(np.round(affinity_matrix(projs, probes), 3))
print("teacher weights per sample:")
print(np.round(teacher_weights_batch(projs, probes), 3))

# compare with mean-feature prototypes on a held-out mix
tests = [(m + rng.standard_normal((100, k))) @ b.T for m, b in zip(means, blocks)]
x = np.concatenate(tests)
y = np.repeat(np.arange(3), 100)
by_proj = affinity_matrix(projs, x).argmax(axis=1)
by_proto = prototype_scores([prototype(z) for z in client_feats], x).argmax(axis=1)
print(f"\ndomain accuracy: projector {np.mean(by_proj == y):.3f}, prototype {np.mean(by_proto == y):.3f}")
