import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedkd.numerics import ShapeError, make_rng, softmax
from fedkd.subspace import (
    ProjectionAccumulator,
    ProjectionMatrix,
    TeacherWeights,
    affinity,
    affinity_matrix,
    batch_means,
    deserialize_projection,
    onehot_rows,
    onehot_weights,
    projection_closed_form,
    projection_iterative,
    projection_wire_size,
    prototype_scores,
    serialize_projection,
    teacher_weights,
    teacher_weights_batch,
    weights_from_scores,
)


def zscore_softmax_bruteforce(r):
    """Scores -> weights with plain Python arithmetic; independent of numpy helpers."""
    m = len(r)
    mean = sum(r) / m
    var = sum((x - mean) ** 2 for x in r) / m
    z = [0.0] * m if var <= 1e-12 else [(x - mean) / math.sqrt(var) for x in r]
    e = [math.exp(v) for v in z]
    return [v / sum(e) for v in e]


def check_projector(p: ProjectionMatrix):
    np.testing.assert_allclose(p.p, p.p.T, atol=1e-8)
    ev = np.linalg.eigvalsh(p.p)
    assert ev.min() >= -1e-8 and ev.max() <= 1 + 1e-8


def test_empty_stream_is_zero():
    p = projection_iterative(np.zeros((0, 4)), 0.01)
    np.testing.assert_array_equal(p.p, np.zeros((4, 4)))
    p = projection_iterative([], 0.01, dim=3)
    assert p.sample_count == 0 and not p.p.any()
    with pytest.raises(ValueError):
        projection_iterative([], 0.01)


def test_single_unit_vector():
    e1 = np.eye(5)[0]
    expected = np.outer(e1, e1) / 1.01
    it = projection_iterative(e1[None, :], 0.01)
    cf = projection_closed_form(e1[None, :], 0.01)
    np.testing.assert_allclose(it.p, expected, atol=1e-12)
    np.testing.assert_allclose(cf.p, expected, atol=1e-12)
    assert affinity(it, e1) == pytest.approx(1.0)


@pytest.mark.parametrize("n", [1, 5, 50])
@pytest.mark.parametrize("d", [4, 16, 64])
@pytest.mark.parametrize("alpha", [1e-3, 1e-2, 1.0])
def test_iterative_matches_closed_form(n, d, alpha):
    z = make_rng(n * 1000 + d, "z").standard_normal((n, d))
    it = projection_iterative(z, alpha)
    cf = projection_closed_form(z, alpha)
    assert np.max(np.abs(it.p - cf.p)) <= 1e-8
    check_projector(it)
    check_projector(cf)


def test_closed_form_examples():
    z = np.zeros((3, 4))
    np.testing.assert_array_equal(projection_closed_form(z, 0.01).p, np.zeros((4, 4)))
    full = 10.0 * make_rng(0).standard_normal((30, 6))
    p = projection_closed_form(full, 1e-6)
    assert np.max(np.abs(p.p - np.eye(6))) < 1e-6


def test_stream_of_vectors_and_dimension_drift():
    z = make_rng(1).standard_normal((6, 3))
    a = projection_iterative(list(z), 0.01)
    b = projection_iterative(z, 0.01)
    np.testing.assert_array_equal(a.p, b.p)
    with pytest.raises(ShapeError):
        projection_iterative([np.ones(3), np.ones(4)], 0.01)
    acc = ProjectionAccumulator(3, 0.01)
    acc.update(np.ones(3))
    with pytest.raises(ShapeError):
        acc.update(np.ones(2))


def test_batch_mean_mode():
    z = make_rng(2).standard_normal((70, 5))
    means = batch_means(z, 32)
    assert means.shape == (3, 5)
    np.testing.assert_allclose(means[2], z[64:].mean(axis=0))
    p = projection_iterative(z, 0.01, mode="batch_mean", batch_size=32)
    assert p.sample_count == 3
    np.testing.assert_allclose(p.p, projection_closed_form(means, 0.01).p, atol=1e-8)


def test_unscaled_variant_differs():
    z = make_rng(3).standard_normal((10, 4))
    scaled = projection_iterative(z, 0.01)
    literal = projection_iterative(z, 0.01, variant="paper_literal")
    acc = ProjectionAccumulator(4, 0.01)
    acc.update_many(z)
    np.testing.assert_allclose(literal.p, np.eye(4) - acc.p_hat, atol=1e-12)
    assert not np.allclose(scaled.p, literal.p)


def test_affinity_examples():
    rng = make_rng(4)
    basis = np.linalg.qr(rng.standard_normal((8, 8)))[0]
    z = rng.standard_normal((40, 3)) @ basis[:, :3].T
    p = projection_iterative(z, 1e-3)
    inside = basis[:, :3] @ np.array([0.3, -1.0, 2.0])
    assert affinity(p, inside) >= 0.99
    assert abs(affinity(p, basis[:, 5])) < 1e-6
    assert affinity(p, np.zeros(8)) == 0.0
    with pytest.raises(ShapeError):
        affinity(p, np.ones(3))


@given(st.floats(0.01, 100.0))
@settings(max_examples=25, deadline=None)
def test_affinity_scale_invariant(scale):
    z = make_rng(5).standard_normal((10, 6))
    p = projection_iterative(z, 0.01)
    u = make_rng(6).standard_normal(6)
    assert affinity(p, scale * u) == pytest.approx(affinity(p, u), abs=1e-12)


def _proj_for(rs):
    """Projectors whose affinity with e1 equals each requested score exactly."""
    out = []
    for r in rs:
        c, s = r, math.sqrt(1 - r * r)
        # P = v v^T with v = (c, s); then P e1 = c v and cos(e1, P e1) = c
        v = np.array([c, s])
        out.append(ProjectionMatrix(np.outer(v, v), 0.01, 1))
    return out


def test_teacher_weights_examples():
    tw = teacher_weights(_proj_for([0.9, 0.5, 0.1]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(tw.raw_cosines, [0.9, 0.5, 0.1], atol=1e-12)
    np.testing.assert_allclose(tw.weights, [0.7245, 0.2129, 0.0626], atol=1e-3)
    np.testing.assert_allclose(tw.weights, zscore_softmax_bruteforce([0.9, 0.5, 0.1]), atol=1e-12)
    single = teacher_weights(_proj_for([0.4]), np.array([1.0, 0.0]))
    np.testing.assert_array_equal(single.weights, [1.0])
    flat = teacher_weights(_proj_for([0.3, 0.3, 0.3]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(flat.weights, [1 / 3] * 3)
    with pytest.raises(ShapeError):
        teacher_weights(_proj_for([0.3]) + [ProjectionMatrix(np.eye(3), 0.01, 1)], np.ones(2))


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=8), st.floats(-5, 5), st.randoms(use_true_random=False))
def test_weights_from_scores_properties(r, shift, rnd):
    w = weights_from_scores(np.array(r))
    assert abs(w.sum() - 1) <= 1e-9 and np.all(w >= 0)
    np.testing.assert_allclose(w, zscore_softmax_bruteforce(r), atol=1e-9)
    np.testing.assert_allclose(weights_from_scores(np.array(r) + shift), w, atol=1e-9)
    perm = list(range(len(r)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(weights_from_scores(np.array(r)[perm]), w[perm], atol=1e-12)


def test_teacher_weights_batch_matches_single():
    rng = make_rng(7)
    projs = [projection_iterative(rng.standard_normal((5, 4)), 0.01) for _ in range(3)]
    x = rng.standard_normal((6, 4))
    batch = teacher_weights_batch(projs, x)
    for i in range(6):
        np.testing.assert_allclose(batch[i], teacher_weights(projs, x[i]).weights, atol=1e-12)
    assert affinity_matrix(projs, x).shape == (6, 3)


def _orthogonal_clients(alpha, seed=0, d=16, k=4, n=50):
    rng = make_rng(seed, "orth")
    q = np.linalg.qr(rng.standard_normal((d, d)))[0]
    blocks = [q[:, :k], q[:, k:2 * k]]
    feats = [rng.standard_normal((n, k)) @ b.T for b in blocks]
    feats = [f / np.linalg.norm(f, axis=1, keepdims=True) for f in feats]
    projs = [projection_iterative(f, alpha) for f in feats]
    probes = rng.standard_normal((200, k)) @ blocks[0].T
    return projs, probes


@pytest.mark.parametrize("alpha", [1e-3, 1e-2])
def test_separation_two_orthogonal_clients(alpha):
    projs, probes = _orthogonal_clients(alpha)
    w = teacher_weights_batch(projs, probes)
    # Two scores always standardize to +1 and -1, which caps the top weight.
    cap = math.e / (math.e + 1 / math.e)
    assert cap == pytest.approx(0.8808, abs=1e-4)
    np.testing.assert_allclose(w[:, 0], cap, atol=1e-9)


def test_separation_cap_is_exact_for_any_two_scores():
    for r in ([0.99, 0.0], [0.51, 0.5], [1.0, -1.0]):
        assert weights_from_scores(np.array(r))[0] == pytest.approx(math.e / (math.e + 1 / math.e))


def test_onehot_examples():
    tw = TeacherWeights(np.array([0.7, 0.2, 0.1]), np.zeros(3))
    np.testing.assert_array_equal(onehot_weights(tw).weights, [1, 0, 0])
    tie = TeacherWeights(np.array([0.5, 0.5]), np.zeros(2))
    np.testing.assert_array_equal(onehot_weights(tie).weights, [1, 0])
    rows = onehot_rows(softmax(make_rng(0).standard_normal((5, 4)), axis=1))
    np.testing.assert_array_equal(rows.sum(axis=1), np.ones(5))


def test_wire_round_trip():
    p = projection_iterative(make_rng(8).standard_normal((7, 6)), 0.05)
    blob = serialize_projection(p)
    assert blob[:4] == b"FD3P"
    assert len(blob) == projection_wire_size(6) == p.nbytes
    back = deserialize_projection(blob, expected_dim=6)
    assert back.p.tobytes() == p.p.tobytes()
    assert (back.ridge_alpha, back.sample_count) == (0.05, 7)
    assert projection_wire_size(512) == 512 * 512 * 8 + 28
    with pytest.raises(ValueError):
        deserialize_projection(blob[:-1])
    with pytest.raises(ValueError):
        deserialize_projection(blob[:10])
    with pytest.raises(ValueError, match="magic"):
        deserialize_projection(b"NOPE" + blob[4:])
    with pytest.raises(ShapeError):
        deserialize_projection(blob, expected_dim=5)


def test_prototype_scores():
    protos = [np.array([1.0, 0.0]), np.array([0.0, 2.0])]
    s = prototype_scores(protos, [[3.0, 0.0], [0.0, 0.0]])
    np.testing.assert_allclose(s, [[1.0, 0.0], [0.0, 0.0]])
