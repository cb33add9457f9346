import math

import numpy as np
import pytest

from molmgm import autodiff as ad
from molmgm.featurize import (
    N_EDGE_TYPES,
    AtomEmbedding,
    EdgeEmbedding,
    GeometryError,
    RBFBasis,
    cutoff,
    embed_atoms,
    embed_edges,
    one_hot,
    pair_geometry,
)
from molmgm.molgraph import MolGraph, generate_synthetic


def test_cutoff_examples():
    assert cutoff(0.0) == 1.0
    assert cutoff(5.0, 5.0) == pytest.approx(0.0, abs=1e-16)
    assert cutoff(2.5, 5.0) == pytest.approx(0.5, abs=1e-15)
    assert cutoff(7.0) == 0.0
    with pytest.raises(ValueError):
        cutoff(-0.1)


def test_rbf_params():
    b = RBFBasis(64, 5.0)
    assert np.all(np.diff(b.mu) > 0) and b.mu[0] == pytest.approx(math.exp(-5)) and b.mu[-1] == 1.0
    assert np.all(b.beta > 0)


def test_rbf_examples():
    b = RBFBasis(4, 5.0)
    assert not b(np.array([5.0, 6.0])).any()
    d = -math.log(b.mu[2])
    assert b(np.array(d))[2] == pytest.approx(cutoff(d), rel=1e-14)
    b.mu = np.array([0.5])
    b.beta = np.array([10.0])
    val = b(np.array(1.0))[0]
    assert val == pytest.approx(cutoff(1.0) * math.exp(-10 * (math.exp(-1) - 0.5) ** 2), rel=1e-14)
    # 0.5 * (cos(pi/5) + 1) = 0.9045085, exp(-10 * (exp(-1) - 0.5)**2) = 0.8398278
    assert val == pytest.approx(0.9045084972 * 0.8398277895, rel=1e-8)


def test_rbf_continuous_at_cutoff():
    assert np.abs(RBFBasis(64, 5.0)(np.array(5.0 - 1e-4))).max() < 1e-6


def test_rbf_value_and_array_paths_agree():
    b = RBFBasis(8)
    d = np.array([0.3, 1.7, 4.9])
    np.testing.assert_allclose(b(ad.Value(d)).data, b(d), rtol=1e-14)


def _two_atoms(dist):
    return MolGraph(np.array([[0.0, 0, 0], [dist, 0, 0]]), np.array([1, 3]), ((0, 1, 1),))


def test_embed_single_atom_has_no_neighbors():
    emb = AtomEmbedding(2, 2, np.random.default_rng(0))
    g = MolGraph(np.array([[0.3, -0.2, 1.0]]), np.array([2]))
    out = embed_atoms(g, emb, RBFBasis(2)).data
    x = np.concatenate([g.coords, one_hot(g.atom_types)], axis=1)
    node = x @ emb.node.weight.data + emb.node.bias.data
    np.testing.assert_allclose(out, np.concatenate([node, np.zeros((1, 2))], axis=1) @ emb.mix.weight.data, rtol=1e-14)


def test_embed_beyond_cutoff_no_neighbors():
    emb = AtomEmbedding(2, 2, np.random.default_rng(1))
    g = _two_atoms(6.0)
    out = embed_atoms(g, emb, RBFBasis(2)).data
    x = np.concatenate([g.coords, one_hot(g.atom_types)], axis=1)
    node = x @ emb.node.weight.data + emb.node.bias.data
    np.testing.assert_allclose(out, np.concatenate([node, np.zeros((2, 2))], axis=1) @ emb.mix.weight.data, rtol=1e-14)


def test_embed_two_atoms_scalar_oracle():
    emb = AtomEmbedding(2, 2, np.random.default_rng(2))
    basis = RBFBasis(2)
    g = _two_atoms(1.0)
    out = embed_atoms(g, emb, basis).data
    # hand evaluation, one scalar at a time
    phi = 0.5 * (math.cos(math.pi * 1.0 / 5.0) + 1.0)
    rbf = [phi * math.exp(-basis.beta[k] * (math.exp(-1.0) - basis.mu[k]) ** 2) for k in range(2)]
    feats = [[0.0, 0.0, 0.0] + [1.0 if t == 1 else 0.0 for t in range(10)],
             [1.0, 0.0, 0.0] + [1.0 if t == 3 else 0.0 for t in range(10)]]
    wn, bn = emb.node.weight.data, emb.node.bias.data
    wg, bg = emb.neigh.weight.data, emb.neigh.bias.data
    wr, wa = emb.radial.weight.data, emb.mix.weight.data
    for i, j in ((0, 1), (1, 0)):
        node = [sum(feats[i][a] * wn[a, c] for a in range(13)) + bn[c] for c in range(2)]
        nb = [sum(feats[j][a] * wg[a, c] for a in range(13)) + bg[c] for c in range(2)]
        gate = [sum(rbf[k] * wr[k, c] for k in range(2)) for c in range(2)]
        neigh = [nb[c] * gate[c] for c in range(2)]
        cat = node + neigh
        expect = [sum(cat[a] * wa[a, c] for a in range(4)) for c in range(2)]
        np.testing.assert_allclose(out[i], expect, rtol=1e-12)


def test_neighbor_contribution_vanishes_across_cutoff():
    emb = AtomEmbedding(4, 4, np.random.default_rng(3))
    basis = RBFBasis(4)
    inside = embed_atoms(_two_atoms(4.99), emb, basis).data
    outside = embed_atoms(_two_atoms(5.01), emb, basis).data
    # atom 0 sits at the origin in both, so only its neighbour term can differ
    x0 = np.concatenate([[0.0, 0, 0], one_hot(np.array([1]))[0]])
    node0 = x0 @ emb.node.weight.data + emb.node.bias.data
    np.testing.assert_allclose(outside[0], np.concatenate([node0, np.zeros(4)]) @ emb.mix.weight.data, rtol=1e-14)
    assert not np.array_equal(inside[0], outside[0])


def test_embed_atoms_permutation_equivariant():
    rng = np.random.default_rng(4)
    emb, basis = AtomEmbedding(8, 6, rng), RBFBasis(6)
    for g in generate_synthetic(9, 5, (4, 10)):
        base = embed_atoms(g, emb, basis).data
        for _ in range(5):
            perm = rng.permutation(g.n_atoms)
            out = embed_atoms(g.permuted(perm), emb, basis).data
            assert np.array_equal(out[perm], base)


def test_embed_edges_examples():
    emb = EdgeEmbedding(3, np.random.default_rng(0))
    assert emb.table.shape == (N_EDGE_TYPES, 3)
    none = MolGraph(np.eye(3), np.array([0, 0, 0]))
    e = embed_edges(none, emb).data
    assert np.array_equal(e, np.broadcast_to(emb.table.data[0], e.shape))
    h2 = MolGraph(np.array([[0.0, 0, 0], [0, 0, 0.74]]), np.array([0, 0]), ((0, 1, 1),))
    e = embed_edges(h2, emb).data
    assert np.array_equal(e[0, 1], emb.table.data[1]) and np.array_equal(e[1, 0], emb.table.data[1])
    assert np.array_equal(e[0, 0], emb.table.data[0])
    g = generate_synthetic(1, 1, (8, 8))[0]
    perm = np.random.default_rng(1).permutation(8)
    base, moved = embed_edges(g, emb).data, embed_edges(g.permuted(perm), emb).data
    assert np.array_equal(moved[np.ix_(perm, perm)], base)


def test_pair_geometry_coincident():
    with pytest.raises(GeometryError):
        pair_geometry(np.zeros((2, 3)))
    geo = pair_geometry(np.zeros((2, 3)), allow_coincident=True)
    assert not geo.unit.data.any() and not geo.dist.data.any()
