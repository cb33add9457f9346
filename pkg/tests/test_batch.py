import numpy as np

from molmgm.batch import GraphBatch, pair_mask, segment_matrix
from molmgm.molgraph import generate_synthetic


def test_from_graphs_pads():
    gs = generate_synthetic(2, 3, (3, 7))
    b = GraphBatch.from_graphs(gs)
    assert b.batch_size == 3 and b.n_max == max(g.n_atoms for g in gs)
    for k, g in enumerate(gs):
        n = g.n_atoms
        assert b.atom_mask[k].sum() == n
        assert np.array_equal(b.coords[k, :n], g.coords) and not b.coords[k, n:].any()
        assert np.array_equal(b.bond_orders[k, :n, :n], g.bond_matrix())
    idx = b.flat_index([[0], [1, 2], []])
    assert idx.tolist() == [0, b.n_max + 1, b.n_max + 2]


def test_pair_mask_and_segments():
    m = pair_mask(np.array([[1.0, 1.0, 0.0]]), 3)
    assert m.tolist() == [[[0, 1, 0], [1, 0, 0], [0, 0, 0]]]
    assert np.array_equal(pair_mask(None, 2), 1 - np.eye(2))
    s = segment_matrix([2, 1])
    assert s.tolist() == [[1, 0], [1, 0], [0, 1]]
