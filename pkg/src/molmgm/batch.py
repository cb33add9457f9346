"""Zero-padded stacks of molecules for batched forward passes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .molgraph import MolGraph


@dataclass(frozen=True)
class GraphBatch:
    atom_types: np.ndarray  # (B, N) int, 0 in padding
    bond_orders: np.ndarray  # (B, N, N) int, 0 = no bond
    atom_mask: np.ndarray  # (B, N) 1.0 for real atoms
    coords: np.ndarray  # (B, N, 3), 0 in padding
    sizes: tuple[int, ...]

    @classmethod
    def from_graphs(cls, graphs: Sequence[MolGraph], coords: Sequence[np.ndarray] | None = None) -> "GraphBatch":
        if not graphs:
            raise ValueError("empty batch")
        b = len(graphs)
        n = max(g.n_atoms for g in graphs)
        types = np.zeros((b, n), dtype=np.int64)
        orders = np.zeros((b, n, n), dtype=np.int64)
        mask = np.zeros((b, n))
        xyz = np.zeros((b, n, 3))
        for k, g in enumerate(graphs):
            m = g.n_atoms
            types[k, :m] = g.atom_types
            orders[k, :m, :m] = g.bond_matrix()
            mask[k, :m] = 1.0
            xyz[k, :m] = g.coords if coords is None else coords[k]
        return cls(types, orders, mask, xyz, tuple(g.n_atoms for g in graphs))

    @property
    def batch_size(self) -> int:
        return len(self.sizes)

    @property
    def n_max(self) -> int:
        return self.atom_types.shape[1]

    def flat_index(self, rows: Sequence[Sequence[int]]) -> np.ndarray:
        """Indices into the (B*N) flattening for per-molecule atom lists."""
        return np.array([k * self.n_max + i for k, r in enumerate(rows) for i in r], dtype=np.int64)


def pair_mask(atom_mask: np.ndarray | None, n: int) -> np.ndarray:
    """1.0 for distinct pairs of real atoms; shape (..., N, N)."""
    off = 1.0 - np.eye(n)
    if atom_mask is None:
        return off
    return off * atom_mask[..., :, None] * atom_mask[..., None, :]


def segment_matrix(counts: Sequence[int]) -> np.ndarray:
    """(R, B) one-hot assignment of R stacked rows to B molecules."""
    out = np.zeros((int(sum(counts)), len(counts)))
    start = 0
    for k, c in enumerate(counts):
        out[start:start + c, k] = 1.0
        start += c
    return out
