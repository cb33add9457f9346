"""Radial basis expansion, atom embeddings and bond-type embeddings."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .batch import pair_mask
from .molgraph import ELEMENTS, MolGraph
from .nn import Linear, Module, Parameter

N_EDGE_TYPES = 5  # none, single, double, triple, aromatic


class GeometryError(ValueError):
    pass


def cutoff(d, d_cut: float = 5.0):
    """Cosine cutoff 0.5*(cos(pi*d/d_cut)+1) inside d_cut, 0 beyond.

    Returns a Value for Value input, otherwise an ndarray.
    """
    raw = d.data if isinstance(d, Value) else np.asarray(d, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("cutoff is defined for non-negative distances only")
    inside = (raw <= d_cut).astype(np.float64)
    if isinstance(d, Value):
        return (ad.cos(d * (math.pi / d_cut)) + 1.0) * (0.5 * inside)
    return 0.5 * (np.cos(np.pi * raw / d_cut) + 1.0) * inside


@dataclass
class RBFBasis:
    """Fixed exponential-normal basis: centers ``mu`` and common width ``beta``."""

    k: int = 64
    d_cut: float = 5.0

    def __post_init__(self):
        lo = math.exp(-self.d_cut)
        self.mu = np.linspace(lo, 1.0, self.k)
        self.beta = np.full(self.k, (2.0 * (1.0 - lo) / self.k) ** -2)

    def __call__(self, d):
        """Expand distances (any shape) into a trailing axis of ``k`` channels."""
        if isinstance(d, Value):
            phi = cutoff(d, self.d_cut)
            e = ad.exp(d * -1.0)
            z = ad.expand_dims(e, -1) - self.mu
            return ad.exp(z * z * (-self.beta)) * ad.expand_dims(phi, -1)
        d = np.asarray(d, dtype=np.float64)
        phi = cutoff(d, self.d_cut)
        z = np.exp(-d)[..., None] - self.mu
        return np.exp(-self.beta * z * z) * phi[..., None]


def rbf_expand(d, basis: RBFBasis):
    return basis(d)


@dataclass
class PairGeometry:
    dist: Value  # (..., N, N), zero on the diagonal and for padded atoms
    unit: Value  # (..., N, N, 3) unit vectors r_i - r_j, zero where undefined
    mask: np.ndarray  # (..., N, N) 1.0 for distinct real atoms

    @property
    def offdiag(self) -> np.ndarray:
        return self.mask


def pair_geometry(coords, allow_coincident: bool = False, atom_mask: np.ndarray | None = None) -> PairGeometry:
    """Distances and directions for coordinates of shape (..., N, 3)."""
    coords = ad.as_value(coords)
    n = coords.shape[-2]
    diff = ad.expand_dims(coords, -2) - ad.expand_dims(coords, -3)
    sq = ad.vsum(diff * diff, axis=-1)
    valid = pair_mask(atom_mask, n)
    coincident = (sq.data <= 0.0) & (valid > 0)
    if coincident.any() and not allow_coincident:
        idx = np.argwhere(coincident)[0]
        raise GeometryError(f"atoms {idx[-2]} and {idx[-1]} coincide; direction undefined")
    pad = (1.0 - valid) + coincident
    root = ad.sqrt(sq + pad)
    return PairGeometry(root * (1.0 - pad), diff / ad.expand_dims(root, -1), valid)


def one_hot(types: np.ndarray, n: int = len(ELEMENTS)) -> np.ndarray:
    return np.eye(n)[np.asarray(types)]


class AtomEmbedding(Module):
    """Node embedding of [coords; one-hot type], plus an RBF-gated neighborhood sum."""

    def __init__(self, d_model: int, k_rbf: int, rng: np.random.Generator):
        d_in = 3 + len(ELEMENTS)
        self.node = Linear(d_in, d_model, rng)
        self.neigh = Linear(d_in, d_model, rng)
        self.radial = Linear(k_rbf, d_model, rng, bias=False)
        self.mix = Linear(2 * d_model, d_model, rng, bias=False)

    def __call__(self, coords, atom_types, rbf: Value, mask: np.ndarray) -> Value:
        """``mask`` is the (..., N, N) pair mask; excluded pairs add nothing."""
        x = ad.concat([ad.as_value(coords), Value(one_hot(atom_types))], axis=-1)
        e_node = self.node(x)
        nb = self.neigh(x)
        gate = self.radial(rbf) * mask[..., None]
        e_neigh = ad.invariant_sum(ad.expand_dims(nb, -3) * gate, axis=-2)
        return self.mix(ad.concat([e_node, e_neigh], axis=-1))


class EdgeEmbedding(Module):
    def __init__(self, d_model: int, rng: np.random.Generator):
        self.table = Parameter(rng.normal(0.0, 1.0, size=(N_EDGE_TYPES, d_model)))

    def __call__(self, bond_matrix: np.ndarray) -> Value:
        return bond_onehot(bond_matrix) @ self.table


def bond_onehot(bond_matrix: np.ndarray) -> Value:
    return Value(np.eye(N_EDGE_TYPES)[np.asarray(bond_matrix)])


def embed_atoms(g: MolGraph, emb: AtomEmbedding, basis: RBFBasis, coords=None) -> Value:
    coords = g.coords if coords is None else coords
    geo = pair_geometry(coords)
    return emb(coords, g.atom_types, basis(geo.dist), geo.mask)


def embed_edges(g: MolGraph, emb: EdgeEmbedding) -> Value:
    return emb(g.bond_matrix())
