"""Coordinate-free position encoders over the bond graph.

``Encoder2D`` is the relational transformer with every geometric input removed;
``RWSEEncoder`` swaps it for random-walk return probabilities. Neither accepts
coordinates, so their outputs cannot depend on geometry.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .batch import GraphBatch, pair_mask
from .encoder3d import merge_heads, split_heads
from .featurize import EdgeEmbedding, bond_onehot, one_hot
from .molgraph import ELEMENTS
from .nn import FeedForward, LayerNorm, Linear, Module, Parameter


def _bond_matrix(bonds, n: int) -> np.ndarray:
    m = np.zeros((n, n), dtype=np.int64)
    for i, j, order in bonds:
        m[i, j] = m[j, i] = order
    return m


class GraphBlock(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.width, self.heads = width, heads
        s = 1.0 / math.sqrt(2 * width)
        self.norm = LayerNorm(width)
        self.w_q = Parameter(rng.normal(0.0, s, size=(2 * width, width)))
        self.w_k = Parameter(rng.normal(0.0, s, size=(2 * width, width)))
        self.w_v = Parameter(rng.normal(0.0, s, size=(2 * width, width)))
        self.w_f = Parameter(rng.normal(0.0, 1.0 / math.sqrt(width), size=(width, width)))
        self.ff_norm = LayerNorm(width)
        self.ff = FeedForward(width, 2 * width, width, rng)

    def __call__(self, x: Value, bonds: Value, table: Value, mask: np.ndarray) -> Value:
        w, h = self.width, self.heads
        n = self.norm(x)
        q = ad.expand_dims(n @ self.w_q[:w], -2) + bonds @ (table @ self.w_q[w:])
        k = ad.expand_dims(n @ self.w_k[:w], -3) + bonds @ (table @ self.w_k[w:])
        v = ad.expand_dims(n @ self.w_v[:w], -3) + bonds @ (table @ self.w_v[w:])
        score = ad.vsum(split_heads(q * k, h), axis=-1) * (1.0 / math.sqrt(w // h))
        alpha = ad.silu(score) * mask[..., None]
        agg = merge_heads(ad.invariant_sum(ad.expand_dims(alpha, -1) * split_heads(v, h), axis=-3))
        x = x + agg @ self.w_f
        return x + self.ff(self.ff_norm(x))


class Encoder2D(Module):
    def __init__(self, d_model: int = 256, width: int = 64, heads: int = 4, n_layers: int = 12,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.atoms = Linear(len(ELEMENTS), width, rng, bias=False, scale=math.sqrt(len(ELEMENTS)))
        self.edges = EdgeEmbedding(width, rng)
        self.blocks = [GraphBlock(width, heads, rng) for _ in range(n_layers)]
        self.out_norm = LayerNorm(width)
        self.proj = Linear(width, d_model, rng)

    def forward(self, atom_types: np.ndarray, bond_matrix: np.ndarray, atom_mask: np.ndarray | None = None) -> Value:
        """Array form; leading batch axes are allowed when ``atom_mask`` marks the padding."""
        atom_types = np.asarray(atom_types)
        x = self.atoms(Value(one_hot(atom_types)))
        bonds = bond_onehot(bond_matrix)
        mask = pair_mask(atom_mask, atom_types.shape[-1])
        for block in self.blocks:
            x = block(x, bonds, self.edges.table, mask)
        return self.proj(self.out_norm(x))

    def __call__(self, atom_types, bonds) -> Value:
        return self.forward(atom_types, _bond_matrix(bonds, len(atom_types)))

    def encode_batch(self, batch: GraphBatch) -> Value:
        return self.forward(batch.atom_types, batch.bond_orders, batch.atom_mask)


def encode2d(atom_types, bonds, encoder: "Encoder2D | RWSEEncoder") -> Value:
    return encoder(atom_types, bonds)


def rwse(bonds, n: int, steps: int) -> np.ndarray:
    """Return probabilities diag((D^-1 A)^k) for k = 1..steps, one row per atom."""
    return rwse_matrix(_bond_matrix(bonds, n), steps)


def rwse_matrix(bond_matrix: np.ndarray, steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    adj = (np.asarray(bond_matrix) > 0).astype(np.float64)
    n = adj.shape[0]
    deg = adj.sum(axis=1)
    trans = np.divide(adj, deg[:, None], out=np.zeros_like(adj), where=deg[:, None] > 0)
    out = np.zeros((n, steps))
    power = np.eye(n)
    for k in range(steps):
        power = power @ trans
        out[:, k] = np.diag(power)
    return out


class RWSEEncoder(Module):
    """Frozen random-walk features followed by a trainable projection."""

    def __init__(self, d_model: int = 256, steps: int = 16, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.steps = steps
        self.proj = Linear(steps, d_model, rng)

    def __call__(self, atom_types, bonds) -> Value:
        return self.proj(Value(rwse(bonds, len(atom_types), self.steps)))

    def encode_batch(self, batch: GraphBatch) -> Value:
        feats = np.zeros(batch.atom_types.shape + (self.steps,))
        for k, n in enumerate(batch.sizes):
            feats[k, :n] = rwse_matrix(batch.bond_orders[k, :n, :n], self.steps)
        return self.proj(Value(feats))
