"""Relational transformer over 3D molecules with a scalar and a vector residual stream.

Each layer runs distance-filtered relational attention followed by an update
that exchanges information between scalar channels and per-channel 3-vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .batch import GraphBatch
from .featurize import AtomEmbedding, EdgeEmbedding, RBFBasis, bond_onehot, pair_geometry
from .molgraph import MolGraph
from .nn import LayerNorm, Module, Parameter


@dataclass
class EncoderOutput:
    scalar: Value  # (..., N, d_model)
    vec: Value  # (..., N, d_model, 3)


@dataclass
class PairContext:
    """Everything a layer needs about atom pairs; built once per forward."""

    bonds: Value  # (..., N, N, n_edge_types) one-hot bond types
    table: Value  # (n_edge_types, d) bond-type embedding
    rbf: Value  # (..., N, N, k_rbf)
    unit: Value  # (..., N, N, 3)
    mask: np.ndarray  # (..., N, N) 1.0 for distinct real atoms

    def pair_proj(self, w: Value) -> Value:
        """Bond embedding times ``w``, computed on the 5-row table and then looked up."""
        return self.bonds @ (self.table @ w)


def _weight(rng, d_in, d_out, scale=1.0) -> Parameter:
    return Parameter(rng.normal(0.0, scale / math.sqrt(d_in), size=(d_in, d_out)))


def channel_mix(vec: Value, w) -> Value:
    """``vec`` (..., c, 3) times ``w`` (c, e) over the channel axis, giving (..., e, 3)."""
    return ad.swap_last(ad.swap_last(vec) @ w)


def split_heads(x: Value, heads: int) -> Value:
    return x.reshape(*x.shape[:-1], heads, x.shape[-1] // heads)


def merge_heads(x: Value) -> Value:
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


class RelationalLayer(Module):
    def __init__(self, d_model: int, heads: int, k_rbf: int, rng: np.random.Generator,
                 filters: bool = True, update: bool = True):
        d = d_model
        self.d_model, self.heads = d, heads
        self.filters, self.update = filters, update
        self.norm = LayerNorm(d)
        self.w_q = _weight(rng, 2 * d, d)
        self.w_k = _weight(rng, 2 * d, d)
        self.w_v = _weight(rng, 2 * d, 3 * d)
        if filters:
            self.w_dk = _weight(rng, k_rbf, d)
            self.w_dv = _weight(rng, k_rbf, 3 * d)
        self.w_f = _weight(rng, d, 3 * d)
        if update:
            self.w_vec = _weight(rng, d, 3 * d)

    def attention(self, n: Value, ctx: PairContext):
        """Returns ((o1, o2, o3) per atom, (s1, s2, s3) per pair).

        Pair tensors are indexed (..., i, j, :) with i the receiving atom.
        """
        d, h = self.d_model, self.heads
        q = ad.expand_dims(n @ self.w_q[:d], -2) + ctx.pair_proj(self.w_q[d:])
        k = ad.expand_dims(n @ self.w_k[:d], -3) + ctx.pair_proj(self.w_k[d:])
        v = ad.expand_dims(n @ self.w_v[:d], -3) + ctx.pair_proj(self.w_v[d:])
        if self.filters:
            k = k * ad.silu(ctx.rbf @ self.w_dk)
            s = v * ad.silu(ctx.rbf @ self.w_dv)
        else:
            s = v
        s1, s2, s3 = ad.split(s, 3, axis=-1)
        score = ad.vsum(split_heads(q * k, h), axis=-1) * (1.0 / math.sqrt(d // h))
        alpha = ad.silu(score) * ctx.mask[..., None]
        msg = ad.expand_dims(alpha, -1) * split_heads(s3, h)
        agg = merge_heads(ad.invariant_sum(msg, axis=-3))
        o1, o2, o3 = ad.split(agg @ self.w_f, 3, axis=-1)
        return (o1, o2, o3), (s1, s2, s3)

    def update_step(self, vec: Value, o, s, ctx: PairContext):
        """Returns (delta_scalar, delta_vec)."""
        o1, o2, o3 = o
        s1, s2, _ = s
        if not self.update:
            return o2, None
        u1, u2, u3 = ad.split(channel_mix(vec, self.w_vec), 3, axis=-2)
        term = (ad.expand_dims(vec, -4) * ad.expand_dims(s1, -1)
                + ad.expand_dims(s2, -1) * ad.expand_dims(ctx.unit, -2)) * ctx.mask[..., None, None]
        w = ad.invariant_sum(term, axis=-3)
        dx = o2 + o3 * ad.vsum(u1 * u2, axis=-1)
        dvec = u3 * ad.expand_dims(o1, -1) + w
        return dx, dvec

    def __call__(self, x: Value, vec: Value, ctx: PairContext):
        o, s = self.attention(self.norm(x), ctx)
        dx, dvec = self.update_step(vec, o, s, ctx)
        return x + dx, (vec if dvec is None else vec + dvec)


class RelationalStack(Module):
    def __init__(self, d_model: int, heads: int, k_rbf: int, n_layers: int, rng: np.random.Generator,
                 filters: bool = True, update: bool = True):
        self.layers = [RelationalLayer(d_model, heads, k_rbf, rng, filters, update) for _ in range(n_layers)]

    def __call__(self, x: Value, vec: Value, ctx: PairContext):
        for layer in self.layers:
            x, vec = layer(x, vec, ctx)
        return x, vec


def graph_arrays(g: MolGraph | GraphBatch):
    """(atom_types, bond_matrix, atom_mask, coords); the mask is None for a single molecule."""
    if isinstance(g, GraphBatch):
        return g.atom_types, g.bond_orders, g.atom_mask, g.coords
    return g.atom_types, g.bond_matrix(), None, g.coords


def pair_context(edges: EdgeEmbedding, basis: RBFBasis, bond_matrix: np.ndarray, coords,
                 atom_mask: np.ndarray | None = None, allow_coincident: bool = False) -> PairContext:
    geo = pair_geometry(coords, allow_coincident, atom_mask)
    return PairContext(bond_onehot(bond_matrix), edges.table, basis(geo.dist), geo.unit, geo.mask)


class Encoder3D(Module):
    """Accepts one :class:`MolGraph` (outputs (N, ...)) or a padded :class:`GraphBatch`
    (outputs (B, N, ...), padded rows are meaningless)."""

    def __init__(self, d_model: int = 256, heads: int = 8, n_layers: int = 12, k_rbf: int = 64,
                 d_cut: float = 5.0, rng: np.random.Generator | None = None,
                 no_3d_attention: bool = False, no_update_layer: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.basis = RBFBasis(k_rbf, d_cut)
        self.embedding = AtomEmbedding(d_model, k_rbf, rng)
        self.edges = EdgeEmbedding(d_model, rng)
        self.stack = RelationalStack(d_model, heads, k_rbf, n_layers, rng,
                                     filters=not no_3d_attention, update=not no_update_layer)

    def __call__(self, g: MolGraph | GraphBatch, coords=None) -> EncoderOutput:
        types, bonds, atom_mask, xyz = graph_arrays(g)
        coords = ad.as_value(xyz if coords is None else coords)
        ctx = pair_context(self.edges, self.basis, bonds, coords, atom_mask)
        x = self.embedding(coords, types, ctx.rbf, ctx.mask)
        vec = Value(np.zeros(np.shape(types) + (self.d_model, 3)))
        x, vec = self.stack(x, vec, ctx)
        return EncoderOutput(x, vec)


def encode(g: MolGraph | GraphBatch, encoder: Encoder3D, coords=None) -> EncoderOutput:
    return encoder(g, coords)
