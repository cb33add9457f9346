"""Re-mask decoding with a stop-gradient position term, the decoders, prediction
heads and the pretraining losses."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .batch import GraphBatch
from .encoder3d import RelationalStack, graph_arrays, merge_heads, pair_context, split_heads
from .featurize import EdgeEmbedding, RBFBasis
from .molgraph import MaskPlan, MolGraph
from .nn import FeedForward, LayerNorm, Linear, Module


class MaskError(ValueError):
    pass


@dataclass
class SRDState:
    tokens: Value  # (..., N, d)
    vec_in: Value  # (..., N, d, 3)
    mask: MaskPlan | Sequence[MaskPlan]
    atom_mask: np.ndarray | None = None  # (B, N) for padded batches


def remask(h: Value, mask: MaskPlan, m_h: Value) -> Value:
    """Scatter encoder rows of the atom-removed graph back to original indices and put
    the shared mask token at every masked index."""
    n = mask.n_atoms
    unmasked = mask.unmasked
    if h.shape[0] + len(mask.masked) != n or h.shape[0] != len(unmasked):
        raise MaskError(f"{h.shape[0]} encoder rows + {len(mask.masked)} masked != {n} atoms")
    sel = np.zeros((n, 1))
    sel[list(mask.masked)] = 1.0
    return ad.scatter_rows(h, unmasked, n) + ad.expand_dims(m_h, 0) * sel


def placement(plans: Sequence[MaskPlan], n_enc: int, n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """0/1 matrices for a padded batch: ``place`` (B, n_enc, n_max) sends encoder row u
    to its original index, ``sel`` (B, n_max, 1) marks masked atoms."""
    place = np.zeros((len(plans), n_enc, n_max))
    sel = np.zeros((len(plans), n_max, 1))
    for b, plan in enumerate(plans):
        place[b, np.arange(len(plan.unmasked)), list(plan.unmasked)] = 1.0
        sel[b, list(plan.masked), 0] = 1.0
    return place, sel


def srd_batch(h: Value, vec: Value, plans: Sequence[MaskPlan], atom_mask: np.ndarray,
              pe: Value | None, m_h: Value) -> SRDState:
    """Batched re-mask: placement by exact 0/1 contractions, then the detached position term."""
    place, sel = placement(plans, h.shape[-2], atom_mask.shape[-1])
    tokens = ad.einsum("bun,bud->bnd", Value(place), h) + m_h * sel
    if pe is not None:
        if pe.shape != tokens.shape:
            raise TypeError(f"position encoding shape {pe.shape} does not match tokens {tokens.shape}")
        tokens = tokens + ad.stop_gradient(pe)
    vec_in = ad.einsum("bun,budc->bndc", Value(place), vec)
    return SRDState(tokens, vec_in, list(plans), atom_mask)


def srd(h: Value, vec: Value, mask: MaskPlan, pe: Value | None, m_h: Value) -> SRDState:
    tokens = remask(h, mask, m_h)
    if pe is not None:
        if pe.shape != tokens.shape:
            raise TypeError(f"position encoding shape {pe.shape} does not match tokens {tokens.shape}")
        tokens = tokens + ad.stop_gradient(pe)
    return SRDState(tokens, ad.scatter_rows(vec, mask.unmasked, mask.n_atoms), mask)


class TransformerBlock(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.d, self.heads = d, heads
        self.norm = LayerNorm(d)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng, bias=False)  # a key bias cancels in the softmax
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.ff_norm = LayerNorm(d)
        self.ff = FeedForward(d, 2 * d, d, rng)

    def __call__(self, x: Value, atom_mask: np.ndarray | None = None) -> Value:
        h = self.heads
        n = self.norm(x)
        q, k, v = (split_heads(f(n), h) for f in (self.q, self.k, self.v))
        scores = ad.vsum(ad.expand_dims(q, -3) * ad.expand_dims(k, -4), axis=-1) * (1.0 / math.sqrt(self.d // h))
        if atom_mask is not None:
            # padded keys get exactly zero weight
            scores = scores + np.where(atom_mask > 0, 0.0, -1e30)[..., None, :, None]
        attn = ad.softmax(scores, axis=-2)
        mixed = ad.invariant_sum(ad.expand_dims(attn, -1) * ad.expand_dims(v, -4), axis=-3)
        x = x + self.out(merge_heads(mixed))
        return x + self.ff(self.ff_norm(x))


class Decoder(Module):
    """Transformer over the token sequence only: no bonds, no coordinates."""

    def __init__(self, d: int, heads: int, n_layers: int, rng: np.random.Generator):
        self.blocks = [TransformerBlock(d, heads, rng) for _ in range(n_layers)]
        self.out_norm = LayerNorm(d)
        self.gate = Linear(d, d, rng)

    def __call__(self, s: SRDState) -> tuple[Value, Value]:
        x = s.tokens
        for block in self.blocks:
            x = block(x, s.atom_mask)
        rep = self.out_norm(x)
        return rep, s.vec_in * ad.expand_dims(self.gate(rep), -1)


class StructureDependentDecoder(Module):
    """Relational-transformer decoder that also sees the bond table and coordinates."""

    def __init__(self, d: int, heads: int, n_layers: int, k_rbf: int, d_cut: float, rng: np.random.Generator):
        self.basis = RBFBasis(k_rbf, d_cut)
        self.edges = EdgeEmbedding(d, rng)
        self.stack = RelationalStack(d, heads, k_rbf, n_layers, rng)
        self.out_norm = LayerNorm(d)
        self.gate = Linear(d, d, rng)
        self.n_layers = n_layers

    def __call__(self, s: SRDState, g: MolGraph | GraphBatch, coords) -> tuple[Value, Value]:
        if self.n_layers == 0:
            return s.tokens, s.vec_in
        _, bonds, atom_mask, _ = graph_arrays(g)
        ctx = pair_context(self.edges, self.basis, bonds, coords, atom_mask, allow_coincident=True)
        x, vec = self.stack(s.tokens, s.vec_in, ctx)
        rep = self.out_norm(x)
        return rep, vec * ad.expand_dims(self.gate(rep), -1)


def impute_masked_coords(coords: np.ndarray, mask: MaskPlan) -> np.ndarray:
    """Masked atoms are placed at the centroid of the unmasked ones."""
    out = np.array(coords, dtype=np.float64)
    out[list(mask.masked)] = out[list(mask.unmasked)].mean(axis=0)
    return out


class VectorHead(Module):
    """Per-atom 3-vector from a scalar MLP plus a gated sum over vector channels."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.mlp = FeedForward(d, d, 3, rng, out_bias=False)
        self.gate = Linear(d, d, rng)

    def __call__(self, rep: Value, vec: Value) -> Value:
        return self.mlp(rep) + ad.vsum(ad.expand_dims(self.gate(rep), -1) * vec, axis=-2)


def mgm_loss(pred: Value, target: np.ndarray, mask: MaskPlan | None = None) -> Value:
    """Sum of squared errors over masked atoms; ``pred`` and ``target`` are already the
    masked rows unless ``mask`` is given, in which case rows are selected here."""
    if mask is not None:
        if not mask.masked:
            raise MaskError("reconstruction loss needs at least one masked atom")
        idx = list(mask.masked)
        pred, target = pred[idx], np.asarray(target)[idx]
    if pred.shape[0] == 0:
        raise MaskError("reconstruction loss needs at least one masked atom")
    diff = pred - target
    return ad.vsum(diff * diff)


def denoise_loss(pred: Value, noise: np.ndarray) -> Value:
    diff = pred - noise
    return ad.vsum(diff * diff)


def distill_loss(pe: Value, h_clean: Value, mask: MaskPlan) -> tuple[Value, float]:
    """Negative summed cosine over unmasked atoms; the 3D side is detached.

    Also returns the mean cosine for logging.
    """
    idx = list(mask.unmasked)
    cos = ad.cosine_similarity(pe[idx], ad.stop_gradient(h_clean)[idx], axis=-1)
    return ad.vsum(cos) * -1.0, float(cos.data.mean())
