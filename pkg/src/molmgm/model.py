"""Model assemblies: the masked-coordinate autoencoder used for pretraining and the
encoder-plus-label-head used for finetuning."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .config import Config
from .batch import GraphBatch, segment_matrix
from .decoder import Decoder, StructureDependentDecoder, VectorHead, impute_masked_coords, srd, srd_batch
from .encoder2d import Encoder2D, RWSEEncoder
from .encoder3d import Encoder3D, EncoderOutput
from .molgraph import MaskPlan, MolGraph
from .nn import FeedForward, Module, Parameter


def build_encoder(cfg: Config, rng: np.random.Generator) -> Encoder3D:
    return Encoder3D(cfg.d_model, cfg.heads, cfg.layers, cfg.k_rbf, cfg.d_cut, rng,
                     no_3d_attention=cfg.no_3d_attention, no_update_layer=cfg.no_update_layer)


def build_position_encoder(cfg: Config, rng: np.random.Generator):
    if cfg.pe_kind == "retrans":
        return Encoder2D(cfg.d_model, cfg.pe_dim, cfg.pe_heads, cfg.pe_layers, rng)
    if cfg.pe_kind == "rwse":
        return RWSEEncoder(cfg.d_model, cfg.rwse_steps, rng)
    return None


@dataclass
class PretrainTerms:
    """Loss terms; scalars for one molecule or (B,) vectors for a batch."""

    total: Value
    mgm: Value
    denoise: Value
    distill: Value
    distill_cosine: float | np.ndarray


class MaskedAutoencoder(Module):
    def __init__(self, cfg: Config, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        d = cfg.d_model
        self.encoder = build_encoder(cfg, rng)
        wants_pe = cfg.use_srd or cfg.use_distill
        self.pe = build_position_encoder(cfg, rng) if wants_pe else None
        self.mask_token = Parameter(rng.normal(0.0, 1.0, size=d))
        if cfg.decoder_kind == "dependent":
            self.decoder = StructureDependentDecoder(d, cfg.heads, cfg.decoder_layers, cfg.k_rbf, cfg.d_cut, rng)
        else:
            self.decoder = Decoder(d, cfg.heads, cfg.decoder_layers, rng)
        self.pos_head = VectorHead(d, rng)
        self.denoise_head = VectorHead(d, rng)

    def trainable_parameters(self) -> dict[str, Parameter]:
        params = self.parameters()
        skip = []
        if self.cfg.freeze_encoder:
            skip.append("encoder.")
        if self.pe is not None and not self.cfg.use_distill:
            skip.append("pe.")
        return {k: p for k, p in params.items() if not any(k.startswith(s) for s in skip)}

    def _maybe_frozen(self, fn, frozen: bool):
        if frozen:
            with ad.no_grad():
                return fn()
        return fn()

    def encode_masked(self, g: MolGraph, plan: MaskPlan, noised: np.ndarray) -> EncoderOutput:
        keep = plan.unmasked
        sub = g.subgraph(keep).with_coords(noised[list(keep)])
        return self._maybe_frozen(lambda: self.encoder(sub), self.cfg.freeze_encoder)

    def position_encoding(self, g: MolGraph | GraphBatch) -> Value | None:
        if self.pe is None:
            return None
        if isinstance(g, GraphBatch):
            fn = lambda: self.pe.encode_batch(g)  # noqa: E731
        else:
            fn = lambda: self.pe(g.atom_types, g.bonds)  # noqa: E731
        return self._maybe_frozen(fn, not self.cfg.use_distill)

    def decode(self, g: MolGraph, plan: MaskPlan, h: EncoderOutput, pe: Value | None, noised: np.ndarray):
        state = srd(h.scalar, h.vec, plan, pe, self.mask_token)
        if isinstance(self.decoder, StructureDependentDecoder):
            return self.decoder(state, g, impute_masked_coords(noised, plan))
        return self.decoder(state)

    def batch_losses(self, graphs: Sequence[MolGraph], plans: Sequence[MaskPlan],
                     rotations: Sequence[np.ndarray | None] | None = None,
                     shifts: Sequence[np.ndarray | None] | None = None,
                     frozen: dict | None = None) -> PretrainTerms:
        """Pretraining objective for a list of molecules; every term has shape (B,).

        Noise goes onto unmasked atoms first, then the same rigid motion is applied
        to the noised input, the clean targets and the clean distillation pass.

        ``frozen`` (optional dict) pins the two stop-gradient inputs, ``"pe_token"``
        and ``"h_clean"``; finite-difference checks need them held constant.
        Missing keys are filled in with the values computed by this call.
        """
        B = len(graphs)
        rotations = rotations if rotations is not None else [None] * B
        shifts = shifts if shifts is not None else [None] * B
        clean, noised, noise = [], [], []
        for g, plan, rot, t in zip(graphs, plans, rotations, shifts):
            rot = np.eye(3) if rot is None else rot
            t = np.zeros(3) if t is None else t
            clean.append(g.coords @ rot.T + t)
            noised.append((g.coords + plan.noise) @ rot.T + t)
            noise.append(plan.noise @ rot.T)

        subs = GraphBatch.from_graphs([g.subgraph(p.unmasked) for g, p in zip(graphs, plans)],
                                      [x[list(p.unmasked)] for x, p in zip(noised, plans)])
        full = GraphBatch.from_graphs(graphs, clean)
        h = self._maybe_frozen(lambda: self.encoder(subs), self.cfg.freeze_encoder)
        pe = self.position_encoding(full)
        pe_token = None
        if self.cfg.use_srd and pe is not None:
            pe_token = ad.stop_gradient(pe)
            if frozen is not None:
                pe_token = frozen.setdefault("pe_token", pe_token)
        state = srd_batch(h.scalar, h.vec, plans, full.atom_mask, pe_token, self.mask_token)
        if isinstance(self.decoder, StructureDependentDecoder):
            imputed = GraphBatch.from_graphs(graphs, [impute_masked_coords(x, p) for x, p in zip(noised, plans)])
            rep, vec = self.decoder(state, full, imputed.coords)
        else:
            rep, vec = self.decoder(state)

        sel_m, sel_u = np.zeros(full.atom_mask.shape), np.zeros(full.atom_mask.shape)
        for b, p in enumerate(plans):
            sel_m[b, list(p.masked)] = 1.0
            sel_u[b, list(p.unmasked)] = 1.0
        noise_pad = GraphBatch.from_graphs(graphs, noise).coords
        l_mgm = masked_sq_error(self.pos_head(rep, vec), full.coords, sel_m)
        l_den = masked_sq_error(self.denoise_head(rep, vec), noise_pad, sel_u)
        total = l_mgm + l_den * self.cfg.denoise_weight
        l_dist, cos = Value(np.zeros(B)), np.full(B, np.nan)
        if self.cfg.use_distill and pe is not None:
            if frozen is not None and "h_clean" in frozen:
                h_clean = frozen["h_clean"]
            else:
                with ad.no_grad():
                    h_clean = self.encoder(full).scalar
                if frozen is not None:
                    frozen["h_clean"] = h_clean
            l_dist, cos = batch_distill_loss(pe, h_clean, plans, full)
            total = total + l_dist
        return PretrainTerms(total, l_mgm, l_den, l_dist, cos)

    def losses(self, g: MolGraph, plan: MaskPlan, rotation: np.ndarray | None = None,
               shift: np.ndarray | None = None, frozen: dict | None = None) -> PretrainTerms:
        """Scalar terms for one molecule (a batch of one)."""
        t = self.batch_losses([g], [plan], [rotation], [shift], frozen)
        return PretrainTerms(t.total.reshape(()), t.mgm.reshape(()), t.denoise.reshape(()),
                             t.distill.reshape(()), float(t.distill_cosine[0]))


def masked_sq_error(pred: Value, target: np.ndarray, sel: np.ndarray) -> Value:
    """Per-molecule sum of squared errors over rows with ``sel`` = 1; (B,)."""
    diff = pred - target
    return ad.vsum(ad.vsum(diff * diff, axis=-1) * sel, axis=-1)


def batch_distill_loss(pe: Value, h_clean: Value, plans: Sequence[MaskPlan],
                       batch: GraphBatch) -> tuple[Value, np.ndarray]:
    """Per-molecule negative summed cosine over unmasked atoms, and the mean cosines."""
    idx = batch.flat_index([p.unmasked for p in plans])
    d = pe.shape[-1]
    rows_pe = pe.reshape(-1, d)[idx]
    rows_h = ad.stop_gradient(h_clean).reshape(-1, d)[idx]
    cos = ad.cosine_similarity(rows_pe, rows_h, axis=-1)
    seg = segment_matrix([len(p.unmasked) for p in plans])
    per_mol = (cos.reshape(1, -1) @ seg).reshape(-1)
    counts = seg.sum(axis=0)
    return per_mol * -1.0, per_mol.data / counts


class LabelHead(Module):
    """Per-atom MLP over scalar channels and vector-channel norms, summed over atoms."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.mlp = FeedForward(2 * d, d, 1, rng)

    def __call__(self, scalar: Value, vec: Value, atom_mask: np.ndarray | None = None) -> Value:
        """() for one molecule, (B,) when ``atom_mask`` (B, N) is given."""
        norms = ad.sqrt(ad.vsum(vec * vec, axis=-1) + 1e-8)
        per_atom = self.mlp(ad.concat([scalar, norms], axis=-1))
        if atom_mask is None:
            return ad.invariant_sum(per_atom, axis=-2).reshape(())
        return ad.invariant_sum(per_atom * atom_mask[..., None], axis=-2).reshape(-1)


class PropertyModel(Module):
    def __init__(self, cfg: Config, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = build_encoder(cfg, rng)
        self.head = LabelHead(cfg.d_model, rng)

    def energy(self, g: MolGraph, coords=None) -> Value:
        out = self.encoder(g, coords)
        return self.head(out.scalar, out.vec)

    def energy_batch(self, batch: GraphBatch, coords=None) -> Value:
        """(B,) predictions for a padded batch."""
        out = self.encoder(batch, coords)
        return self.head(out.scalar, out.vec, batch.atom_mask)

    __call__ = energy
