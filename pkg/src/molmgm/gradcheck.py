"""Finite-difference suite over every pretraining loss term.

Stop-gradient inputs (the position-encoding term added to decoder tokens and the
clean-graph distillation target) are computed once per case and pinned, so the
central differences see the same function the tape differentiates.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import Config
from .model import MaskedAutoencoder, PropertyModel
from .molgraph import generate_synthetic
from .train import random_rotation, sample_mask

TERMS = ("mgm", "denoise", "distill", "total")

# widths small enough that 20 seeds x 3 sizes finish in a couple of minutes
SUITE_SHAPE = dict(d_model=8, heads=2, layers=2, k_rbf=4, pe_dim=8, pe_heads=2, pe_layers=2,
                   decoder_layers=2, rwse_steps=4)


@dataclass
class CheckRow:
    check: str
    n_atoms: int
    seed: int
    max_rel_err: float


@dataclass
class GradcheckReport:
    rows: list[CheckRow] = field(default_factory=list)
    tolerance: float = 1e-4
    seconds: float = 0.0

    @property
    def worst(self) -> float:
        return max((r.max_rel_err for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and self.worst < self.tolerance

    def by_check(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.rows:
            out[r.check] = max(out.get(r.check, 0.0), r.max_rel_err)
        return out


def suite_config(cfg: Config) -> Config:
    """Keep the structural switches of ``cfg`` and shrink the widths."""
    return cfg.replace(**SUITE_SHAPE)


def _term_params(model: MaskedAutoencoder, term: str) -> dict:
    params = model.parameters()
    if term == "distill":
        return {k: p for k, p in params.items() if k.startswith("pe.")}
    if term in ("mgm", "denoise"):
        return {k: p for k, p in params.items() if not k.startswith("pe.")}
    return params


def check_pretrain_case(cfg: Config, n_atoms: int, seed: int, h: float = 1e-4,
                        n_coords: int = 24) -> list[CheckRow]:
    g = generate_synthetic(seed, 1, (n_atoms, n_atoms))[0]
    model = MaskedAutoencoder(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng([seed, n_atoms])
    plan = sample_mask(n_atoms, cfg.mask_ratio, rng, cfg.noise_scale)
    rot, shift = random_rotation(rng), rng.normal(0.0, 0.1, size=3)
    pinned: dict = {}
    model.losses(g, plan, rot, shift, frozen=pinned)
    rows = []
    for term in TERMS:
        if term == "distill" and not (cfg.use_distill and model.pe is not None):
            continue
        params = _term_params(model, term)

        def loss(term=term):
            return getattr(model.losses(g, plan, rot, shift, frozen=pinned), term)

        err = ad.finite_diff_check_params(loss, params, h=h, n_coords=n_coords,
                                          rng=np.random.default_rng([seed, n_atoms, TERMS.index(term)]))
        rows.append(CheckRow(term, n_atoms, seed, err))
    return rows


def check_encoder_coords(cfg: Config, n_atoms: int, seed: int, h: float = 1e-4) -> CheckRow:
    """Scalar functional of the encoder output against every input coordinate."""
    g = generate_synthetic(seed, 1, (n_atoms, n_atoms))[0]
    model = PropertyModel(cfg, np.random.default_rng(seed))
    err = ad.finite_diff_check(lambda x: model.energy(g, x), ad.Value(g.coords), h=h)
    return CheckRow("encoder_coords", n_atoms, seed, err)


def run_suite(cfg: Config | None = None, sizes=(3, 4, 5), seeds: int = 20, h: float = 1e-4,
              n_coords: int = 24, tolerance: float = 1e-4, shrink: bool = True) -> GradcheckReport:
    cfg = cfg if cfg is not None else Config()
    if shrink:
        cfg = suite_config(cfg)
    report = GradcheckReport(tolerance=tolerance)
    t0 = time.perf_counter()
    for n in sizes:
        for seed in range(seeds):
            report.rows.extend(check_pretrain_case(cfg, n, seed, h, n_coords))
            report.rows.append(check_encoder_coords(cfg, n, seed, h))
    report.seconds = time.perf_counter() - t0
    return report
