"""Masking, rigid-motion augmentation, optimization and the pretraining/finetuning loops."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from . import autodiff as ad
from .autodiff import Value
from .config import Config
from .batch import GraphBatch
from .molgraph import MaskPlan, MolGraph
from .model import MaskedAutoencoder, PropertyModel

log = logging.getLogger(__name__)

PRETRAIN_COLUMNS = ("step", "lr", "loss_total", "loss_mgm", "loss_denoise", "loss_distill", "distill_cosine_mean")
FINETUNE_COLUMNS = ("step", "lr", "loss_energy", "loss_force", "mae")


class TrainingError(RuntimeError):
    pass


class DataError(ValueError):
    pass


def mask_count(n: int, p: float) -> int:
    return min(max(int(math.floor(p * n + 0.5)), 1), n - 1)


def sample_mask(n: int, p: float, rng: np.random.Generator | int, noise_scale: float = 0.04) -> MaskPlan:
    """Uniformly choose ``mask_count(n, p)`` atoms; Gaussian noise on the rest."""
    if n < 2:
        raise ValueError(f"cannot mask a molecule with {n} atom(s): need 1 <= |masked| <= n-1")
    seed = int(rng) if isinstance(rng, (int, np.integer)) else int(rng.integers(2 ** 63))
    sub = np.random.default_rng(seed)
    masked = sub.choice(n, size=mask_count(n, p), replace=False)
    noise = noise_scale * sub.normal(size=(n, 3))
    return MaskPlan(n, tuple(int(i) for i in masked), noise, seed)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def augment(coords: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Haar-random rotation plus a shared N(0, 0.01 I) translation.

    Returns (coords @ R.T + t, R, t).
    """
    rot = random_rotation(rng)
    t = rng.normal(0.0, 0.1, size=3)
    return np.asarray(coords) @ rot.T + t, rot, t


def lr_schedule(step: int, lr_init: float = 5e-5, lr_min: float = 1e-6, warmup_steps: int = 10000,
                max_steps: int = 400000) -> float:
    """Linear warmup to ``lr_init`` then cosine decay to ``lr_min`` at ``max_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps > 0 and step < warmup_steps:
        return lr_init * step / warmup_steps
    if step >= max_steps:
        return lr_min
    span = max(max_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * progress))


def config_lr(cfg: Config, step: int) -> float:
    return lr_schedule(step, cfg.lr_init, cfg.lr_min, cfg.warmup_steps, cfg.max_steps)


@dataclass
class AdamW:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, Value], grads: Mapping[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = p.data - lr * update


def optimizer_step(params: Mapping[str, Value], grads: Mapping[str, np.ndarray], state: AdamW, lr: float) -> None:
    state.step(params, grads, lr)


class Batches:
    """Endless seeded epoch shuffling."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, max(1, batch_size), rng
        self._order: list[int] = []

    def next(self) -> list[int]:
        out = []
        while len(out) < min(self.batch_size, self.n):
            if not self._order:
                self._order = list(self.rng.permutation(self.n))
            out.append(int(self._order.pop(0)))
        return out


def _collect_grads(params: Mapping[str, Value]) -> dict[str, np.ndarray]:
    return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def write_csv(path: str | Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})


@dataclass
class PretrainResult:
    model: MaskedAutoencoder
    log: list[dict]


def sample_step(graphs: Sequence[MolGraph], rng: np.random.Generator, cfg: Config):
    """Mask plans and rigid motions for one batch, drawn molecule by molecule."""
    plans, rots, shifts = [], [], []
    for g in graphs:
        plans.append(sample_mask(g.n_atoms, cfg.mask_ratio, rng, cfg.noise_scale))
        if cfg.no_augmentation:
            rots.append(None)
            shifts.append(None)
        else:
            rots.append(random_rotation(rng))
            shifts.append(rng.normal(0.0, 0.1, size=3))
    return plans, rots, shifts


def pretrain_step_losses(model: MaskedAutoencoder, graphs: Sequence[MolGraph], rng: np.random.Generator,
                         cfg: Config):
    """(B,) loss terms for one batch."""
    plans, rots, shifts = sample_step(graphs, rng, cfg)
    return model.batch_losses(graphs, plans, rots, shifts)


def pretrain(corpus: Sequence[MolGraph], cfg: Config, model: MaskedAutoencoder | None = None,
             on_step: Callable[[dict], None] | None = None) -> PretrainResult:
    if not corpus:
        raise DataError("empty pretraining corpus")
    if any(g.n_atoms < 2 for g in corpus):
        raise DataError("every pretraining molecule needs at least 2 atoms")
    init_rng = np.random.default_rng(cfg.seed)
    model = model if model is not None else MaskedAutoencoder(cfg, init_rng)
    data_rng = np.random.default_rng([cfg.seed, 1])
    mask_rng = np.random.default_rng([cfg.seed, 2])
    batches = Batches(len(corpus), cfg.batch_size, data_rng)
    params = model.trainable_parameters()
    opt = AdamW(weight_decay=cfg.weight_decay)
    n_acc = max(1, cfg.accumulate_grad_batches)
    rows = []
    with ad.fast_matmul():
        for step in range(cfg.max_steps):
            lr = config_lr(cfg, step)
            model.zero_grad()
            sums = dict.fromkeys(("loss_total", "loss_mgm", "loss_denoise", "loss_distill"), 0.0)
            cosines = []
            for _ in range(n_acc):
                idx = batches.next()
                terms = pretrain_step_losses(model, [corpus[i] for i in idx], mask_rng, cfg)
                scale = 1.0 / (len(idx) * n_acc)
                if not np.all(np.isfinite(terms.total.data)):
                    bad = [i for i, v in zip(idx, terms.total.data) if not np.isfinite(v)]
                    raise TrainingError(f"non-finite loss at step {step}; molecules {bad}")
                ad.backward(ad.vsum(terms.total) * scale)
                for key, term in (("loss_total", terms.total), ("loss_mgm", terms.mgm),
                                  ("loss_denoise", terms.denoise), ("loss_distill", terms.distill)):
                    sums[key] += float(term.data.sum()) * scale
                cosines.extend(c for c in np.atleast_1d(terms.distill_cosine) if not math.isnan(c))
            opt.step(params, _collect_grads(params), lr)
            row = {"step": step, "lr": lr, **sums,
                   "distill_cosine_mean": float(np.mean(cosines)) if cosines else float("nan")}
            rows.append(row)
            if on_step is not None:
                on_step(row)
            if cfg.log_every and step % cfg.log_every == 0:
                log.debug("pretrain step %d loss %.5f", step, row["loss_total"])
    return PretrainResult(model, rows)


# finetuning -------------------------------------------------------------------

def forces_fd(energy_fn: Callable[[np.ndarray], Value], coords: np.ndarray, h: float = 1e-3) -> Value:
    """Central-difference forces -(E(x + h e_ik) - E(x - h e_ik)) / 2h.

    Each energy is an ordinary forward pass, so the result stays differentiable
    with respect to model parameters.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    comps = []
    for i in range(n):
        for k in range(3):
            plus = coords.copy()
            plus[i, k] += h
            minus = coords.copy()
            minus[i, k] -= h
            comps.append((energy_fn(plus) - energy_fn(minus)) * (-1.0 / (2 * h)))
    return ad.stack(comps).reshape(n, 3)


def model_forces_fd(model: PropertyModel, g: MolGraph, coords: np.ndarray | None = None,
                    h: float = 1e-3) -> Value:
    """:func:`forces_fd` for a :class:`PropertyModel`, with all 6N displaced copies
    evaluated as one batch."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    coords = np.asarray(g.coords if coords is None else coords, dtype=np.float64)
    n = coords.shape[0]
    shifted = np.repeat(coords[None], 6 * n, axis=0).reshape(3 * n, 2, n, 3)
    for c in range(3 * n):
        shifted[c, 0, c // 3, c % 3] += h
        shifted[c, 1, c // 3, c % 3] -= h
    batch = GraphBatch.from_graphs([g] * (6 * n), list(shifted.reshape(6 * n, n, 3)))
    e = model.energy_batch(batch).reshape(3 * n, 2)
    return (e[:, 0] - e[:, 1]).reshape(n, 3) * (-1.0 / (2 * h))


def forces_autodiff(energy_fn: Callable[[Value], Value], coords: np.ndarray) -> np.ndarray:
    """-dE/dx by reverse mode; verification path only."""
    x = Value(np.array(coords, dtype=np.float64), requires_grad=True)
    ad.backward(energy_fn(x))
    return -(x.grad if x.grad is not None else np.zeros_like(x.data))


def ema(prev: Value | None, current: Value, alpha: float) -> Value:
    """alpha * current + (1 - alpha) * prev, with the history detached."""
    if prev is None:
        return current
    return current * alpha + ad.stop_gradient(prev) * (1.0 - alpha)


@dataclass
class FinetuneResult:
    model: PropertyModel
    log: list[dict]


def _elementwise_loss(diff: Value, kind: str) -> Value:
    return ad.mean(diff * diff) if kind == "mse" else ad.mean(ad.vabs(diff))


def finetune(corpus: Sequence[MolGraph], cfg: Config, encoder_state: Mapping[str, np.ndarray] | None = None,
             model: PropertyModel | None = None, on_step: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Supervised training of encoder + label head on ``cfg.label`` (and forces)."""
    with_forces = cfg.task == "energy+forces"
    for k, g in enumerate(corpus):
        if cfg.label not in g.labels:
            raise DataError(f"molecule {k} lacks label {cfg.label!r}")
        if with_forces and g.forces is None:
            raise DataError(f"molecule {k} lacks force labels")
    init_rng = np.random.default_rng(cfg.seed)
    model = model if model is not None else PropertyModel(cfg, init_rng)
    if encoder_state is not None:
        model.encoder.load_state_dict(encoder_state)
    data_rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 3])
    batches = Batches(len(corpus), cfg.batch_size, data_rng)
    params = model.parameters()
    opt = AdamW(weight_decay=cfg.weight_decay)
    ema_y: Value | None = None
    ema_dy: Value | None = None
    rows = []
    with ad.fast_matmul():
        for step in range(cfg.max_steps):
            lr = config_lr(cfg, step)
            model.zero_grad()
            idx = batches.next()
            graphs, forces = [], []
            for i in idx:
                g = corpus[i]
                coords, f = g.coords, g.forces
                if not cfg.no_augmentation:
                    coords, rot, _ = augment(coords, aug_rng)
                    f = None if f is None else f @ rot.T
                graphs.append(g.with_coords(coords))
                forces.append(f)
            labels = np.array([g.labels[cfg.label] for g in graphs])
            err = model.energy_batch(GraphBatch.from_graphs(graphs)) - labels
            l_y = _elementwise_loss(err, cfg.loss_type)
            if with_forces:
                f_terms = [_elementwise_loss(model_forces_fd(model, g, None, cfg.fd_step) - f, cfg.loss_type)
                           for g, f in zip(graphs, forces)]
                l_dy = ad.mean(ad.stack(f_terms))
                ema_y = ema(ema_y, l_y, cfg.ema_alpha_y)
                ema_dy = ema(ema_dy, l_dy, cfg.ema_alpha_dy)
                loss = ema_y * cfg.energy_weight + ema_dy * cfg.force_weight
            else:
                l_dy = None
                loss = l_y
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite finetune loss at step {step}; molecules {idx}")
            ad.backward(loss)
            opt.step(params, _collect_grads(params), lr)
            row = {"step": step, "lr": lr, "loss_energy": float(l_y.data),
                   "loss_force": float(l_dy.data) if l_dy is not None else float("nan"),
                   "mae": float(np.mean(np.abs(err.data)))}
            rows.append(row)
            if on_step is not None:
                on_step(row)
    return FinetuneResult(model, rows)


def predict(model: PropertyModel, graphs: Sequence[MolGraph], chunk: int = 64) -> np.ndarray:
    """Batched no-grad predictions."""
    out = []
    with ad.no_grad():
        for k in range(0, len(graphs), chunk):
            out.append(model.energy_batch(GraphBatch.from_graphs(graphs[k:k + chunk])).data)
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: PropertyModel, corpus: Sequence[MolGraph], label: str, with_forces: bool = False,
             fd_step: float = 1e-3) -> dict[str, float]:
    errs = np.abs(predict(model, corpus) - np.array([g.labels[label] for g in corpus]))
    out = {"mae": float(errs.mean()) if len(errs) else float("nan"), "count": int(len(errs))}
    if with_forces:
        ferrs = []
        with ad.no_grad():
            for g in corpus:
                if g.forces is not None:
                    ferrs.append(np.abs(model_forces_fd(model, g, None, fd_step).data - g.forces).mean())
        out["force_mae"] = float(np.mean(ferrs)) if ferrs else float("nan")
    return out
