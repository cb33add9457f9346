"""Leakage and probing experiments on pretrained encoders.

Every probe trains a small feedforward head on features computed once from frozen
modules, then checks that those modules did not move.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .batch import GraphBatch
from .config import Config
from .encoder2d import Encoder2D, RWSEEncoder
from .encoder3d import Encoder3D
from .model import MaskedAutoencoder
from .molgraph import MolGraph
from .nn import FeedForward, Module
from .train import AdamW, pretrain, sample_mask

PROBE_WIDTH = 128
PROBE_STEPS = 2000
PROBE_LR = 1e-3
LEAKAGE_WINDOW = 50


class DriftError(AssertionError):
    """A module that should be frozen changed during a probe."""


@dataclass
class ProbeReport:
    experiment: str
    series: dict[str, list[float]] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def write(self, outdir: str | Path) -> tuple[Path, Path]:
        """``<experiment>.csv`` with one column per arm, plus ``<experiment>.json``."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        csv_path = outdir / f"{self.experiment}.csv"
        arms = list(self.series)
        length = max((len(v) for v in self.series.values()), default=0)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", *arms])
            for k in range(length):
                w.writerow([k] + [self.series[a][k] if k < len(self.series[a]) else ""
                                                     for a in arms])
        json_path = outdir / f"{self.experiment}.json"
        json_path.write_text(json.dumps({"experiment": self.experiment, "summary": self.summary,
                                         "config": self.config}, indent=2, default=_jsonable))
        return csv_path, json_path


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    return str(x)


def final_window(series: Sequence[float], window: int) -> float:
    tail = list(series)[-window:]
    return float(np.mean(tail)) if tail else float("nan")


def window_means(series: Sequence[float], window: int) -> list[float]:
    """Non-overlapping block averages; a short trailing block is dropped."""
    s = np.asarray(series, dtype=np.float64)
    n = len(s) // window
    return [float(s[k * window:(k + 1) * window].mean()) for k in range(n)]


def _snapshot(module: Module) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in module.state_dict().items()}


def assert_no_drift(module: Module, before: Mapping[str, np.ndarray], what: str) -> None:
    for k, v in module.state_dict().items():
        if not np.array_equal(v, before[k]):
            raise DriftError(f"{what} parameter {k} changed during a frozen run")


def encode_many(encoder: Encoder3D, graphs: Sequence[MolGraph], chunk: int = 64):
    """Per-molecule (scalar, vec) arrays from batched no-grad passes."""
    out = []
    with ad.no_grad(), ad.fast_matmul():
        for k in range(0, len(graphs), chunk):
            part = graphs[k:k + chunk]
            res = encoder(GraphBatch.from_graphs(part))
            out.extend((res.scalar.data[b, :g.n_atoms], res.vec.data[b, :g.n_atoms]) for b, g in enumerate(part))
    return out


def pe_many(pe: Encoder2D | RWSEEncoder, graphs: Sequence[MolGraph], chunk: int = 64) -> list[np.ndarray]:
    out = []
    with ad.no_grad(), ad.fast_matmul():
        for k in range(0, len(graphs), chunk):
            part = graphs[k:k + chunk]
            res = pe.encode_batch(GraphBatch.from_graphs(part)).data
            out.extend(res[b, :g.n_atoms] for b, g in enumerate(part))
    return out


# Analysis 1 ----------------------------------------------------------------------

LEAKAGE_ARMS = {
    "frozen_independent": dict(freeze_encoder=True, decoder_kind="independent"),
    "frozen_dependent": dict(freeze_encoder=True, decoder_kind="dependent"),
    "trainable_independent": dict(freeze_encoder=False, decoder_kind="independent"),
    "trainable_dependent": dict(freeze_encoder=False, decoder_kind="dependent"),
}


def leakage_experiment(corpus: Sequence[MolGraph], cfg: Config, arms: Sequence[str] | None = None,
                       window: int = LEAKAGE_WINDOW) -> ProbeReport:
    """Pretrain once per arm and compare masked-coordinate reconstruction loss.

    Arms differ only in encoder freezing and decoder kind; seed, data order and
    everything else are shared.
    """
    arms = list(arms) if arms is not None else list(LEAKAGE_ARMS)
    report = ProbeReport("analysis1", config=vars(cfg).copy())
    finals, blocks = {}, {}
    for arm in arms:
        arm_cfg = cfg.replace(**LEAKAGE_ARMS[arm])
        model = MaskedAutoencoder(arm_cfg, np.random.default_rng(arm_cfg.seed))
        before = _snapshot(model.encoder)
        run = pretrain(corpus, arm_cfg, model=model)
        if arm_cfg.freeze_encoder:
            assert_no_drift(model.encoder, before, "encoder")
        losses = [r["loss_mgm"] for r in run.log]
        report.series[arm] = losses
        blocks[arm] = window_means(losses, window) or [float(np.mean(losses))]
        finals[arm] = blocks[arm][-1]
    report.summary["window"] = window
    report.summary["window_means"] = blocks
    report.summary["final_window_loss"] = finals
    report.summary["ordering"] = sorted(finals, key=finals.get)
    if {"trainable_independent", "frozen_dependent", "frozen_independent"} <= finals.keys():
        ti, fd, fi = finals["trainable_independent"], finals["frozen_dependent"], finals["frozen_independent"]
        report.summary["dependent_over_independent"] = fd / fi
        report.summary["pass"] = bool(ti < fd < fi and fd < 0.5 * fi)
    return report


# probe training --------------------------------------------------------------------

def _xent(logits: Value, labels: np.ndarray) -> Value:
    z = logits - ad.vmax_const(logits, axis=-1)
    lse = ad.log(ad.vsum(ad.exp(z), axis=-1))
    picked = z[np.arange(len(labels)), labels]
    return ad.mean(lse - picked)


def _cosine_rows(pred: Value, target: np.ndarray) -> Value:
    num = ad.vsum(pred * target, axis=-1)
    den = ad.sqrt(ad.vsum(pred * pred, axis=-1) + 1e-12) * np.linalg.norm(target, axis=-1)
    return num / den


def probe_loss(kind: str, out: Value, y: np.ndarray) -> Value:
    if kind == "mse":
        d = out - y
        return ad.mean(ad.vsum(d * d, axis=-1))
    if kind == "cosine":
        return 1.0 - ad.mean(_cosine_rows(out, y))
    if kind == "xent":
        return _xent(out, y)
    raise ValueError(f"unknown probe loss {kind!r}")


@dataclass
class TrainedProbe:
    head: FeedForward
    losses: list[float]
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.head(Value((np.asarray(x) - self.mean) / self.std)).data


def train_probe(x: np.ndarray, y: np.ndarray, kind: str, d_out: int, steps: int = PROBE_STEPS,
                lr: float = PROBE_LR, width: int = PROBE_WIDTH, batch: int = 256, seed: int = 0) -> TrainedProbe:
    """Two-layer feedforward probe on standardized inputs.

    For regression the output layer starts at zero, so the step-0 loss is the mean
    squared norm of the targets.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0) + 1e-8
    xs = (x - mean) / std
    head = FeedForward(x.shape[1], width, d_out, rng)
    if kind != "cosine":
        head.outer.weight.data[:] = 0.0
    params = head.parameters()
    opt = AdamW()
    losses = []
    n = len(xs)
    with ad.fast_matmul():
        for _ in range(steps):
            idx = rng.choice(n, size=min(batch, n), replace=False) if n > batch else np.arange(n)
            head.zero_grad()
            loss = probe_loss(kind, head(Value(xs[idx])), y[idx])
            ad.backward(loss)
            opt.step(params, {k: p.grad for k, p in params.items()}, lr)
            losses.append(float(loss.data))
    return TrainedProbe(head, losses, mean, std)


def _split(n: int, seed: int, frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(frac * n))
    return perm[:cut], perm[cut:]


def _molecule_split(mol: np.ndarray, n_mol: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of a train/test split that keeps each molecule on one side."""
    is_tr = np.isin(mol, _split(n_mol, seed)[0])
    return np.flatnonzero(is_tr), np.flatnonzero(~is_tr)


# Analysis 4 ------------------------------------------------------------------------

def masked_coordinate_features(encoder: Encoder3D, corpus: Sequence[MolGraph], mask_ratio: float,
                               seed: int = 0, k: int = 4) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per masked atom: mean encoder output (scalar and flattened vector channels) over
    its ``k`` nearest unmasked atoms, the atom's coordinates as target, and the
    molecule index."""
    rng = np.random.default_rng([seed, 4])
    plans = [sample_mask(g.n_atoms, mask_ratio, rng, 0.0) for g in corpus]
    outs = encode_many(encoder, [g.subgraph(p.unmasked) for g, p in zip(corpus, plans)])
    feats, targets, mol = [], [], []
    for mi, (g, plan, (scalar, vec)) in enumerate(zip(corpus, plans, outs)):
        keep = list(plan.unmasked)
        rows = np.concatenate([scalar, vec.reshape(len(keep), -1)], axis=1)
        for m in plan.masked:
            d = np.linalg.norm(g.coords[keep] - g.coords[m], axis=1)
            near = np.argsort(d, kind="stable")[:k]
            feats.append(rows[near].mean(axis=0))
            targets.append(g.coords[m])
            mol.append(mi)
    return np.array(feats), np.array(targets), np.array(mol)


def probe_masked_coords(encoders: Mapping[str, Encoder3D], corpus: Sequence[MolGraph], mask_ratio: float = 0.25,
                        seed: int = 0, steps: int = PROBE_STEPS, k: int = 4) -> ProbeReport:
    report = ProbeReport("analysis4", config=dict(mask_ratio=mask_ratio, seed=seed, steps=steps, k=k))
    finals, held, baseline = {}, {}, {}
    for arm, enc in encoders.items():
        before = _snapshot(enc)
        x, y, mol = masked_coordinate_features(enc, corpus, mask_ratio, seed, k)
        tr, te = _molecule_split(mol, len(corpus), seed)
        probe = train_probe(x[tr], y[tr], "mse", 3, steps=steps, seed=seed)
        assert_no_drift(enc, before, "encoder")
        report.series[arm] = probe.losses
        finals[arm] = final_window(probe.losses, 100)
        held[arm] = float(np.mean(np.sum((probe(x[te]) - y[te]) ** 2, axis=1)))
        baseline[arm] = float(np.mean(np.sum((y[tr] - y[tr].mean(axis=0)) ** 2, axis=1)))
    report.summary.update(final_window_loss=finals, heldout_loss=held, target_variance=baseline)
    if {"with_srd", "without_srd"} <= finals.keys():
        # the probe can memorize its training atoms, so arms are compared on held-out molecules
        report.summary["train_ratio"] = finals["with_srd"] / finals["without_srd"]
        report.summary["ratio"] = held["with_srd"] / held["without_srd"]
        report.summary["pass"] = bool(report.summary["ratio"] >= 1.5)
    return report


# Analysis 5 ------------------------------------------------------------------------

def pe_pairs(encoder: Encoder3D, pe: Encoder2D | RWSEEncoder, corpus: Sequence[MolGraph]):
    """Per atom: 3D encoder scalar output, position encoding and molecule index."""
    h = [scalar for scalar, _ in encode_many(encoder, corpus)]
    mol = np.concatenate([np.full(g.n_atoms, k) for k, g in enumerate(corpus)])
    return np.concatenate(h), np.concatenate(pe_many(pe, corpus)), mol


def heldout_cosine(probe: TrainedProbe, x: np.ndarray, y: np.ndarray) -> float:
    out = probe(x)
    num = np.sum(out * y, axis=1)
    den = np.linalg.norm(out, axis=1) * np.linalg.norm(y, axis=1)
    return float(np.mean(num / np.maximum(den, 1e-12)))


def probe_pe_reconstruction(pairs: Mapping[str, tuple[Encoder3D, Encoder2D | RWSEEncoder]],
                            corpus: Sequence[MolGraph], seed: int = 0, steps: int = PROBE_STEPS) -> ProbeReport:
    """Map frozen 3D features to frozen position encodings, trained on cosine."""
    report = ProbeReport("analysis5", config=dict(seed=seed, steps=steps))
    finals, held = {}, {}
    for arm, (enc, pe) in pairs.items():
        before_e, before_p = _snapshot(enc), _snapshot(pe)
        h, p, mol = pe_pairs(enc, pe, corpus)
        tr, te = _molecule_split(mol, len(corpus), seed)
        probe = train_probe(h[tr], p[tr], "cosine", p.shape[1], steps=steps, seed=seed)
        assert_no_drift(enc, before_e, "encoder")
        assert_no_drift(pe, before_p, "position encoder")
        report.series[arm] = [1.0 - v for v in probe.losses]
        finals[arm] = final_window(report.series[arm], 100)
        held[arm] = heldout_cosine(probe, h[te], p[te])
    report.summary.update(final_window_cosine=finals, heldout_cosine=held)
    if {"distilled", "control"} <= finals.keys():
        report.summary["train_margin"] = finals["distilled"] - finals["control"]
        report.summary["margin"] = held["distilled"] - held["control"]
        report.summary["pass"] = bool(held["distilled"] > 0.95 and report.summary["margin"] >= 0.2)
    return report


# Analysis 6 ------------------------------------------------------------------------

def bond_pair_samples(corpus: Sequence[MolGraph], seed: int = 0):
    """Every bonded pair plus an equal number of random non-bonded pairs per molecule.

    Label 0 is "no bond", otherwise the bond order.
    """
    rng = np.random.default_rng([seed, 6])
    out = []
    for mi, g in enumerate(corpus):
        bonded = {(i, j): o for i, j, o in g.bonds}
        free = [(i, j) for i in range(g.n_atoms) for j in range(i + 1, g.n_atoms) if (i, j) not in bonded]
        for (i, j), o in bonded.items():
            out.append((mi, i, j, o))
        if free:
            pick = rng.choice(len(free), size=min(len(free), len(bonded)), replace=False)
            out.extend((mi, *free[t], 0) for t in sorted(pick))
    return out


def _accuracy(probe: TrainedProbe, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(probe(x), axis=1) == y))


def _majority(y_train: np.ndarray, y_test: np.ndarray) -> float:
    return float(np.mean(y_test == np.bincount(y_train).argmax()))


def probe_pe_classify(pe: Encoder2D | RWSEEncoder, corpus: Sequence[MolGraph], seed: int = 0,
                      steps: int = PROBE_STEPS) -> ProbeReport:
    """Atom-type and bond-type classifiers on frozen position encodings.

    Accuracies are on a held-out 20% of molecules. The control trains on labels
    shuffled across the whole dataset and is scored against those shuffled labels,
    so its chance level is the majority-class rate.
    """
    report = ProbeReport("analysis6", config=dict(seed=seed, steps=steps))
    before = _snapshot(pe)
    enc = pe_many(pe, corpus)
    tr_mol, te_mol = _split(len(corpus), seed)
    train_set = set(tr_mol.tolist())

    atom_x = np.concatenate(enc)
    atom_y = np.concatenate([g.atom_types for g in corpus]).astype(np.int64)
    atom_mol = np.concatenate([np.full(g.n_atoms, k) for k, g in enumerate(corpus)])
    pairs = bond_pair_samples(corpus, seed)
    bond_x = np.array([np.concatenate([enc[m][i], enc[m][j]]) for m, i, j, _ in pairs])
    bond_y = np.array([o for *_, o in pairs], dtype=np.int64)
    bond_mol = np.array([m for m, *_ in pairs])

    shuffle = np.random.default_rng([seed, 7])
    results = {}
    for task, x, y, mol, n_cls in (("atom", atom_x, atom_y, atom_mol, int(atom_y.max()) + 1),
                                   ("bond", bond_x, bond_y, bond_mol, 5)):
        is_tr = np.array([m in train_set for m in mol])
        probe = train_probe(x[is_tr], y[is_tr], "xent", n_cls, steps=steps, seed=seed)
        y_shuf = y[shuffle.permutation(len(y))]
        control = train_probe(x[is_tr], y_shuf[is_tr], "xent", n_cls, steps=steps, seed=seed)
        report.series[f"{task}_loss"] = probe.losses
        report.series[f"{task}_control_loss"] = control.losses
        results[task] = dict(
            accuracy=_accuracy(probe, x[~is_tr], y[~is_tr]),
            train_accuracy=_accuracy(probe, x[is_tr], y[is_tr]),
            majority_baseline=_majority(y[is_tr], y[~is_tr]),
            control_accuracy=_accuracy(control, x[~is_tr], y_shuf[~is_tr]),
            control_chance=_majority(y_shuf[is_tr], y_shuf[~is_tr]),
            n_train=int(is_tr.sum()), n_test=int((~is_tr).sum()),
        )
    assert_no_drift(pe, before, "position encoder")
    report.summary.update(results)
    report.summary["pass"] = bool(all(r["accuracy"] > 0.99 and abs(r["control_accuracy"] - r["control_chance"]) <= 0.05
                                      for r in results.values()))
    return report


# checkpoint pairs used by analyses 4-6 ---------------------------------------------

def pretrain_arms(corpus: Sequence[MolGraph], cfg: Config, arms: Mapping[str, dict]):
    """Pretrain one model per arm (config overrides) from the same seed."""
    return {name: pretrain(corpus, cfg.replace(**over)) for name, over in arms.items()}
