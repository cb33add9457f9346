"""Command-line driver.

Every command that trains or probes writes into ``--run-dir``: ``config.txt``
(the resolved configuration), metric CSVs and, where a model is produced,
``model.mg3d``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, inspect_checkpoint, load_checkpoint, save_checkpoint, subset
from .config import Config, ConfigError, load_config
from .gradcheck import run_suite
from .model import MaskedAutoencoder, PropertyModel
from .molgraph import (
    GenerationError,
    Mol3DParseError,
    MolValidationError,
    VocabularyError,
    attach_count_labels,
    attach_harmonic_labels,
    generate_synthetic,
    read_mol3d,
    save_mol3d,
)
from .probes import leakage_experiment, probe_masked_coords, probe_pe_classify, probe_pe_reconstruction
from .train import FINETUNE_COLUMNS, PRETRAIN_COLUMNS, DataError, TrainingError, evaluate, finetune, pretrain, write_csv

log = logging.getLogger("molmgm")

USAGE_EXIT = 2
FAILURE_EXIT = 1


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="molmgm", description="3D masked graph modeling toolkit",
                                epilog="Config keys can be overridden with --key=value after the command.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, run=True):
        sp.add_argument("--config", help="flat key = value config file")
        if data:
            sp.add_argument("--data", required=True, help=".mol3d corpus")
        if run:
            sp.add_argument("--run-dir", required=True)

    g = sub.add_parser("gen", help="write a synthetic .mol3d corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--natoms", default="5,12", help="inclusive range lo,hi")
    g.add_argument("--labels", choices=["none", "count", "harmonic"], default="none")

    pt = sub.add_parser("pretrain", help="masked-coordinate pretraining")
    common(pt)
    pt.add_argument("--init", help="resume from an MG3D checkpoint")

    ft = sub.add_parser("finetune", help="supervised finetuning on labels")
    common(ft)
    ft.add_argument("--init", help="pretrained MG3D checkpoint (encoder.* is loaded)")

    pr = sub.add_parser("probe", help="leakage and probing analyses")
    pr.add_argument("analysis", choices=["analysis1", "analysis4", "analysis5", "analysis6"])
    common(pr)
    pr.add_argument("--ckpt", help="pretrained checkpoint (analysis5/6; with-SRD arm for analysis4)")
    pr.add_argument("--ckpt-control", help="without-SRD checkpoint for analysis4")
    pr.add_argument("--probe-steps", type=int, default=2000)

    gc = sub.add_parser("gradcheck", help="finite-difference suite over all losses")
    common(gc, data=False, run=False)
    gc.add_argument("--run-dir")
    gc.add_argument("--seeds", type=int, default=20)

    ev = sub.add_parser("eval", help="metrics of a finetuned checkpoint on a labeled corpus")
    common(ev, run=False)
    ev.add_argument("--ckpt", required=True)

    ic = sub.add_parser("inspect-ckpt", help="list tensors in an MG3D checkpoint")
    ic.add_argument("path")
    return p


def _run_dir(path: str, cfg: Config) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return out


def _corpus(path: str):
    mols = read_mol3d(path)
    if not mols:
        raise DataError(f"{path} holds no molecules")
    return mols


def _load_into(model, path: str, prefix: str = "") -> None:
    state = load_checkpoint(path)
    if prefix:
        state = subset(state, prefix)
    model.load_state_dict(state)


def cmd_gen(args, cfg: Config) -> int:
    try:
        lo, hi = (int(v) for v in args.natoms.split(","))
    except ValueError:
        raise UsageError("--natoms must look like lo,hi") from None
    mols = generate_synthetic(args.seed, args.count, (lo, hi))
    if args.labels == "count":
        mols = attach_count_labels(mols, args.seed)
    elif args.labels == "harmonic":
        mols = attach_harmonic_labels(mols)
    save_mol3d(args.out, mols)
    print(f"wrote {len(mols)} molecules to {args.out}")
    return 0


def cmd_pretrain(args, cfg: Config) -> int:
    corpus = _corpus(args.data)
    out = _run_dir(args.run_dir, cfg)
    model = MaskedAutoencoder(cfg, np.random.default_rng(cfg.seed))
    if args.init:
        _load_into(model, args.init)
    run = pretrain(corpus, cfg, model=model)
    write_csv(out / "metrics.csv", PRETRAIN_COLUMNS, run.log)
    save_checkpoint(out / "model.mg3d", model.state_dict())
    last = run.log[-1] if run.log else {}
    print(f"pretrained {cfg.max_steps} steps; final loss_total={last.get('loss_total', float('nan')):.6g}")
    return 0


def cmd_finetune(args, cfg: Config) -> int:
    corpus = _corpus(args.data)
    out = _run_dir(args.run_dir, cfg)
    model = PropertyModel(cfg, np.random.default_rng(cfg.seed))
    if args.init:
        _load_into(model.encoder, args.init, "encoder.")
    run = finetune(corpus, cfg, model=model)
    write_csv(out / "metrics.csv", FINETUNE_COLUMNS, run.log)
    save_checkpoint(out / "model.mg3d", model.state_dict())
    metrics = evaluate(model, corpus, cfg.label, cfg.task == "energy+forces", cfg.fd_step)
    (out / "train_metrics.json").write_text(json.dumps(metrics, indent=2))
    print(f"finetuned {cfg.max_steps} steps; train mae={metrics['mae']:.6g}")
    return 0


def _pretrained(corpus, cfg: Config, ckpt: str | None, **over) -> MaskedAutoencoder:
    arm = cfg.replace(**over)
    if ckpt:
        model = MaskedAutoencoder(arm, np.random.default_rng(arm.seed))
        _load_into(model, ckpt)
        return model
    return pretrain(corpus, arm).model


def cmd_probe(args, cfg: Config) -> int:
    corpus = _corpus(args.data)
    out = _run_dir(args.run_dir, cfg)
    steps = args.probe_steps
    if args.analysis == "analysis1":
        report = leakage_experiment(corpus, cfg)
    elif args.analysis == "analysis4":
        srd = _pretrained(corpus, cfg, args.ckpt, use_srd=True, use_distill=True)
        plain = _pretrained(corpus, cfg, args.ckpt_control, use_srd=False, use_distill=True)
        report = probe_masked_coords({"with_srd": srd.encoder, "without_srd": plain.encoder}, corpus,
                                     cfg.mask_ratio, cfg.seed, steps)
    elif args.analysis == "analysis5":
        arm = cfg.replace(use_srd=True, use_distill=True)
        model = _pretrained(corpus, cfg, args.ckpt, use_srd=True, use_distill=True)
        # control: the same position encoder at its initial weights
        control = MaskedAutoencoder(arm, np.random.default_rng(arm.seed))
        report = probe_pe_reconstruction({"distilled": (model.encoder, model.pe),
                                          "control": (model.encoder, control.pe)}, corpus, cfg.seed, steps)
    else:
        model = _pretrained(corpus, cfg, args.ckpt, use_srd=True, use_distill=True)
        report = probe_pe_classify(model.pe, corpus, cfg.seed, steps)
    csv_path, json_path = report.write(out)
    print(json.dumps(report.summary, indent=2, default=str))
    print(f"wrote {csv_path} and {json_path}")
    return 0


def cmd_gradcheck(args, cfg: Config) -> int:
    report = run_suite(cfg, seeds=args.seeds)
    if args.run_dir:
        out = _run_dir(args.run_dir, cfg)
        write_csv(out / "gradcheck.csv", ("check", "n_atoms", "seed", "max_rel_err"),
                  [vars(r) for r in report.rows])
    for name, err in report.by_check().items():
        print(f"{name:16s} max rel err {err:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: worst {report.worst:.3e} (tolerance {report.tolerance:g}) in {report.seconds:.1f}s")
    return 0 if report.passed else FAILURE_EXIT


def cmd_eval(args, cfg: Config) -> int:
    corpus = _corpus(args.data)
    model = PropertyModel(cfg, np.random.default_rng(cfg.seed))
    _load_into(model, args.ckpt)
    metrics = evaluate(model, corpus, cfg.label, cfg.task == "energy+forces", cfg.fd_step)
    print(json.dumps(metrics, indent=2))
    return 0


def cmd_inspect(args, cfg: Config) -> int:
    entries = inspect_checkpoint(args.path)
    total = 0
    for name, shape in entries:
        size = int(np.prod(shape)) if shape else 1
        total += size
        print(f"{name}\t{'x'.join(map(str, shape)) or 'scalar'}")
    print(f"{len(entries)} tensors, {total} values")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "gradcheck": cmd_gradcheck,
    "eval": cmd_eval,
    "inspect-ckpt": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return USAGE_EXIT if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    bad = [e for e in extra if not (e.startswith("--") and "=" in e)]
    if bad:
        parser.print_usage(sys.stderr)
        print(f"molmgm: error: unrecognized arguments: {' '.join(bad)}", file=sys.stderr)
        return USAGE_EXIT
    try:
        cfg = load_config(getattr(args, "config", None), extra)
    except ConfigError as exc:
        print(f"molmgm: error: {exc}", file=sys.stderr)
        return USAGE_EXIT if str(exc).startswith("unknown config key") else FAILURE_EXIT
    except OSError as exc:
        print(f"molmgm: error: {exc}", file=sys.stderr)
        return FAILURE_EXIT
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"molmgm: error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (Mol3DParseError, MolValidationError, VocabularyError, GenerationError, CheckpointError,
            DataError, TrainingError, ConfigError, KeyError, ValueError, OSError) as exc:
        print(f"molmgm: error: {exc}", file=sys.stderr)
        return FAILURE_EXIT


if __name__ == "__main__":
    sys.exit(main())
