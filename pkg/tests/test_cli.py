import json

import numpy as np
import pytest

from molmgm.checkpoint import inspect_checkpoint
from molmgm.cli import main
from molmgm.config import Config, ConfigError, load_config, parse_config_text
from molmgm.molgraph import read_mol3d

from conftest import TINY

SMALL = [f"--{k}={v}" for k, v in TINY.items()] + ["--batch_size=2", "--warmup_steps=1", "--max_steps=2"]


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "toy.mol3d"
    assert main(["gen", "--out", str(path), "--seed", "1", "--count", "6", "--natoms", "4,7", "--labels", "count"]) == 0
    return path


def test_config_text_roundtrip(tmp_path):
    cfg = Config(mask_ratio=0.3, use_srd=False, pe_kind="rwse")
    assert parse_config_text(cfg.to_text()) == cfg
    path = tmp_path / "c.txt"
    path.write_text("# comment\nmask_ratio = 0.5  # trailing\n\nlayers = 3\n")
    cfg = load_config(path, ["--layers=4"])
    assert cfg.mask_ratio == 0.5 and cfg.layers == 4


@pytest.mark.parametrize("text", ["nope = 1", "layers = many", "mask_ratio = 1.5", "use_srd = perhaps",
                                  "lr_min = 1\nlr_init = 0.1", "just words"])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_documented_defaults():
    cfg = Config()
    assert (cfg.mask_ratio, cfg.noise_scale, cfg.denoise_weight) == (0.25, 0.04, 0.1)
    assert (cfg.force_weight, cfg.energy_weight, cfg.ema_alpha_y, cfg.ema_alpha_dy) == (0.8, 0.2, 0.05, 1.0)
    assert (cfg.d_model, cfg.heads, cfg.layers, cfg.pe_dim, cfg.pe_heads, cfg.decoder_layers) == (256, 8, 12, 64, 4, 2)
    assert (cfg.lr_init, cfg.lr_min, cfg.warmup_steps) == (5e-5, 1e-6, 10000)


def test_gen_writes_corpus(corpus):
    mols = read_mol3d(corpus)
    assert len(mols) == 6 and all("y" in m.labels for m in mols)


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["explode"]) == 2
    assert main(["gen"]) == 2
    assert main(["gen", "--out", str(tmp_path / "x"), "stray"]) == 2
    assert main(["gen", "--out", str(tmp_path / "x"), "--no_such_key=1"]) == 2
    assert main(["gen", "--out", str(tmp_path / "x"), "--natoms", "five"]) == 2
    assert "error" in capsys.readouterr().err


def test_validation_failures(tmp_path, corpus):
    run = str(tmp_path / "run")
    assert main(["pretrain", "--data", str(tmp_path / "missing.mol3d"), "--run-dir", run]) == 1
    bad = tmp_path / "bad.mol3d"
    bad.write_text("this is not a molecule\n")
    assert main(["pretrain", "--data", str(bad), "--run-dir", run]) == 1
    assert main(["pretrain", "--data", str(corpus), "--run-dir", run, "--mask_ratio=2"]) == 1
    junk = tmp_path / "junk.mg3d"
    junk.write_bytes(b"MG3D garbage")
    assert main(["inspect-ckpt", str(junk)]) == 1
    assert main(["finetune", "--data", str(corpus), "--run-dir", run, "--label=missing", *SMALL]) == 1


def test_pretrain_finetune_eval_inspect(tmp_path, corpus, capsys):
    pre = tmp_path / "pre"
    assert main(["pretrain", "--data", str(corpus), "--run-dir", str(pre), *SMALL]) == 0
    assert (pre / "config.txt").exists() and (pre / "metrics.csv").exists()
    snap = load_config(pre / "config.txt")
    assert snap.layers == TINY["layers"] and snap.max_steps == 2
    lines = (pre / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss_total,loss_mgm,loss_denoise,loss_distill,distill_cosine_mean"
    assert len(lines) == 3
    capsys.readouterr()
    assert main(["inspect-ckpt", str(pre / "model.mg3d")]) == 0
    listing = capsys.readouterr().out
    names = dict(inspect_checkpoint(pre / "model.mg3d"))
    layers = {k.split(".")[3] for k in names if k.startswith("encoder.stack.layers.")}
    assert layers == {str(i) for i in range(TINY["layers"])}
    assert names["encoder.stack.layers.0.w_q"] == (2 * TINY["d_model"], TINY["d_model"])
    assert "encoder.stack.layers.1.w_vec" in listing

    fine = tmp_path / "fine"
    assert main(["finetune", "--data", str(corpus), "--run-dir", str(fine), "--init", str(pre / "model.mg3d"),
                 *SMALL]) == 0
    assert json.loads((fine / "train_metrics.json").read_text())["count"] == 6
    capsys.readouterr()
    assert main(["eval", "--data", str(corpus), "--ckpt", str(fine / "model.mg3d"), *SMALL]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert np.isfinite(metrics["mae"])


def test_seed_fixed_runs_identical(tmp_path, corpus):
    for name in ("a", "b"):
        assert main(["pretrain", "--data", str(corpus), "--run-dir", str(tmp_path / name), *SMALL]) == 0
    assert (tmp_path / "a" / "model.mg3d").read_bytes() == (tmp_path / "b" / "model.mg3d").read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()


def test_probe_command(tmp_path, corpus):
    out = tmp_path / "p6"
    assert main(["probe", "analysis6", "--data", str(corpus), "--run-dir", str(out), "--probe-steps", "5",
                 *SMALL]) == 0
    summary = json.loads(next(out.glob("*.json")).read_text())
    assert "summary" in summary or summary


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--seeds", "1", "--run-dir", str(tmp_path / "g")]) == 0
    assert "PASS" in capsys.readouterr().out
    assert (tmp_path / "g" / "gradcheck.csv").exists()
