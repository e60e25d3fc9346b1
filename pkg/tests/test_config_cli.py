import csv
from pathlib import Path

import pytest
import tomli
import torch

from dat.cli import main
from dat.config import (DEFAULTS, apply_overrides, build_cls_attack, build_gen_attack,
                        build_model_config, build_stage1_plan, build_stage2_plan,
                        load_config, load_data_bundle, snapshot)
from dat.data import load_dataset
from dat.errors import ConfigError


def _write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


_TINY = """
run.name = "tiny"
data.id_size = 64
data.ood_size = 64
data.eval_size = 64
data.batch = 16
model.hidden = "8,8"
attack.steps = 2
gen.t_steps = 2
stage1.steps = 2
stage1.eval_every = 2
stage1.checkpoint_every = 2
stage2.steps = 2
stage2.eval_every = 2
stage2.checkpoint_every = 2
eval.n_gen = 32
"""


# config loading


def test_load_config_fills_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, 'run.name = "x"\nstage1.steps = 7\n'))
    assert cfg["run.name"] == "x"
    assert cfg["stage1.steps"] == 7
    assert cfg["stage2.lr"] == DEFAULTS["stage2.lr"]


def test_load_config_rejects_unknown_key(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "stage3.steps = 7\n"))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "stage1.step = 7\n"))


def test_load_config_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/cfg.toml")


def test_load_config_type_strictness(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "stage1.steps = 7.5\n"))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "model.batch_norm = 1\n"))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, 'attack.eps = "big"\n'))
    cfg = load_config(_write(tmp_path, "attack.eps = 1\n"))
    assert cfg["attack.eps"] == 1.0 and isinstance(cfg["attack.eps"], float)


def test_gen_bound_number_or_none(tmp_path):
    assert load_config(_write(tmp_path, "gen.bound = 0.5\n"))["gen.bound"] == 0.5
    assert load_config(_write(tmp_path, 'gen.bound = "none"\n'))["gen.bound"] == "none"
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, 'gen.bound = "infinite"\n'))


def test_validate_enums_and_ratio_rules(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, 'loss.kind = "gan"\n'))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, 'loss.kind = "ratio"\n'))  # needs ratio.eps_o
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, 'loss.kind = "ratio"\nratio.eps_o = 0.5\n'))
    cfg = load_config(_write(tmp_path,
                             'loss.kind = "ratio"\nratio.eps_o = 0.5\nrun.stage = "1"\n'))
    assert cfg["ratio.eps_o"] == 0.5
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, 'data.strong_policy = "mixup"\n'))


def test_apply_overrides_typed():
    cfg = apply_overrides(dict(DEFAULTS), ["stage1.steps=9", "attack.eps=0.25",
                                           "model.batch_norm=false", "run.name=o"])
    assert cfg["stage1.steps"] == 9
    assert cfg["attack.eps"] == 0.25
    assert cfg["model.batch_norm"] is False
    assert cfg["run.name"] == "o"
    with pytest.raises(ConfigError):
        apply_overrides(dict(DEFAULTS), ["stage1.steps"])
    with pytest.raises(ConfigError):
        apply_overrides(dict(DEFAULTS), ["stage1.steps=soon"])
    with pytest.raises(ConfigError):
        apply_overrides(dict(DEFAULTS), ["nope=1"])


def test_snapshot_roundtrips_through_toml(tmp_path):
    cfg = apply_overrides(dict(DEFAULTS), ["ratio.lam=2.5", 'run.name=snap'])
    path = snapshot(cfg, tmp_path / "config.snapshot")
    with open(path, "rb") as f:
        parsed = tomli.load(f)
    reloaded = load_config(path)
    assert reloaded == cfg
    assert parsed["ratio"]["lam"] == 2.5


# builders


def test_build_attacks_from_config():
    cfg = dict(DEFAULTS)
    cls = build_cls_attack(cfg)
    assert cls.bound == cfg["attack.eps"] and cls.objective == "cross_entropy"
    gen = build_gen_attack(cfg)
    assert gen.bound is None and gen.objective == "neg_joint_energy"
    cfg["gen.ancestral"] = False
    assert build_gen_attack(cfg).objective == "neg_marginal_energy"
    cfg["attack.step_size"] = -1.0
    with pytest.raises(ConfigError):
        build_cls_attack(cfg)


def test_build_model_config_checks_shape():
    cfg = dict(DEFAULTS)
    moons = load_dataset("two_moons_id", "train", seed=0, size=32)
    digits = load_dataset("small_digits_id", "train", seed=0, size=32)
    mc = build_model_config(cfg, moons)
    assert mc == {"kind": "mlp", "in_dim": 2, "hidden": (64, 64), "num_classes": 2,
                  "batch_norm": True}
    with pytest.raises(ConfigError):
        build_model_config(cfg, digits)
    cfg["model.kind"] = "conv"
    assert build_model_config(cfg, digits)["in_shape"] == (1, 8, 8)
    with pytest.raises(ConfigError):
        build_model_config(cfg, moons)


def test_build_plans_from_config():
    cfg = apply_overrides(dict(DEFAULTS), ["data.id_size=64"])
    bundle = load_data_bundle(cfg)
    mc = build_model_config(cfg, bundle["id_train"])
    p1 = build_stage1_plan(cfg, mc)
    assert p1.stage == 1 and p1.weights.w_bce == 0.0
    p2 = build_stage2_plan(cfg, mc)
    assert p2.stage == 2 and p2.gen_attack is not None
    assert len(bundle["id_train"]) == 64


def test_bad_data_name_is_config_error():
    cfg = dict(DEFAULTS)
    cfg["data.ood"] = "folder:/nonexistent_dir"
    with pytest.raises(ConfigError):
        load_data_bundle(cfg)


# cli


def test_cli_train_writes_run_layout(tmp_path):
    cfg = _write(tmp_path, _TINY)
    rc = main(["train", cfg, "--runs-dir", str(tmp_path / "runs")])
    assert rc == 0
    run = tmp_path / "runs" / "tiny"
    assert (run / "config.snapshot").exists()
    assert (run / "stage1" / "checkpoints" / "best.ckpt").exists()
    assert (run / "stage2" / "logs" / "train.csv").exists()
    assert (run / "selected_checkpoint.txt").exists()
    with open(run / "stage2" / "logs" / "train.csv") as f:
        header = next(csv.reader(f))
    assert header == ["step", "loss_total", "loss_atce", "loss_bce"]
    with open(run / "stage2" / "logs" / "eval.csv") as f:
        header = next(csv.reader(f))
    assert header == ["step", "metric", "value", "embedder", "attack_hash",
                      "n_samples", "seed"]


def test_cli_train_refuses_existing_run_dir(tmp_path, capsys):
    cfg = _write(tmp_path, _TINY)
    (tmp_path / "runs" / "tiny").mkdir(parents=True)
    rc = main(["train", cfg, "--runs-dir", str(tmp_path / "runs")])
    assert rc == 2
    assert "already exists" in capsys.readouterr().err


def test_cli_runs_dir_env_fallback(tmp_path, monkeypatch):
    cfg = _write(tmp_path, _TINY)
    monkeypatch.setenv("DAT_RUNS_DIR", str(tmp_path / "from_env"))
    rc = main(["train", cfg, "--set", "run.stage=1"])
    assert rc == 0
    assert (tmp_path / "from_env" / "tiny" / "stage1" / "logs" / "train.csv").exists()


def test_cli_stage2_needs_checkpoint(tmp_path, capsys):
    cfg = _write(tmp_path, _TINY)
    rc = main(["train", cfg, "--runs-dir", str(tmp_path / "runs"),
               "--set", "run.stage=2"])
    assert rc == 2
    assert "stage1.checkpoint" in capsys.readouterr().err


def test_cli_train_replay_is_byte_identical(tmp_path):
    cfg = _write(tmp_path, _TINY)
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "a")]) == 0
    assert main(["train", cfg, "--runs-dir", str(tmp_path / "b")]) == 0
    for rel in ("stage1/logs/train.csv", "stage1/logs/eval.csv",
                "stage2/logs/train.csv", "stage2/logs/eval.csv", "config.snapshot"):
        fa = (tmp_path / "a" / "tiny" / rel).read_bytes()
        fb = (tmp_path / "b" / "tiny" / rel).read_bytes()
        assert fa == fb, rel


def test_cli_eval_and_replay(tmp_path):
    cfg = _write(tmp_path, _TINY)
    main(["train", cfg, "--runs-dir", str(tmp_path / "runs")])
    ckpt = (tmp_path / "runs" / "tiny" / "selected_checkpoint.txt").read_text().strip()
    for out in ("e1", "e2"):
        rc = main(["eval", ckpt, "--config", cfg, "--out", str(tmp_path / out)])
        assert rc == 0
    ea = (tmp_path / "e1" / "logs" / "eval.csv").read_bytes()
    eb = (tmp_path / "e2" / "logs" / "eval.csv").read_bytes()
    assert ea == eb
    assert (tmp_path / "e1" / "plots" / "reliability.png").exists()
    assert (tmp_path / "e1" / "plots" / "counterfactual.png").exists()
    with open(tmp_path / "e1" / "logs" / "eval.csv") as f:
        metrics = {row["metric"] for row in csv.DictReader(f)}
    for name in ("accuracy", "robust_acc", "fid", "inception_score", "ece",
                 "ood_auroc_neg_energy_clean", "ood_auroc_neg_energy_adversarial",
                 "ood_auroc_max_confidence_clean",
                 "ood_auroc_max_confidence_adversarial"):
        assert name in metrics
    assert any(m.startswith("counterfactual_fid@") for m in metrics)


def test_cli_eval_rejects_unknown_metric(tmp_path, capsys):
    cfg = _write(tmp_path, _TINY)
    main(["train", cfg, "--runs-dir", str(tmp_path / "runs"), "--set", "run.stage=1"])
    ckpt = tmp_path / "runs" / "tiny" / "stage1" / "checkpoints" / "best.ckpt"
    rc = main(["eval", str(ckpt), "--config", cfg, "--metrics", "bleu"])
    assert rc == 2
    rc = main(["eval", str(tmp_path / "missing.ckpt"), "--config", cfg])
    assert rc == 2


def test_cli_ablate_writes_long_table(tmp_path):
    cfg = _write(tmp_path, _TINY)
    rc = main(["ablate", "loss_weights", "--config", cfg,
               "--runs-dir", str(tmp_path / "runs")])
    assert rc == 0
    table = tmp_path / "runs" / "tiny_ablate_loss_weights" / "ablate_loss_weights.csv"
    with open(table) as f:
        rows = list(csv.DictReader(f))
    assert {r["variant"] for r in rows} == {"w_1.0_1.0", "w_0.6_1.4", "w_1.4_0.6"}
    assert all(r["suite"] == "loss_weights" for r in rows)
    assert {"fid", "robust_acc"} <= {r["metric"] for r in rows}
    rc = main(["ablate", "nonsense", "--config", cfg,
               "--runs-dir", str(tmp_path / "r2")])
    assert rc == 2


def test_cli_verify_passes_and_writes_csvs(tmp_path):
    rc = main(["verify", "--out", str(tmp_path / "an"), "--seed", "1"])
    assert rc == 0
    with open(tmp_path / "an" / "decomposition.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 100
    assert max(float(r["max_residual"]) for r in rows) < 1e-6
    with open(tmp_path / "an" / "expansion.csv") as f:
        rows = list(csv.DictReader(f))
    errs = [float(r["rel_error"]) for r in rows]
    assert errs == sorted(errs, reverse=True)


def test_cli_bad_config_exit_code(tmp_path, capsys):
    bad = _write(tmp_path, "stage9.lr = 1\n")
    assert main(["train", bad]) == 2
    assert "error:" in capsys.readouterr().err
