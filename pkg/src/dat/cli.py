"""Command line: train runs, evaluate checkpoints, ablation suites, verification.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
Output roots resolve as --runs-dir, then $DAT_RUNS_DIR, then ./runs.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .analysis import (compare_sampling_strategies, verify_first_order_expansion,
                       verify_gradient_decomposition)
from .attacks import AttackSpec, attack_hash, pgd_energy_sample
from .config import (apply_overrides, build_cls_attack, build_embedder, build_gen_attack,
                     build_model_config, build_stage1_plan, build_stage2_plan, load_config,
                     load_data_bundle, snapshot)
from .data import derive_seed, sample_labels
from .energy import conditional_probs
from .errors import ConfigError, DatError, TrainingDivergence
from .metrics import (GaussianSummary, IdentityFlatten, MetricReport, accuracy,
                      counterfactual_fid, ece, fid, inception_score, ood_auroc, ood_scores,
                      robust_accuracy, write_reports)
from .models import EmaShadow, FROZEN_STATS, build_model, load_checkpoint, set_norm_mode
from .training import run_stage1, run_stage2, select_checkpoint

__all__ = ["main"]

_ALL_METRICS = ("robust", "fid", "is", "ood", "ece", "counterfactual")


def _runs_root(arg):
    return Path(arg or os.environ.get("DAT_RUNS_DIR") or "runs")


def _fresh_dir(path: Path):
    if path.exists():
        raise ConfigError(f"output directory {path} already exists; pick another run name")
    path.mkdir(parents=True)
    return path


# ---------------------------------------------------------------------------
# train


def _train_into(cfg, run_dir: Path):
    """Run the configured stages into run_dir; returns result summary."""
    bundle = load_data_bundle(cfg)
    model_config = build_model_config(cfg, bundle["id_train"])
    stage = cfg["run.stage"]
    summary = {}
    s1_ckpt = cfg["stage1.checkpoint"]
    if stage == "2" and not s1_ckpt:
        raise ConfigError("run.stage = '2' requires stage1.checkpoint")
    if stage in ("1", "both") and not s1_ckpt:
        plan1 = build_stage1_plan(cfg, model_config)
        result = run_stage1(plan1, bundle["id_train"], run_dir / "stage1",
                            eval_data=bundle["id_test"],
                            ood=bundle["ood_train"] if cfg["loss.kind"] == "ratio" else None)
        summary["stage1"] = result
        s1_ckpt = result.best_path
    if stage in ("2", "both"):
        if not Path(s1_ckpt).exists():
            raise ConfigError(f"stage1.checkpoint {s1_ckpt} does not exist")
        plan2 = build_stage2_plan(cfg, model_config)
        embedder = build_embedder(cfg, bundle["id_train"])
        records = run_stage2(plan2, s1_ckpt, bundle["id_train"], bundle["ood_train"],
                             run_dir / "stage2", eval_data=bundle["id_test"],
                             eval_ood=bundle["ood_test"], embedder=embedder)
        chosen = select_checkpoint(records, cfg["stage2.select"])
        (run_dir / "selected_checkpoint.txt").write_text(chosen.path + "\n")
        summary["stage2"] = chosen
    return summary


def cmd_train(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.overrides)
    run_dir = _fresh_dir(_runs_root(args.runs_dir) / cfg["run.name"])
    snapshot(cfg, run_dir / "config.snapshot")
    summary = _train_into(cfg, run_dir)
    if "stage1" in summary:
        r = summary["stage1"]
        print(f"stage1 done: best robust accuracy {r.best_robust_acc:.4f} "
              f"(checkpoint {r.best_path})")
    if "stage2" in summary:
        c = summary["stage2"]
        parts = ", ".join(f"{k}={v:.4f}" for k, v in sorted(c.metrics.items()))
        print(f"stage2 done: selected step {c.step} ({parts})")
    print(f"run directory: {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_eval_model(cfg, checkpoint):
    if not Path(checkpoint).exists():
        raise ConfigError(f"checkpoint {checkpoint} does not exist")
    model, payload = load_checkpoint(checkpoint)
    if cfg["eval.weights"] == "ema" and payload.get("ema"):
        ema = EmaShadow(model, payload["ema"]["decay"])
        ema.load_state_dict(payload["ema"])
        ema.copy_to(model)
    set_norm_mode(model, FROZEN_STATS)
    return model, payload


def _generate(cfg, model, data, ood_x, generator):
    """Class-balanced generation with the configured sampler."""
    spec = build_gen_attack(cfg)
    if cfg["gen.ancestral"]:
        k = data.num_classes
        labels = torch.arange(ood_x.shape[0], dtype=torch.int64) % k
        spec = replace(spec, objective="neg_joint_energy")
        return pgd_energy_sample(model, ood_x, spec, labels=labels, generator=generator).final
    spec = replace(spec, objective="neg_marginal_energy")
    return pgd_energy_sample(model, ood_x, spec, generator=generator).final


def cmd_eval(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.overrides)
    model, payload = _load_eval_model(cfg, args.checkpoint)
    bundle = load_data_bundle(cfg)
    id_train, id_test = bundle["id_train"], bundle["id_test"]
    ood_test = bundle["ood_test"]
    step = payload.get("step", 0)
    seed = cfg["data.seed"]
    wanted = _ALL_METRICS if args.metrics == "all" else \
        tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    unknown = [m for m in wanted if m not in _ALL_METRICS]
    if unknown:
        raise ConfigError(f"unknown metrics {unknown}; pick from {_ALL_METRICS} or 'all'")
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent
    plots_dir = out / "plots"
    rows = []

    def gen_for(tag):
        g = torch.Generator()
        g.manual_seed(derive_seed("cli_eval", tag, step, seed))
        return g

    if "robust" in wanted:
        spec = build_cls_attack(cfg)
        rows.append(MetricReport(step=step, metric="accuracy",
                                 value=accuracy(model, id_test.samples, id_test.labels),
                                 n_samples=len(id_test), seed=seed))
        rows.append(MetricReport(step=step, metric="robust_acc",
                                 value=robust_accuracy(model, id_test.samples, id_test.labels,
                                                       spec, generator=gen_for("robust")),
                                 attack_hash=attack_hash(spec),
                                 n_samples=len(id_test), seed=seed))

    generated = None
    embedder = None
    if "fid" in wanted or "is" in wanted:
        embedder = build_embedder(cfg, id_train)
        n_gen = min(cfg["eval.n_gen"], len(ood_test))
        generated = _generate(cfg, model, id_train, ood_test.samples[:n_gen], gen_for("gen"))
    if "fid" in wanted:
        ref = GaussianSummary.from_features(embedder(id_train.samples))
        gen_summary = GaussianSummary.from_features(embedder(generated))
        rows.append(MetricReport(step=step, metric="fid", value=fid(ref, gen_summary),
                                 embedder=embedder.name,
                                 attack_hash=attack_hash(build_gen_attack(cfg)),
                                 n_samples=generated.shape[0], seed=seed))
    if "is" in wanted:
        with torch.no_grad():
            probs = conditional_probs(model.logits(generated)).cpu().numpy()
        rows.append(MetricReport(step=step, metric="inception_score",
                                 value=inception_score(probs), embedder="",
                                 attack_hash=attack_hash(build_gen_attack(cfg)),
                                 n_samples=generated.shape[0], seed=seed))

    if "ood" in wanted:
        # protocol: up to 1024 OOD samples, clean and score-raising attack
        ood_x = ood_test.samples[:1024]
        base = build_cls_attack(cfg)
        adv_spec = replace(base, bound=cfg["eval.ood_eps"])
        for fn in ("neg_energy", "max_confidence"):
            id_scores = ood_scores(model, id_test.samples, fn)
            clean = ood_auroc(id_scores, ood_scores(model, ood_x, fn))
            rows.append(MetricReport(step=step, metric=f"ood_auroc_{fn}_clean", value=clean,
                                     n_samples=ood_x.shape[0], seed=seed))
            attacked = ood_scores(model, ood_x, fn, adversarial=adv_spec,
                                  generator=gen_for(f"ood_{fn}"))
            adv = ood_auroc(id_scores, attacked)
            rows.append(MetricReport(step=step, metric=f"ood_auroc_{fn}_adversarial",
                                     value=adv, attack_hash=attack_hash(adv_spec),
                                     n_samples=ood_x.shape[0], seed=seed))

    if "ece" in wanted:
        with torch.no_grad():
            probs = conditional_probs(model.logits(id_test.samples)).cpu().numpy()
        value, table = ece(probs, id_test.labels.numpy(), cfg["eval.bins"])
        rows.append(MetricReport(step=step, metric="ece", value=value,
                                 n_samples=len(id_test), seed=seed))
        from .plots import reliability_diagram
        reliability_diagram(table, plots_dir / "reliability.png")

    if "counterfactual" in wanted:
        target = cfg["eval.cf_target"]
        if id_train.labels is None or target >= id_train.num_classes:
            raise ConfigError(f"eval.cf_target {target} out of range")
        reals = id_train.samples[id_train.labels == target]
        sources = id_test.samples[id_test.labels != target]
        eps_grid = [float(e) for e in cfg["eval.cf_eps"].split(",") if e.strip()]
        base = build_cls_attack(cfg)
        embedder = embedder or build_embedder(cfg, id_train)
        cf_rows = counterfactual_fid(model, sources, reals, target, eps_grid, base,
                                     embedder, generator=gen_for("cf"))
        for r in cf_rows:
            rows.append(MetricReport(step=step, metric=f"counterfactual_fid@eps={r.eps:g}",
                                     value=r.fid, embedder=embedder.name,
                                     n_samples=sources.shape[0], seed=seed))
            rows.append(MetricReport(step=step, metric=f"counterfactual_conf@eps={r.eps:g}",
                                     value=r.confidence, n_samples=sources.shape[0],
                                     seed=seed))
        from .plots import counterfactual_curve
        counterfactual_curve(cf_rows, plots_dir / "counterfactual.png")

    train_csv = out / "logs" / "train.csv"
    if train_csv.exists():
        from .plots import training_curves
        training_curves(train_csv, plots_dir / "training.png")

    write_reports(out / "logs" / "eval.csv", rows)
    for r in rows:
        print(f"{r.metric} = {r.value}")
    return 0


# ---------------------------------------------------------------------------
# ablate


def _suite_variants(suite, cfg):
    if suite == "loss_weights":
        return [("w_1.0_1.0", {"loss.w_atce": 1.0, "loss.w_bce": 1.0}),
                ("w_0.6_1.4", {"loss.w_atce": 0.6, "loss.w_bce": 1.4}),
                ("w_1.4_0.6", {"loss.w_atce": 1.4, "loss.w_bce": 0.6})]
    if suite == "ood_size":
        return [(f"ood_{n}", {"data.ood_size": n}) for n in (10, 100, 1000)]
    if suite == "augmentation":
        return [("uniform_strong", {"data.mild_policy": cfg["data.strong_policy"]}),
                ("decoupled", {}),
                ("none_for_generative", {"data.mild_policy": "none"})]
    if suite == "t_steps":
        return [(f"t_{t}", {"gen.t_steps": t}) for t in (5, 15, 30)]
    raise ConfigError(f"unknown suite {suite!r}; pick from "
                      "loss_weights, ood_size, augmentation, t_steps")


def cmd_ablate(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.overrides)
    variants = _suite_variants(args.suite, cfg)
    suite_dir = _fresh_dir(_runs_root(args.runs_dir) / f"{cfg['run.name']}_ablate_{args.suite}")
    s1_ckpt = cfg["stage1.checkpoint"]
    if not s1_ckpt:
        # all suites vary stage-2 behavior only, so one stage-1 run is shared
        bundle = load_data_bundle(cfg)
        plan1 = build_stage1_plan(cfg, build_model_config(cfg, bundle["id_train"]))
        result = run_stage1(plan1, bundle["id_train"], suite_dir / "stage1",
                            eval_data=bundle["id_test"])
        s1_ckpt = result.best_path
        print(f"shared stage1: robust accuracy {result.best_robust_acc:.4f}")
    table = []
    for name, overrides in variants:
        vcfg = dict(cfg)
        vcfg.update(overrides)
        vcfg["run.stage"] = "2"
        vcfg["stage1.checkpoint"] = s1_ckpt
        run_dir = suite_dir / name
        run_dir.mkdir()
        snapshot(vcfg, run_dir / "config.snapshot")
        summary = _train_into(vcfg, run_dir)
        chosen = summary["stage2"]
        for metric, value in sorted(chosen.metrics.items()):
            table.append((args.suite, name, metric, value))
        print(f"variant {name}: " + ", ".join(
            f"{k}={v:.4f}" for k, v in sorted(chosen.metrics.items())))
    out_csv = suite_dir / f"ablate_{args.suite}.csv"
    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["suite", "variant", "metric", "value"])
        for row in table:
            writer.writerow([row[0], row[1], row[2], repr(float(row[3]))])
    print(f"ablation table: {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    ok = True

    residuals = []
    for trial in range(100):
        model = build_model({"kind": "mlp", "in_dim": 4, "hidden": (16, 12),
                             "num_classes": 3 + trial % 3, "batch_norm": False},
                            seed=derive_seed("verify_dec", seed, trial)).double()
        g = torch.Generator()
        g.manual_seed(derive_seed("verify_dec_x", seed, trial))
        x = torch.rand(8, 4, generator=g, dtype=torch.float64)
        y = torch.randint(0, model.num_classes, (8,), generator=g)
        residuals.append(float(verify_gradient_decomposition(model, x, y).max()))
    with open(out / "decomposition.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["trial", "max_residual"])
        for i, r in enumerate(residuals):
            writer.writerow([i, repr(r)])
    worst = max(residuals)
    dec_ok = worst < 1e-6
    ok = ok and dec_ok
    print(f"{'PASS' if dec_ok else 'FAIL'} gradient decomposition: "
          f"max residual {worst:.3e} over 100 trials (bound 1e-06)")

    model = build_model({"kind": "mlp", "in_dim": 4, "hidden": (24, 24), "num_classes": 3,
                         "batch_norm": False}, seed=derive_seed("verify_exp", seed)).double()
    g = torch.Generator()
    g.manual_seed(derive_seed("verify_exp_x", seed))
    x = torch.rand(16, 4, generator=g, dtype=torch.float64)
    y = torch.randint(0, 3, (16,), generator=g)
    rows = verify_first_order_expansion(model, x, y, [0.04, 0.02, 0.01], generator=g)
    with open(out / "expansion.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["eps", "inner_max", "linear", "rel_error", "mean_gap"])
        for r in rows:
            writer.writerow([r.eps, repr(r.inner_max), repr(r.linear),
                             repr(r.rel_error), repr(r.mean_gap)])
    errs = [r.rel_error for r in rows]
    exp_ok = all(errs[i] > errs[i + 1] for i in range(len(errs) - 1))
    ok = ok and exp_ok
    print(f"{'PASS' if exp_ok else 'FAIL'} first-order expansion: relative errors "
          + " > ".join(f"{e:.2e}" for e in errs)
          + f" over eps {[r.eps for r in rows]} (must decrease)")

    if args.checkpoint:
        if not args.config:
            raise ConfigError("sampling comparison needs --config for data and sampler")
        cfg = apply_overrides(load_config(args.config), args.overrides)
        model, _ = _load_eval_model(cfg, args.checkpoint)
        bundle = load_data_bundle(cfg)
        embedder = build_embedder(cfg, bundle["id_train"])
        n = min(cfg["eval.n_gen"], len(bundle["ood_test"]))
        fid_anc, fid_marg = compare_sampling_strategies(
            model, bundle["id_train"], bundle["ood_test"].samples[:n],
            build_gen_attack(cfg), embedder, seed=seed)
        with open(out / "sampling.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["strategy", "fid", "embedder", "n_samples"])
            writer.writerow(["ancestral", repr(fid_anc), embedder.name, n])
            writer.writerow(["marginal", repr(fid_marg), embedder.name, n])
        marker = "<=" if fid_anc <= fid_marg else ">"
        print(f"INFO sampling comparison: ancestral FID {fid_anc:.4f} {marker} "
              f"marginal FID {fid_marg:.4f}")

    return 0 if ok else 1


# ---------------------------------------------------------------------------


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="dat",
        description="Train and evaluate a robust classifier that doubles as a "
                    "PGD-sampled generative model.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="run the configured training stages")
    p.add_argument("config", help="TOML config path")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--runs-dir", default=None, help="output root (default $DAT_RUNS_DIR or ./runs)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--metrics", default="all",
                   help="comma list from " + ",".join(_ALL_METRICS) + " or 'all'")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")
    p.add_argument("--out", default=None, help="output dir (default: the checkpoint's run dir)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("suite", help="loss_weights | ood_size | augmentation | t_steps")
    p.add_argument("--config", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")
    p.add_argument("--runs-dir", default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("verify", help="numerical verification suite")
    p.add_argument("--checkpoint", default=None,
                   help="trained model for the sampling-strategy comparison")
    p.add_argument("--config", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")
    p.add_argument("--out", default="analysis")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TrainingDivergence as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
