"""Flat dotted-key TOML configuration: schema, loading, snapshots, builders.

Every tunable has a key here; presets carry the reference-scale values
in comments next to the desk-scale defaults. A run's exact config is
snapshotted into its run directory as sorted `key = value` lines, which
tomli can read back.
"""

from __future__ import annotations

from pathlib import Path

import tomli

from .attacks import AttackSpec
from .data import load_dataset, parse_policy
from .errors import ConfigError, DatError
from .metrics import IdentityFlatten
from .objectives import LossTermWeights
from .training import OptimizerSpec, StagePlan

__all__ = [
    "DEFAULTS",
    "load_config",
    "apply_overrides",
    "snapshot",
    "build_model_config",
    "build_stage1_plan",
    "build_stage2_plan",
    "build_cls_attack",
    "build_gen_attack",
    "load_data_bundle",
    "build_embedder",
]

DEFAULTS = {
    "run.name": "run",
    "run.stage": "both",              # 1 | 2 | both
    "model.kind": "mlp",              # mlp | conv
    "model.hidden": "64,64",          # mlp layer widths
    "model.width": 16,                # conv channel width
    "model.batch_norm": True,
    "data.id": "two_moons_id",
    "data.ood": "ring_ood",
    "data.strong_policy": "none",
    "data.mild_policy": "none",
    "data.batch": 128,
    "data.seed": 0,
    "data.id_size": 0,                # 0 = dataset default
    "data.ood_size": 0,
    "data.eval_size": 0,
    "attack.steps": 10,
    "attack.step_size": 0.0125,       # 2.5 * eps / steps
    "attack.eps": 0.05,               # below the two-moons class margin
    "attack.objective": "cross_entropy",
    "attack.clamp01": False,
    "attack.init_noise": 0.0,
    "attack.step_rule": "normalized",
    "gen.t_steps": 20,                # reference: 40
    "gen.step_size": 0.05,
    "gen.bound": "none",              # unconstrained sampling
    "gen.ancestral": True,
    "gen.clamp01": False,
    "stage1.steps": 500,
    "stage1.lr": 0.05,
    "stage1.eval_every": 100,
    "stage1.checkpoint_every": 100,
    "stage1.checkpoint": "",          # reuse an existing stage-1 checkpoint
    "stage2.steps": 300,
    "stage2.lr": 0.001,
    "stage2.eval_every": 50,
    "stage2.checkpoint_every": 50,
    "stage2.random_t": False,
    "stage2.gen_loss": "bce",         # bce | reference (diagnostic)
    "stage2.select": "best_fid",      # best_fid | best_robust | last
    "stage2.init_weights": "ema",     # ema | raw
    "loss.kind": "dat",               # dat | ratio
    "loss.w_atce": 1.0,
    "loss.w_bce": 1.0,
    "ratio.lam": 1.0,
    "opt.momentum": 0.9,
    "opt.nesterov": True,
    "opt.weight_decay": 5e-4,
    "ema.decay": 0.999,
    "eval.weights": "ema",            # ema | raw
    "eval.embedder": "identity_flatten",
    "eval.ood_eps": 0.1,              # budget when attacking detection scores
    "eval.bins": 15,
    "eval.cf_target": 0,
    "eval.cf_eps": "0.0,0.1,0.2,0.3",
    "eval.n_gen": 512,
    "eval.probe_steps": 300,
}

# valid keys without a default; required only in specific modes
OPTIONAL_KEYS = {"ratio.eps_o": float}


def _flatten(nested, prefix=""):
    flat = {}
    for key, value in nested.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{full}."))
        else:
            flat[full] = value
    return flat


def _coerce(key, value):
    if key in OPTIONAL_KEYS:
        target = OPTIONAL_KEYS[key]
    else:
        target = type(DEFAULTS[key])
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if key == "gen.bound" and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def load_config(path) -> dict:
    """Read a TOML config, validate keys and types, fill defaults."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            nested = tomli.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist")
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}")
    cfg = dict(DEFAULTS)
    for key, value in _flatten(nested).items():
        if key not in DEFAULTS and key not in OPTIONAL_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value)
    _validate(cfg)
    return cfg


def apply_overrides(cfg, overrides) -> dict:
    """Apply "key=value" strings (CLI --set) onto a loaded config."""
    cfg = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        raw = raw.strip()
        if key not in DEFAULTS and key not in OPTIONAL_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        target = OPTIONAL_KEYS.get(key, type(DEFAULTS.get(key)))
        try:
            if target is bool:
                if raw.lower() not in ("true", "false"):
                    raise ValueError
                value = raw.lower() == "true"
            elif target is int:
                value = int(raw)
            elif target is float:
                value = float(raw)
            else:
                value = raw
                if key == "gen.bound" and raw != "none":
                    value = float(raw)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {target.__name__}")
        cfg[key] = value
    _validate(cfg)
    return cfg


def _validate(cfg):
    def expect(key, options):
        if cfg[key] not in options:
            raise ConfigError(f"{key}: must be one of {options}, got {cfg[key]!r}")

    expect("run.stage", ("1", "2", "both"))
    expect("model.kind", ("mlp", "conv"))
    expect("loss.kind", ("dat", "ratio"))
    expect("stage2.gen_loss", ("bce", "reference"))
    expect("stage2.select", ("best_fid", "best_robust", "last"))
    expect("stage2.init_weights", ("ema", "raw"))
    expect("eval.weights", ("ema", "raw"))
    expect("eval.embedder", ("identity_flatten", "trained_probe"))
    expect("attack.step_rule", ("normalized", "sign"))
    if cfg["loss.kind"] == "ratio" and "ratio.eps_o" not in cfg:
        raise ConfigError("loss.kind = 'ratio' requires ratio.eps_o (no default)")
    if cfg["loss.kind"] == "ratio" and cfg["run.stage"] != "1":
        raise ConfigError("the ratio baseline is single-stage; set run.stage = '1'")
    bound = cfg["gen.bound"]
    if isinstance(bound, str) and bound != "none":
        raise ConfigError(f"gen.bound: expected a number or 'none', got {bound!r}")
    try:
        parse_policy(cfg["data.strong_policy"])
        parse_policy(cfg["data.mild_policy"])
    except DatError as e:
        raise ConfigError(str(e))


def _toml_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    escaped = str(value).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def snapshot(cfg, path):
    """Write the full effective config as sorted TOML lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {_toml_value(cfg[key])}" for key in sorted(cfg)]
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# builders


def build_cls_attack(cfg) -> AttackSpec:
    try:
        return AttackSpec(steps=cfg["attack.steps"], step_size=cfg["attack.step_size"],
                          objective=cfg["attack.objective"], bound=cfg["attack.eps"],
                          init_noise=cfg["attack.init_noise"], clamp01=cfg["attack.clamp01"],
                          step_rule=cfg["attack.step_rule"])
    except DatError as e:
        raise ConfigError(f"attack.*: {e}")


def build_gen_attack(cfg) -> AttackSpec:
    bound = cfg["gen.bound"]
    bound = None if bound == "none" else float(bound)
    try:
        return AttackSpec(steps=cfg["gen.t_steps"], step_size=cfg["gen.step_size"],
                          objective="neg_joint_energy" if cfg["gen.ancestral"]
                          else "neg_marginal_energy",
                          bound=bound, clamp01=cfg["gen.clamp01"])
    except DatError as e:
        raise ConfigError(f"gen.*: {e}")


def build_model_config(cfg, data) -> dict:
    if cfg["model.kind"] == "mlp":
        if len(data.sample_shape) != 1:
            raise ConfigError(f"model.kind 'mlp' needs flat samples, got {data.sample_shape}")
        hidden = tuple(int(h) for h in cfg["model.hidden"].split(",") if h.strip())
        return {"kind": "mlp", "in_dim": data.sample_shape[0], "hidden": hidden,
                "num_classes": data.num_classes, "batch_norm": cfg["model.batch_norm"]}
    if len(data.sample_shape) != 3:
        raise ConfigError(f"model.kind 'conv' needs image samples, got {data.sample_shape}")
    return {"kind": "conv", "in_shape": data.sample_shape,
            "num_classes": data.num_classes, "width": cfg["model.width"]}


def _optimizer(cfg, lr) -> OptimizerSpec:
    return OptimizerSpec(lr=lr, momentum=cfg["opt.momentum"], nesterov=cfg["opt.nesterov"],
                         weight_decay=cfg["opt.weight_decay"])


def build_stage1_plan(cfg, model_config) -> StagePlan:
    ratio = cfg["loss.kind"] == "ratio"
    try:
        return StagePlan(
            stage=1,
            steps=cfg["stage1.steps"],
            batch_size=cfg["data.batch"],
            seed=cfg["data.seed"],
            model=model_config,
            optimizer=_optimizer(cfg, cfg["stage1.lr"]),
            weights=LossTermWeights(w_atce=cfg["loss.w_atce"], w_bce=0.0),
            cls_attack=build_cls_attack(cfg),
            strong_policy=parse_policy(cfg["data.strong_policy"]),
            ema_decay=cfg["ema.decay"],
            eval_every=cfg["stage1.eval_every"],
            checkpoint_every=cfg["stage1.checkpoint_every"],
            ratio_eps_o=cfg.get("ratio.eps_o") if ratio else None,
            ratio_lam=cfg["ratio.lam"],
        )
    except DatError as e:
        raise ConfigError(f"stage1 plan: {e}")


def build_stage2_plan(cfg, model_config) -> StagePlan:
    try:
        return StagePlan(
            stage=2,
            steps=cfg["stage2.steps"],
            batch_size=cfg["data.batch"],
            seed=cfg["data.seed"],
            model=model_config,
            optimizer=_optimizer(cfg, cfg["stage2.lr"]),
            weights=LossTermWeights(w_atce=cfg["loss.w_atce"], w_bce=cfg["loss.w_bce"]),
            cls_attack=build_cls_attack(cfg),
            gen_attack=build_gen_attack(cfg),
            strong_policy=parse_policy(cfg["data.strong_policy"]),
            mild_policy=parse_policy(cfg["data.mild_policy"]),
            ema_decay=cfg["ema.decay"],
            eval_every=cfg["stage2.eval_every"],
            checkpoint_every=cfg["stage2.checkpoint_every"],
            ancestral=cfg["gen.ancestral"],
            random_t=cfg["stage2.random_t"],
            gen_loss=cfg["stage2.gen_loss"],
            init_weights=cfg["stage2.init_weights"],
        )
    except DatError as e:
        raise ConfigError(f"stage2 plan: {e}")


def load_data_bundle(cfg) -> dict:
    """Load the ID/OOD train and test handles named by the config."""
    seed = cfg["data.seed"]
    id_size = cfg["data.id_size"] or None
    ood_size = cfg["data.ood_size"] or None
    eval_size = cfg["data.eval_size"] or None
    try:
        return {
            "id_train": load_dataset(cfg["data.id"], "train", seed, id_size),
            "id_test": load_dataset(cfg["data.id"], "test", seed, eval_size),
            "ood_train": load_dataset(cfg["data.ood"], "train", seed, ood_size),
            "ood_test": load_dataset(cfg["data.ood"], "test", seed, eval_size),
        }
    except DatError as e:
        raise ConfigError(f"data.*: {e}")


def build_embedder(cfg, id_train):
    if cfg["eval.embedder"] == "identity_flatten":
        return IdentityFlatten()
    from .metrics import train_probe

    if len(id_train.sample_shape) != 3:
        raise ConfigError("eval.embedder 'trained_probe' needs image data")
    return train_probe(id_train, seed=cfg["data.seed"], steps=cfg["eval.probe_steps"],
                       batch_size=min(cfg["data.batch"], len(id_train)))
