import csv

import pytest
import torch

from dat.attacks import AttackSpec, pgd_energy_sample
from dat.data import load_dataset, parse_policy
from dat.energy import marginal_energy
from dat.errors import DomainError, NormModeError, PlanError, TrainingDivergence
from dat.metrics import IdentityFlatten
from dat.models import BATCH_STATS, FROZEN_STATS, load_checkpoint, set_norm_mode
from dat.objectives import LossTermWeights
from dat.training import (CheckpointRecord, OptimizerSpec, Stage1Trainer, Stage2Trainer,
                          StagePlan, plan_hash, run_stage1, run_stage2, select_checkpoint)

from conftest import EnergyFnModel

_MLP = {"kind": "mlp", "in_dim": 2, "hidden": (8, 8), "num_classes": 2,
        "batch_norm": True}
_CONV = {"kind": "conv", "in_shape": (1, 8, 8), "num_classes": 10, "width": 4}
_CLS = AttackSpec(steps=3, step_size=0.1, objective="cross_entropy", bound=0.3,
                  clamp01=False)
_GEN = AttackSpec(steps=3, step_size=0.1, objective="neg_joint_energy", bound=None,
                  clamp01=False)


def _plan1(**kw):
    base = dict(stage=1, steps=4, batch_size=16, seed=0, model=_MLP,
                optimizer=OptimizerSpec(lr=0.05),
                weights=LossTermWeights(w_atce=1.0, w_bce=0.0), cls_attack=_CLS,
                eval_every=2, checkpoint_every=2)
    base.update(kw)
    return StagePlan(**base)


def _plan2(**kw):
    base = dict(stage=2, steps=4, batch_size=16, seed=0, model=_MLP,
                optimizer=OptimizerSpec(lr=0.01),
                weights=LossTermWeights(w_atce=1.0, w_bce=1.0), cls_attack=_CLS,
                gen_attack=_GEN, eval_every=2, checkpoint_every=2)
    base.update(kw)
    return StagePlan(**base)


@pytest.fixture(scope="module")
def moons():
    return load_dataset("two_moons_id", "train", seed=0, size=128)


@pytest.fixture(scope="module")
def ring():
    return load_dataset("ring_ood", "train", seed=0, size=128)


@pytest.fixture(scope="module")
def stage1_ckpt(tmp_path_factory, moons):
    run_dir = tmp_path_factory.mktemp("s1")
    result = run_stage1(_plan1(), moons, run_dir)
    return result.best_path


# plan invariants


def test_plan_rejects_generative_term_in_stage1():
    with pytest.raises(PlanError):
        _plan1(weights=LossTermWeights(w_atce=1.0, w_bce=0.5))


def test_plan_rejects_wrong_norm_mode():
    with pytest.raises(PlanError):
        _plan1(norm_mode=FROZEN_STATS)
    with pytest.raises(PlanError):
        _plan2(norm_mode=BATCH_STATS)
    assert _plan1().norm_mode == BATCH_STATS
    assert _plan2().norm_mode == FROZEN_STATS


def test_plan_requires_attacks_for_positive_weights():
    with pytest.raises(PlanError):
        _plan1(cls_attack=None)
    with pytest.raises(PlanError):
        _plan2(gen_attack=None)
    # zero-weight terms need no attack
    _plan2(weights=LossTermWeights(w_atce=1.0, w_bce=0.0), gen_attack=None)


def test_plan_restricts_ratio_to_stage1():
    _plan1(ratio_eps_o=0.5)
    with pytest.raises(PlanError):
        _plan2(ratio_eps_o=0.5)


def test_plan_misc_validation():
    with pytest.raises(PlanError):
        _plan1(steps=0)
    with pytest.raises(PlanError):
        _plan1(ema_decay=1.0)
    with pytest.raises(PlanError):
        _plan2(gen_loss="nce")
    with pytest.raises(PlanError):
        _plan2(init_weights="random")
    with pytest.raises(PlanError):
        StagePlan(stage=3, steps=1, batch_size=1, seed=0, model=_MLP,
                  optimizer=OptimizerSpec(lr=0.1))


def test_plan_hash_stable_and_sensitive():
    assert plan_hash(_plan1()) == plan_hash(_plan1())
    assert plan_hash(_plan1()) != plan_hash(_plan1(seed=1))


# stage 1


def test_stage1_run_artifacts(tmp_path, moons):
    eval_data = load_dataset("two_moons_id", "test", seed=0, size=64)
    result = run_stage1(_plan1(), moons, tmp_path, eval_data=eval_data)
    assert (tmp_path / "checkpoints" / "step_000004.ckpt").exists()
    assert (tmp_path / "checkpoints" / "best.ckpt").exists()
    assert result.best_robust_acc >= 0.0
    with open(tmp_path / "logs" / "train.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "loss_total", "loss_atce", "loss_bce"]
    assert len(rows) == 5
    assert all(row[3] == repr(0.0) for row in rows[1:])  # no generative term
    model, _ = load_checkpoint(result.best_path)
    assert model.norm_mode == BATCH_STATS


def test_stage1_eval_cadence_does_not_change_training(tmp_path, moons):
    eval_data = load_dataset("two_moons_id", "test", seed=0, size=64)
    r_often = run_stage1(_plan1(eval_every=1), moons, tmp_path / "a", eval_data=eval_data)
    r_rare = run_stage1(_plan1(eval_every=4), moons, tmp_path / "b", eval_data=eval_data)
    ma, _ = load_checkpoint(r_often.last_path)
    mb, _ = load_checkpoint(r_rare.last_path)
    sa, sb = ma.state_dict(), mb.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_stage1_resume_bit_identical(tmp_path, moons):
    full = run_stage1(_plan1(steps=6, checkpoint_every=3, eval_every=3), moons,
                      tmp_path / "full")
    half = run_stage1(_plan1(steps=3, checkpoint_every=3, eval_every=3), moons,
                      tmp_path / "part")
    resumed = run_stage1(_plan1(steps=6, checkpoint_every=3, eval_every=3), moons,
                         tmp_path / "part", resume=half.last_path)
    ma, _ = load_checkpoint(full.last_path)
    mb, _ = load_checkpoint(resumed.last_path)
    sa, sb = ma.state_dict(), mb.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    with open(tmp_path / "full" / "logs" / "train.csv") as f:
        want = list(csv.reader(f))
    with open(tmp_path / "part" / "logs" / "train.csv") as f:
        got = list(csv.reader(f))
    assert want == got


def test_stage1_ratio_variant_logs_ood_term(tmp_path, moons, ring):
    plan = _plan1(ratio_eps_o=0.5, ratio_lam=2.0)
    run_stage1(plan, moons, tmp_path, ood=ring)
    with open(tmp_path / "logs" / "train.csv") as f:
        rows = list(csv.reader(f))
    assert all(float(row[3]) > 0.0 for row in rows[1:])  # uniform-CE term logged
    with pytest.raises(PlanError):
        Stage1Trainer(plan, moons, tmp_path / "x", ood=None)


# stage 2


def test_stage2_requires_frozen_stats_each_step(tmp_path, moons, ring, stage1_ckpt):
    trainer = Stage2Trainer(_plan2(), stage1_ckpt, moons, ring, tmp_path)
    set_norm_mode(trainer.model, BATCH_STATS)
    with pytest.raises(NormModeError):
        trainer.step_once()


def test_stage2_keeps_running_statistics_untouched(tmp_path, moons, ring, stage1_ckpt):
    trainer = Stage2Trainer(_plan2(), stage1_ckpt, moons, ring, tmp_path)
    before = {k: v.clone() for k, v in trainer.model.named_buffers()}
    records = trainer.run()
    after = dict(trainer.model.named_buffers())
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert [r.step for r in records] == [2, 4]
    model, payload = load_checkpoint(records[-1].path)
    assert model.norm_mode == FROZEN_STATS


def test_stage2_zero_generative_weight_never_samples(tmp_path, monkeypatch, moons,
                                                     ring, stage1_ckpt):
    import dat.training as training_mod
    calls = {"n": 0}
    orig = training_mod.pgd_energy_sample

    def spy(*a, **kw):
        calls["n"] += 1
        return orig(*a, **kw)

    monkeypatch.setattr(training_mod, "pgd_energy_sample", spy)
    plan = _plan2(weights=LossTermWeights(w_atce=1.0, w_bce=0.0), gen_attack=None)
    run_stage2(plan, stage1_ckpt, moons, ring, tmp_path)
    assert calls["n"] == 0


def test_stage2_mild_policy_inert_when_generative_weight_zero(tmp_path):
    digits = load_dataset("small_digits_id", "train", seed=0, size=64)
    letters = load_dataset("small_letters_ood", "train", seed=0, size=64)
    s1 = run_stage1(_plan1(model=_CONV, batch_size=8, steps=2, checkpoint_every=2),
                    digits, tmp_path / "s1")
    outs = {}
    for tag, mild in (("crop", parse_policy("random_crop_pad(1)")), ("plain", None)):
        plan = _plan2(model=_CONV, batch_size=8, steps=3, checkpoint_every=3,
                      eval_every=3, weights=LossTermWeights(w_atce=1.0, w_bce=0.0),
                      gen_attack=None,
                      **({"mild_policy": mild} if mild is not None else {}))
        records = run_stage2(plan, s1.best_path, digits, letters, tmp_path / tag)
        model, _ = load_checkpoint(records[-1].path)
        outs[tag] = model.state_dict()
    assert all(torch.equal(outs["crop"][k], outs["plain"][k]) for k in outs["crop"])


def test_stage2_resume_bit_identical(tmp_path, moons, ring, stage1_ckpt):
    kw = dict(steps=6, checkpoint_every=3, eval_every=3)
    eval_data = load_dataset("two_moons_id", "test", seed=0, size=64)
    full = run_stage2(_plan2(**kw), stage1_ckpt, moons, ring, tmp_path / "full",
                      eval_data=eval_data, eval_ood=ring, embedder=IdentityFlatten())
    part = run_stage2(_plan2(steps=3, checkpoint_every=3, eval_every=3), stage1_ckpt,
                      moons, ring, tmp_path / "part", eval_data=eval_data, eval_ood=ring,
                      embedder=IdentityFlatten())
    resumed = run_stage2(_plan2(**kw), stage1_ckpt, moons, ring, tmp_path / "part",
                         eval_data=eval_data, eval_ood=ring, embedder=IdentityFlatten(),
                         resume=part[-1].path)
    ma, pa = load_checkpoint(full[-1].path)
    mb, pb = load_checkpoint(resumed[-1].path)
    sa, sb = ma.state_dict(), mb.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    ea, eb = pa["ema"]["shadow"], pb["ema"]["shadow"]
    assert all(torch.equal(ea[k], eb[k]) for k in ea)
    assert [r.step for r in resumed] == [3, 6]
    with open(tmp_path / "full" / "logs" / "train.csv") as f:
        want = list(csv.reader(f))
    with open(tmp_path / "part" / "logs" / "train.csv") as f:
        got = list(csv.reader(f))
    assert want == got


def test_stage2_init_from_ema_differs_from_raw(tmp_path, moons, ring):
    # give stage 1 enough steps that EMA and raw weights separate
    s1 = run_stage1(_plan1(steps=6, checkpoint_every=6, eval_every=6), moons,
                    tmp_path / "s1")
    a = Stage2Trainer(_plan2(init_weights="ema"), s1.last_path, moons, ring, tmp_path / "a")
    b = Stage2Trainer(_plan2(init_weights="raw"), s1.last_path, moons, ring, tmp_path / "b")
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert any(not torch.equal(sa[k], sb[k]) for k in sa if "running" not in k
               and "num_batches" not in k)


def test_stage2_divergence_reported(tmp_path, moons, ring, stage1_ckpt):
    trainer = Stage2Trainer(_plan2(), stage1_ckpt, moons, ring, tmp_path)
    with torch.no_grad():
        next(iter(trainer.model.parameters())).fill_(float("nan"))
    with pytest.raises(TrainingDivergence):
        trainer.step_once()


def test_stage2_random_t_consumes_its_own_generator(tmp_path, moons, ring, stage1_ckpt):
    a = run_stage2(_plan2(random_t=True, gen_attack=AttackSpec(
        steps=6, step_size=0.1, objective="neg_joint_energy", clamp01=False)),
        stage1_ckpt, moons, ring, tmp_path / "a")
    b = run_stage2(_plan2(random_t=True, gen_attack=AttackSpec(
        steps=6, step_size=0.1, objective="neg_joint_energy", clamp01=False)),
        stage1_ckpt, moons, ring, tmp_path / "b")
    ma, _ = load_checkpoint(a[-1].path)
    mb, _ = load_checkpoint(b[-1].path)
    sa, sb = ma.state_dict(), mb.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_more_sampler_steps_reach_lower_energy():
    model = EnergyFnModel(lambda x: ((x - 0.5) ** 2).sum(1, keepdim=True), num_classes=1)
    x0 = torch.full((8, 2), 3.0, dtype=torch.float64)
    energies = {}
    for t in (5, 20):
        spec = AttackSpec(steps=t, step_size=0.1, objective="neg_marginal_energy",
                          clamp01=False)
        final = pgd_energy_sample(model, x0, spec).final
        energies[t] = marginal_energy(model.logits(final)).mean().item()
    assert energies[20] < energies[5]


# selection


def _records(fids):
    return [CheckpointRecord(step=i + 1, path=f"p{i}", metrics={"fid": v})
            for i, v in enumerate(fids)]


def test_select_best_fid_prefers_lowest():
    recs = _records([10.0, 7.0, 9.0])
    assert select_checkpoint(recs, "best_fid") is recs[1]


def test_select_tie_goes_to_earliest():
    recs = _records([7.0, 7.0, 9.0])
    assert select_checkpoint(recs, "best_fid") is recs[0]


def test_select_best_robust_and_last():
    recs = [CheckpointRecord(step=1, path="a", metrics={"robust_acc": 0.4}),
            CheckpointRecord(step=2, path="b", metrics={"robust_acc": 0.6}),
            CheckpointRecord(step=3, path="c", metrics={})]
    assert select_checkpoint(recs, "best_robust").path == "b"
    assert select_checkpoint(recs, "last").path == "c"


def test_select_errors():
    with pytest.raises(DomainError):
        select_checkpoint([], "last")
    with pytest.raises(DomainError):
        select_checkpoint(_records([1.0]), "best_loss")
    recs = [CheckpointRecord(step=1, path="a", metrics={})]
    with pytest.raises(DomainError):
        select_checkpoint(recs, "best_fid")
