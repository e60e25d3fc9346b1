"""Two-stage training: adversarial pretraining, then the joint objective.

Stage 1 is plain adversarial training with batch statistics flowing into
the norm layers; it accumulates the running statistics stage 2 depends
on and keeps the checkpoint with the best robust accuracy (evaluated on
EMA weights). Stage 2 starts from that checkpoint, freezes all running
statistics, and trains the combined objective with contrastive samples
produced by PGD ascent on negative energy from OOD starting points.

Every random draw comes from a named generator whose state rides in the
checkpoint, so a resumed run replays the original bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import torch

from .attacks import (AttackSpec, attack_hash, pgd_classification_attack, pgd_energy_sample,
                      uniform_ce_attack)
from .data import (POLICY_NONE, AugmentationPolicy, BatchStream, DatasetHandle, DualStream,
                   apply_policy, derive_seed, sample_labels)
from .errors import DomainError, NormModeError, PlanError, TrainingDivergence
from .metrics import (GaussianSummary, IdentityFlatten, MetricReport, fid, robust_accuracy,
                      write_reports)
from .models import (BATCH_STATS, FROZEN_STATS, EmaShadow, build_model, load_checkpoint,
                     save_checkpoint, set_norm_mode)
from .objectives import LossTermWeights, PreparedBatch, combined_loss, uniform_ce

__all__ = [
    "OptimizerSpec",
    "StagePlan",
    "plan_hash",
    "Stage1Trainer",
    "Stage2Trainer",
    "Stage1Result",
    "CheckpointRecord",
    "run_stage1",
    "run_stage2",
    "select_checkpoint",
]

TRAIN_CSV_COLUMNS = ("step", "loss_total", "loss_atce", "loss_bce")


@dataclass(frozen=True)
class OptimizerSpec:
    """SGD with Nesterov momentum; the only optimizer used here."""

    lr: float
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4

    def build(self, params):
        return torch.optim.SGD(params, lr=self.lr, momentum=self.momentum,
                               nesterov=self.nesterov, weight_decay=self.weight_decay)


@dataclass(frozen=True)
class StagePlan:
    """Declarative description of one training stage.

    Stage 1 must have w_bce == 0 and batch-statistics normalization;
    stage 2 must run with frozen statistics. Violations raise PlanError
    at construction, not at step 5000.
    """

    stage: int
    steps: int
    batch_size: int
    seed: int
    model: dict
    optimizer: OptimizerSpec
    weights: LossTermWeights = LossTermWeights()
    cls_attack: AttackSpec | None = None
    gen_attack: AttackSpec | None = None
    eval_attack: AttackSpec | None = None
    strong_policy: AugmentationPolicy = POLICY_NONE
    mild_policy: AugmentationPolicy = POLICY_NONE
    norm_mode: str = ""
    ema_decay: float = 0.999
    eval_every: int = 100
    checkpoint_every: int = 100
    ood_batch_size: int | None = None
    ancestral: bool = True
    random_t: bool = False
    gen_loss: str = "bce"
    init_weights: str = "ema"
    ratio_eps_o: float | None = None
    ratio_lam: float = 1.0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise PlanError(f"stage must be 1 or 2, got {self.stage}")
        if self.steps < 1 or self.batch_size < 1:
            raise PlanError("steps and batch_size must be >= 1")
        default_mode = BATCH_STATS if self.stage == 1 else FROZEN_STATS
        mode = self.norm_mode or default_mode
        if mode != default_mode:
            raise PlanError(f"stage {self.stage} requires {default_mode}, got {mode!r}")
        object.__setattr__(self, "norm_mode", mode)
        if self.stage == 1 and self.weights.w_bce != 0:
            raise PlanError("stage 1 trains without the generative term (w_bce must be 0)")
        if self.weights.w_atce > 0 and self.cls_attack is None:
            raise PlanError("w_atce > 0 needs cls_attack")
        if self.weights.w_bce > 0 and self.gen_attack is None:
            raise PlanError("w_bce > 0 needs gen_attack")
        if self.gen_loss not in ("bce", "reference"):
            raise PlanError(f"unknown gen_loss {self.gen_loss!r}")
        if self.init_weights not in ("ema", "raw"):
            raise PlanError(f"init_weights must be 'ema' or 'raw', got {self.init_weights!r}")
        if not 0.0 < self.ema_decay < 1.0:
            raise PlanError(f"ema_decay must be in (0, 1), got {self.ema_decay}")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise PlanError("eval_every and checkpoint_every must be >= 1")
        if self.ratio_eps_o is not None and self.stage != 1:
            raise PlanError("the ratio baseline is a stage-1 variant")


def plan_hash(plan: StagePlan) -> str:
    return hashlib.sha256(repr(asdict(plan)).encode()).hexdigest()[:12]


class _TrainCsv:
    def __init__(self, path, append=False):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (append and path.exists())
        self._f = open(path, "a" if append else "w", newline="")
        self._w = csv.writer(self._f)
        if fresh:
            self._w.writerow(TRAIN_CSV_COLUMNS)
            self._f.flush()

    def write(self, step, total, atce, bce):
        self._w.writerow([step, repr(float(total)), repr(float(atce)), repr(float(bce))])
        self._f.flush()

    def close(self):
        self._f.close()


def _bn_signature(model) -> str:
    h = hashlib.sha256()
    for name, buf in sorted(model.named_buffers()):
        h.update(name.encode())
        h.update(buf.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _check_finite(step, total, terms):
    if not torch.isfinite(total):
        detail = ", ".join(f"{k}={float(v)!r}" for k, v in terms.items())
        raise TrainingDivergence(f"non-finite loss at step {step}: total={float(total)!r} ({detail})")


@dataclass
class Stage1Result:
    best_path: str
    last_path: str
    best_robust_acc: float
    run_dir: str


@dataclass
class CheckpointRecord:
    step: int
    path: str
    metrics: dict


class Stage1Trainer:
    """Adversarial training with batch statistics; the stage-2 seed model."""

    def __init__(self, plan: StagePlan, data: DatasetHandle, run_dir,
                 eval_data: DatasetHandle | None = None, ood: DatasetHandle | None = None,
                 resume=None):
        if plan.stage != 1:
            raise PlanError("Stage1Trainer needs a stage-1 plan")
        if plan.ratio_eps_o is not None and ood is None:
            raise PlanError("the ratio baseline needs an OOD dataset")
        self.plan = plan
        self.data = data
        self.eval_data = eval_data
        self.run_dir = Path(run_dir)
        (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.attack_gen = torch.Generator()
        self.stream = BatchStream(data.samples, data.labels, plan.batch_size,
                                  derive_seed(plan.seed, "stage1"))
        self._ood_stream = None
        if plan.ratio_eps_o is not None:
            self._ood_stream = BatchStream(ood.samples, None, plan.ood_batch_size
                                           or plan.batch_size, derive_seed(plan.seed, "ratio_ood"))
        if resume is not None:
            self.model, payload = load_checkpoint(resume)
            extra = payload["extra"]
            self.opt = plan.optimizer.build(self.model.parameters())
            self.opt.load_state_dict(extra["optimizer"])
            self.ema = EmaShadow(self.model, plan.ema_decay)
            self.ema.load_state_dict(payload["ema"])
            self.stream.load_state_dict(extra["stream"])
            if self._ood_stream is not None:
                self._ood_stream.load_state_dict(extra["ood_stream"])
            self.attack_gen.set_state(extra["attack_gen"].clone())
            self.step = payload["step"]
            self.best = extra["best_metric"]
            self.best_path = extra["best_path"]
        else:
            self.model = build_model(plan.model, seed=derive_seed(plan.seed, "init"))
            self.opt = plan.optimizer.build(self.model.parameters())
            self.ema = EmaShadow(self.model, plan.ema_decay)
            self.attack_gen.manual_seed(derive_seed(plan.seed, "stage1_attack"))
            self.step = 0
            self.best = float("-inf")
            self.best_path = ""
        set_norm_mode(self.model, BATCH_STATS)
        self._log = _TrainCsv(self.run_dir / "logs" / "train.csv", append=resume is not None)
        self._hash = plan_hash(plan)

    def step_once(self):
        plan = self.plan
        step = self.step + 1
        try:
            x, y = self.stream.next_batch()
            x = apply_policy(plan.strong_policy, x, derive_seed(plan.seed, "stage1_aug", step))
            traj = pgd_classification_attack(self.model, x, y, plan.cls_attack,
                                             generator=self.attack_gen)
            total, terms = combined_loss(self.model, PreparedBatch(x_adv=traj.final, y=y),
                                         plan.weights)
            if self._ood_stream is not None:
                x0, _ = self._ood_stream.next_batch()
                ood_spec = replace(plan.cls_attack, objective="uniform_ce",
                                   bound=plan.ratio_eps_o)
                ood_adv = uniform_ce_attack(self.model, x0, ood_spec, generator=self.attack_gen)
                ood_term = uniform_ce(self.model, ood_adv.final)
                total = total + plan.ratio_lam * ood_term
                terms = dict(terms, loss_bce=ood_term)  # third CSV column: non-CE term
        except DomainError as e:
            raise TrainingDivergence(f"step {step}: {e}") from e
        _check_finite(step, total, terms)
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        self.ema.update(self.model)
        self.step = step
        self._log.write(step, total.item(), terms["loss_atce"].item(), terms["loss_bce"].item())
        if step % plan.eval_every == 0 or step == plan.steps:
            self._evaluate(step)
        if step % plan.checkpoint_every == 0 or step == plan.steps:
            self._save(self.run_dir / "checkpoints" / f"step_{step:06d}.ckpt", step)

    def _eval_spec(self):
        return self.plan.eval_attack or self.plan.cls_attack

    def _evaluate(self, step):
        if self.eval_data is None:
            return
        spec = self._eval_spec()
        gen = torch.Generator()
        gen.manual_seed(derive_seed(self.plan.seed, "eval", step))
        with self.ema.applied(self.model):
            racc = robust_accuracy(self.model, self.eval_data.samples, self.eval_data.labels,
                                   spec, generator=gen)
        write_reports(self.run_dir / "logs" / "eval.csv", [MetricReport(
            step=step, metric="robust_acc", value=racc, attack_hash=attack_hash(spec),
            n_samples=len(self.eval_data), seed=self.plan.seed)])
        if racc > self.best:
            self.best = racc
            path = self.run_dir / "checkpoints" / "best.ckpt"
            self._save(path, step)
            self.best_path = str(path)

    def _save(self, path, step):
        extra = {
            "optimizer": self.opt.state_dict(),
            "stream": self.stream.state_dict(),
            "attack_gen": self.attack_gen.get_state().clone(),
            "best_metric": self.best,
            "best_path": self.best_path,
        }
        if self._ood_stream is not None:
            extra["ood_stream"] = self._ood_stream.state_dict()
        save_checkpoint(path, self.model, self.ema, self._hash, step, extra)

    def run(self) -> Stage1Result:
        while self.step < self.plan.steps:
            self.step_once()
        self._log.close()
        last = self.run_dir / "checkpoints" / f"step_{self.plan.steps:06d}.ckpt"
        best = self.best_path or str(last)
        return Stage1Result(best_path=best, last_path=str(last),
                            best_robust_acc=self.best, run_dir=str(self.run_dir))


class Stage2Trainer:
    """Joint objective on top of a stage-1 checkpoint, statistics frozen."""

    def __init__(self, plan: StagePlan, stage1_checkpoint, data: DatasetHandle,
                 ood: DatasetHandle, run_dir, eval_data: DatasetHandle | None = None,
                 eval_ood: DatasetHandle | None = None, embedder=None, resume=None):
        if plan.stage != 2:
            raise PlanError("Stage2Trainer needs a stage-2 plan")
        self.plan = plan
        self.data = data
        self.ood = ood
        self.eval_data = eval_data
        self.eval_ood = eval_ood
        self.embedder = embedder or IdentityFlatten()
        self.run_dir = Path(run_dir)
        (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.dual = DualStream(data, ood, plan.strong_policy, plan.mild_policy,
                               plan.batch_size, plan.ood_batch_size,
                               seed=derive_seed(plan.seed, "dual"))
        self.attack_gen = torch.Generator()
        self.sampler_gen = torch.Generator()
        self.label_gen = torch.Generator()
        self.t_gen = torch.Generator()
        self.records: list[CheckpointRecord] = []
        if resume is not None:
            self.model, payload = load_checkpoint(resume)
            extra = payload["extra"]
            self.opt = plan.optimizer.build(self.model.parameters())
            self.opt.load_state_dict(extra["optimizer"])
            self.ema = EmaShadow(self.model, plan.ema_decay)
            self.ema.load_state_dict(payload["ema"])
            self.dual.load_state_dict(extra["dual"])
            for name in ("attack_gen", "sampler_gen", "label_gen", "t_gen"):
                getattr(self, name).set_state(extra[name].clone())
            self.step = payload["step"]
            self.records = [CheckpointRecord(**r) for r in extra["records"]]
        else:
            self.model, payload = load_checkpoint(stage1_checkpoint)
            if plan.init_weights == "ema" and payload.get("ema"):
                shadow = EmaShadow(self.model, plan.ema_decay)
                shadow.load_state_dict(payload["ema"])
                shadow.copy_to(self.model)
            self.opt = plan.optimizer.build(self.model.parameters())
            self.ema = EmaShadow(self.model, plan.ema_decay)
            self.attack_gen.manual_seed(derive_seed(plan.seed, "stage2_attack"))
            self.sampler_gen.manual_seed(derive_seed(plan.seed, "stage2_sampler"))
            self.label_gen.manual_seed(derive_seed(plan.seed, "stage2_labels"))
            self.t_gen.manual_seed(derive_seed(plan.seed, "stage2_t"))
            self.step = 0
        set_norm_mode(self.model, FROZEN_STATS)
        self._bn_sig = _bn_signature(self.model)
        self._log = _TrainCsv(self.run_dir / "logs" / "train.csv", append=resume is not None)
        self._hash = plan_hash(plan)
        self._ref_summary = None

    def _check_mode(self):
        if self.model.norm_mode != FROZEN_STATS:
            raise NormModeError(
                "stage 2 would run a forward pass with batch statistics; "
                "running statistics are a stage-1 artifact and must stay frozen")

    def _check_buffers(self):
        if _bn_signature(self.model) != self._bn_sig:
            raise NormModeError("running statistics changed during stage 2")

    def _contrastive(self, x0):
        plan = self.plan
        spec = plan.gen_attack
        if plan.random_t and spec.steps > 0:
            t = int(torch.randint(1, spec.steps + 1, (1,), generator=self.t_gen))
            spec = replace(spec, steps=t)
        if plan.ancestral:
            y_prime = sample_labels(self.data, x0.shape[0], self.label_gen)
            spec = replace(spec, objective="neg_joint_energy")
            return pgd_energy_sample(self.model, x0, spec, labels=y_prime,
                                     generator=self.sampler_gen).final
        spec = replace(spec, objective="neg_marginal_energy")
        return pgd_energy_sample(self.model, x0, spec, generator=self.sampler_gen).final

    def step_once(self):
        self._check_mode()
        plan = self.plan
        step = self.step + 1
        try:
            x, y, x_hat, x0 = self.dual.next()
            x_adv = None
            if plan.weights.w_atce > 0:
                x_adv = pgd_classification_attack(self.model, x, y, plan.cls_attack,
                                                  generator=self.attack_gen).final
            x_contr = self._contrastive(x0) if plan.weights.w_bce > 0 else None
            total, terms = combined_loss(self.model,
                                         PreparedBatch(x_adv=x_adv, y=y, x_gen=x_hat,
                                                       x_contrastive=x_contr),
                                         plan.weights, gen_loss=plan.gen_loss)
        except DomainError as e:
            raise TrainingDivergence(f"step {step}: {e}") from e
        _check_finite(step, total, terms)
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        self.ema.update(self.model)
        self.step = step
        self._log.write(step, total.item(), terms["loss_atce"].item(), terms["loss_bce"].item())
        metrics = None
        if step % plan.eval_every == 0 or step % plan.checkpoint_every == 0 \
                or step == plan.steps:
            metrics = self._evaluate(step)
        if step % plan.checkpoint_every == 0 or step == plan.steps:
            self._check_buffers()
            path = self.run_dir / "checkpoints" / f"step_{step:06d}.ckpt"
            # record first so the checkpoint's own row rides in its state
            self.records.append(CheckpointRecord(step=step, path=str(path),
                                                 metrics=metrics or {}))
            self._save(path, step)

    def generate(self, x0, generator=None, balanced=True):
        """Sample with the plan's generative attack at full step count."""
        plan = self.plan
        spec = plan.gen_attack
        if plan.ancestral:
            k = self.data.num_classes
            if balanced:
                y_prime = torch.arange(x0.shape[0], dtype=torch.int64) % k
            else:
                y_prime = sample_labels(self.data, x0.shape[0], generator)
            spec = replace(spec, objective="neg_joint_energy")
            return pgd_energy_sample(self.model, x0, spec, labels=y_prime,
                                     generator=generator).final
        spec = replace(spec, objective="neg_marginal_energy")
        return pgd_energy_sample(self.model, x0, spec, generator=generator).final

    def _evaluate(self, step):
        if self.eval_data is None:
            return {}
        plan = self.plan
        spec = plan.eval_attack or plan.cls_attack
        gen = torch.Generator()
        gen.manual_seed(derive_seed(plan.seed, "eval", step))
        reports = []
        metrics = {}
        with self.ema.applied(self.model):
            if spec is not None:
                racc = robust_accuracy(self.model, self.eval_data.samples,
                                       self.eval_data.labels, spec, generator=gen)
                metrics["robust_acc"] = racc
                reports.append(MetricReport(step=step, metric="robust_acc", value=racc,
                                            attack_hash=attack_hash(spec),
                                            n_samples=len(self.eval_data), seed=plan.seed))
            if plan.weights.w_bce > 0 and self.eval_ood is not None:
                if self._ref_summary is None:
                    self._ref_summary = GaussianSummary.from_features(
                        self.embedder(self.data.samples))
                n_gen = min(len(self.eval_ood), 512)
                x0 = self.eval_ood.samples[:n_gen]
                samples = self.generate(x0, generator=gen)
                gen_summary = GaussianSummary.from_features(self.embedder(samples))
                value = fid(self._ref_summary, gen_summary)
                metrics["fid"] = value
                reports.append(MetricReport(step=step, metric="fid", value=value,
                                            embedder=self.embedder.name,
                                            attack_hash=attack_hash(plan.gen_attack),
                                            n_samples=n_gen, seed=plan.seed))
        if reports:
            write_reports(self.run_dir / "logs" / "eval.csv", reports)
        return metrics

    def _save(self, path, step):
        extra = {
            "optimizer": self.opt.state_dict(),
            "dual": self.dual.state_dict(),
            "attack_gen": self.attack_gen.get_state().clone(),
            "sampler_gen": self.sampler_gen.get_state().clone(),
            "label_gen": self.label_gen.get_state().clone(),
            "t_gen": self.t_gen.get_state().clone(),
            "records": [asdict(r) for r in self.records],
        }
        save_checkpoint(path, self.model, self.ema, self._hash, step, extra)

    def run(self) -> list[CheckpointRecord]:
        while self.step < self.plan.steps:
            self.step_once()
        self._check_buffers()
        self._log.close()
        return self.records


def run_stage1(plan, data, run_dir, eval_data=None, ood=None, resume=None) -> Stage1Result:
    return Stage1Trainer(plan, data, run_dir, eval_data=eval_data, ood=ood,
                         resume=resume).run()


def run_stage2(plan, stage1_checkpoint, data, ood, run_dir, eval_data=None, eval_ood=None,
               embedder=None, resume=None) -> list[CheckpointRecord]:
    return Stage2Trainer(plan, stage1_checkpoint, data, ood, run_dir, eval_data=eval_data,
                         eval_ood=eval_ood, embedder=embedder, resume=resume).run()


def select_checkpoint(records, criterion: str) -> CheckpointRecord:
    """Pick a checkpoint from a record stream; ties go to the earliest step."""
    if not records:
        raise DomainError("no checkpoints to select from")
    if criterion == "last":
        return records[-1]
    if criterion == "best_fid":
        key, better = "fid", lambda a, b: a < b
    elif criterion == "best_robust":
        key, better = "robust_acc", lambda a, b: a > b
    else:
        raise DomainError(f"unknown selection criterion {criterion!r}")
    chosen = None
    for rec in records:
        if key not in rec.metrics:
            continue
        if chosen is None or better(rec.metrics[key], chosen.metrics[key]):
            chosen = rec
    if chosen is None:
        raise DomainError(f"no checkpoint carries metric {key!r}")
    return chosen
