"""Projected gradient attacks and samplers on a shared engine.

One loop serves every use: adversarial classification attacks (bounded,
best-iterate), the uniform-confidence attack, and the unconstrained
energy sampler that generates contrastive points. The differences are
the objective, the presence of an L2 ball, and whether the best or the
last iterate is returned.

All norm layers run with frozen statistics while an attack iterates, no
matter the model's current mode; the previous mode is restored on exit.
Attack iterates are not training data and must not leak into running
statistics.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

from .energy import joint_energy, marginal_energy
from .errors import DomainError
from .models import FROZEN_STATS, set_norm_mode

__all__ = [
    "OBJECTIVES",
    "DEGENERATE_GRAD_EPS",
    "AttackSpec",
    "Trajectory",
    "attack_hash",
    "objective_values",
    "run_attack",
    "pgd_energy_sample",
    "pgd_classification_attack",
    "uniform_ce_attack",
    "sgld_sample",
]

OBJECTIVES = ("neg_joint_energy", "neg_marginal_energy", "cross_entropy", "uniform_ce")
_LABELED = ("neg_joint_energy", "cross_entropy")

# Per-sample gradient norms below this skip the step and flag the sample.
DEGENERATE_GRAD_EPS = 1e-12


@dataclass(frozen=True)
class AttackSpec:
    """Configuration of one projected-gradient run.

    steps: iteration count (>= 0).
    step_size: L2 length of each step (> 0).
    objective: one of OBJECTIVES; maximized unless targeted.
    bound: L2 ball radius around the start point; None = unconstrained.
    init_noise: std of Gaussian noise added to the start point.
    clamp01: clamp iterates into [0, 1] after every step (image data).
    targeted: minimize the objective instead (e.g. CE toward a target).
    step_rule: "normalized" uses g/|g|; "sign" uses sign(g) rescaled to
        unit L2 norm, so the per-step displacement is step_size either way.
    """

    steps: int
    step_size: float
    objective: str
    bound: float | None = None
    norm: str = "l2"
    init_noise: float = 0.0
    clamp01: bool = True
    targeted: bool = False
    step_rule: str = "normalized"

    def __post_init__(self):
        if self.steps < 0:
            raise DomainError(f"steps must be >= 0, got {self.steps}")
        if self.step_size <= 0:
            raise DomainError(f"step_size must be > 0, got {self.step_size}")
        if self.objective not in OBJECTIVES:
            raise DomainError(f"unknown objective {self.objective!r}")
        if self.norm != "l2":
            raise DomainError(f"only the l2 norm is supported, got {self.norm!r}")
        if self.bound is not None and self.bound < 0:
            raise DomainError(f"bound must be >= 0 or None, got {self.bound}")
        if self.init_noise < 0:
            raise DomainError(f"init_noise must be >= 0, got {self.init_noise}")
        if self.step_rule not in ("normalized", "sign"):
            raise DomainError(f"unknown step_rule {self.step_rule!r}")


@dataclass
class Trajectory:
    """Attack output: endpoints plus the per-step objective record.

    objective_values has shape [steps + 1, B]: the value at the start
    point, then after each step. degenerate flags samples whose gradient
    vanished (norm < DEGENERATE_GRAD_EPS) at any step; those samples
    simply did not move on the affected steps.
    """

    initial: torch.Tensor
    final: torch.Tensor
    objective_values: torch.Tensor
    degenerate: torch.Tensor
    path: list = field(default_factory=list)


def attack_hash(spec: AttackSpec) -> str:
    """Short stable identifier of an attack configuration, for log rows."""
    text = repr(sorted(spec.__dict__.items()))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def objective_values(model, x, objective: str, labels=None) -> torch.Tensor:
    """Per-sample objective [B] for an iterate batch."""
    if objective in _LABELED and labels is None:
        raise DomainError(f"objective {objective!r} needs labels")
    logits = model.logits(x)
    if objective == "neg_joint_energy":
        return -joint_energy(logits, labels)
    if objective == "neg_marginal_energy":
        return -marginal_energy(logits)
    if objective == "cross_entropy":
        return F.cross_entropy(logits, labels.long(), reduction="none")
    if objective == "uniform_ce":
        # CE against the uniform label distribution reduces to lse - mean.
        return torch.logsumexp(logits, dim=1) - logits.mean(dim=1)
    raise DomainError(f"unknown objective {objective!r}")


def _flat(x):
    return x.reshape(x.shape[0], -1)


def _project(x, center, bound):
    """Pull each sample back onto the L2 ball of radius bound around center."""
    if bound == 0:
        return center.clone()
    delta = _flat(x - center)
    norms = delta.norm(dim=1, keepdim=True)
    scale = torch.where(norms > bound, bound / norms.clamp_min(1e-30), torch.ones_like(norms))
    return center + (delta * scale).reshape(x.shape)


def run_attack(model, x0, spec: AttackSpec, labels=None, generator=None,
               keep_best=False, record_path=False) -> Trajectory:
    """Shared projected-gradient loop. See AttackSpec for semantics.

    keep_best=True returns the iterate with the best objective seen
    (including the start point); otherwise the last iterate.
    """
    if spec.objective in _LABELED:
        if labels is None:
            raise DomainError(f"objective {spec.objective!r} needs labels")
        if labels.shape[0] != x0.shape[0]:
            raise DomainError("labels and inputs disagree on batch size")
    center = x0.detach().clone()
    x = center.clone()
    if spec.init_noise > 0:
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
        x = x + spec.init_noise * noise
        if spec.bound is not None:
            x = _project(x, center, spec.bound)
    if spec.clamp01:
        x = x.clamp(0.0, 1.0)

    sign = -1.0 if spec.targeted else 1.0
    degenerate = torch.zeros(x.shape[0], dtype=torch.bool, device=x.device)
    values = []
    path = [x.clone()] if record_path else []

    prev_mode = getattr(model, "norm_mode", None)
    if prev_mode is not None:
        set_norm_mode(model, FROZEN_STATS)
    try:
        best_x = x.clone()
        best_v = None
        for _ in range(spec.steps):
            x_req = x.detach().clone().requires_grad_(True)
            v = objective_values(model, x_req, spec.objective, labels)
            # allow_unused: a fully saturated objective has no path to x,
            # which is the all-degenerate case, not an error
            (grad,) = torch.autograd.grad(v.sum(), x_req, allow_unused=True)
            if grad is None:
                grad = torch.zeros_like(x_req)
            v = v.detach()
            values.append(v)
            if best_v is None:
                best_v = v.clone()
            else:
                better = v > best_v if not spec.targeted else v < best_v
                best_v = torch.where(better, v, best_v)
                best_x[better] = x[better]
            gnorm = _flat(grad).norm(dim=1)
            dead = gnorm < DEGENERATE_GRAD_EPS
            degenerate |= dead
            if spec.step_rule == "sign":
                direction = grad.sign()
                dnorm = _flat(direction).norm(dim=1).clamp_min(1e-30)
            else:
                direction = grad
                dnorm = gnorm.clamp_min(1e-30)
            unit = direction / dnorm.reshape(-1, *([1] * (x.dim() - 1)))
            step = sign * spec.step_size * unit
            step[dead] = 0.0
            x = x.detach() + step
            if spec.bound is not None:
                x = _project(x, center, spec.bound)
            if spec.clamp01:
                x = x.clamp(0.0, 1.0)
            if record_path:
                path.append(x.clone())
        with torch.no_grad():
            v = objective_values(model, x, spec.objective, labels).detach()
        values.append(v)
        if best_v is None:
            best_v = v.clone()
        else:
            better = v > best_v if not spec.targeted else v < best_v
            best_v = torch.where(better, v, best_v)
            best_x[better] = x[better]
    finally:
        if prev_mode is not None:
            set_norm_mode(model, prev_mode)

    final = best_x if keep_best else x.detach()
    return Trajectory(
        initial=center,
        final=final,
        objective_values=torch.stack(values, dim=0),
        degenerate=degenerate,
        path=path,
    )


def pgd_energy_sample(model, x0, spec: AttackSpec, labels=None, generator=None,
                      record_path=False) -> Trajectory:
    """Contrastive sampler: normalized ascent on -E(x, y) or -E(x).

    Returns the last iterate; a sampler explores, it does not optimize
    a certificate. Typically unconstrained (spec.bound None).
    """
    if spec.objective not in ("neg_joint_energy", "neg_marginal_energy"):
        raise DomainError(f"energy sampling needs an energy objective, got {spec.objective!r}")
    return run_attack(model, x0, spec, labels=labels, generator=generator,
                      keep_best=False, record_path=record_path)


def pgd_classification_attack(model, x, labels, spec: AttackSpec, generator=None,
                              record_path=False) -> Trajectory:
    """Bounded attack on the cross entropy of the true (or target) label.

    Maximizes CE within the ball unless spec.targeted, which instead
    drives the prediction toward `labels`. Returns the best iterate, so
    the final objective is never worse than the start point's.
    """
    if spec.bound is None:
        raise DomainError("classification attacks require a bound")
    if spec.objective != "cross_entropy":
        spec = replace(spec, objective="cross_entropy")
    return run_attack(model, x, spec, labels=labels, generator=generator,
                      keep_best=True, record_path=record_path)


def uniform_ce_attack(model, x, spec: AttackSpec, generator=None,
                      record_path=False) -> Trajectory:
    """Bounded attack pushing predictions away from the uniform distribution.

    Used on label-free batches to find points the model is confidently
    wrong about. Returns the best iterate.
    """
    if spec.bound is None:
        raise DomainError("uniform-confidence attacks require a bound")
    if spec.objective != "uniform_ce":
        spec = replace(spec, objective="uniform_ce")
    return run_attack(model, x, spec, generator=generator,
                      keep_best=True, record_path=record_path)


def sgld_sample(model, x0, steps, step_size, generator=None, clamp01=False,
                noise=True, record_path=False) -> Trajectory:
    """Reference Langevin sampler on the marginal energy (not used in training).

    x_{t+1} = x_t - (a/2) dE/dx + sqrt(a) * N(0, I), a = step_size.
    objective_values records E(x_t), descending when sampling works.
    """
    if steps < 0:
        raise DomainError(f"steps must be >= 0, got {steps}")
    if step_size <= 0:
        raise DomainError(f"step_size must be > 0, got {step_size}")
    center = x0.detach().clone()
    x = center.clone()
    if clamp01:
        x = x.clamp(0.0, 1.0)
    values = []
    path = [x.clone()] if record_path else []
    prev_mode = getattr(model, "norm_mode", None)
    if prev_mode is not None:
        set_norm_mode(model, FROZEN_STATS)
    try:
        for _ in range(steps):
            x_req = x.detach().clone().requires_grad_(True)
            energy = marginal_energy(model.logits(x_req))
            (grad,) = torch.autograd.grad(energy.sum(), x_req, allow_unused=True)
            if grad is None:
                grad = torch.zeros_like(x_req)
            values.append(energy.detach())
            x = x.detach() - 0.5 * step_size * grad
            if noise:
                xi = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
                x = x + (step_size ** 0.5) * xi
            if clamp01:
                x = x.clamp(0.0, 1.0)
            if record_path:
                path.append(x.clone())
        with torch.no_grad():
            values.append(marginal_energy(model.logits(x)))
    finally:
        if prev_mode is not None:
            set_norm_mode(model, prev_mode)
    return Trajectory(
        initial=center,
        final=x.detach(),
        objective_values=torch.stack(values, dim=0),
        degenerate=torch.zeros(x.shape[0], dtype=torch.bool, device=x.device),
        path=path,
    )
