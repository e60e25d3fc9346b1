"""Loss terms: generative BCE, adversarial CE, combined objective, baselines.

The generative loss treats the marginal energy as a logit of "is real":
L = -E_data[log sigma(-E(x))] - E_contr[log(1 - sigma(-E(x~)))]. Its
parameter gradient equals the sigmoid-scaled two-term energy gradient
(scaled_ebm_gradient, negated), which is what makes the loss a drop-in,
self-stabilizing replacement for the unscaled estimator
(reference_ebm_gradient). Both gradient assemblies are kept so the
equivalence and the stability difference can be measured.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .attacks import AttackSpec, objective_values, pgd_classification_attack, uniform_ce_attack
from .energy import conditional_probs, joint_energy, marginal_energy
from .errors import DomainError

__all__ = [
    "LossTermWeights",
    "ScaleFactors",
    "PreparedBatch",
    "scale_factors",
    "bce_generative_loss",
    "scaled_ebm_gradient",
    "reference_ebm_gradient",
    "at_ce_loss",
    "ratio_loss",
    "r1_penalty",
    "combined_loss",
]


@dataclass(frozen=True)
class LossTermWeights:
    """Weights of the two combined-loss terms."""

    w_atce: float = 1.0
    w_bce: float = 1.0

    def __post_init__(self):
        if self.w_atce < 0 or self.w_bce < 0:
            raise DomainError(f"loss weights must be >= 0, got ({self.w_atce}, {self.w_bce})")


@dataclass
class ScaleFactors:
    """Per-sample sigmoid scales of the two energy-gradient terms.

    alpha[i] + beta[i] = 1 whenever both are evaluated at the same point.
    """

    alpha: torch.Tensor
    beta: torch.Tensor


def _marginal(model, x):
    return marginal_energy(model.logits(x))


def scale_factors(model, x_data, x_contrastive) -> ScaleFactors:
    """alpha = 1 - sigma(-E(x_data)), beta = sigma(-E(x_contrastive))."""
    with torch.no_grad():
        alpha = torch.sigmoid(_marginal(model, x_data))
        beta = torch.sigmoid(-_marginal(model, x_contrastive))
    return ScaleFactors(alpha=alpha, beta=beta)


def bce_generative_loss(model, x_data, x_contrastive):
    """Binary discrimination of data against sampler output, via energies.

    Computed as mean softplus(E_data) + mean softplus(-E_contrastive),
    the numerically stable form of the two log-sigmoid terms; finite for
    energies anywhere float reaches.
    """
    e_data = _marginal(model, x_data)
    e_contr = _marginal(model, x_contrastive)
    return F.softplus(e_data).mean() + F.softplus(-e_contr).mean()


def _param_grads(model, surrogate):
    named = [(k, p) for k, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(surrogate, [p for _, p in named], allow_unused=True)
    return {k: (g if g is not None else torch.zeros_like(p)) for (k, p), g in zip(named, grads)}


def scaled_ebm_gradient(model, x_data, x_contrastive):
    """Sigmoid-scaled two-term energy gradient, as a name->tensor dict.

    mean over batch of -alpha(x) dE(x_data)/dtheta + beta(x~) dE(x~)/dtheta.
    The scales are treated as constants (detached). Equals the negated
    parameter gradient of bce_generative_loss.
    """
    e_data = _marginal(model, x_data)
    e_contr = _marginal(model, x_contrastive)
    alpha = torch.sigmoid(e_data).detach()
    beta = torch.sigmoid(-e_contr).detach()
    surrogate = -(alpha * e_data).mean() + (beta * e_contr).mean()
    return _param_grads(model, surrogate)


def reference_ebm_gradient(model, x_data, x_model_samples):
    """Unscaled two-term energy gradient (ascent direction on likelihood).

    mean -dE(x_data)/dtheta + mean dE(x_sample)/dtheta. Diagnostic and
    ablation use only; the trainer never calls this.
    """
    e_data = _marginal(model, x_data)
    e_samp = _marginal(model, x_model_samples)
    surrogate = -e_data.mean() + e_samp.mean()
    return _param_grads(model, surrogate)


def at_ce_loss(model, x_adv, y):
    """Mean cross entropy at (already attacked) inputs."""
    logits = model.logits(x_adv)
    k = logits.shape[1]
    if y.numel() and (y.min().item() < 0 or y.max().item() >= k):
        raise DomainError(f"label out of range [0, {k})")
    return F.cross_entropy(logits, y.long())


def ratio_loss(model, x, y, x_ood, eps, eps_o, lam=1.0, *, steps=10, step_size=0.1,
               clamp01=True, init_noise=0.0, generator=None):
    """Adversarial CE plus uniform-confidence enforcement on attacked OOD.

    Runs both attacks itself: a CE attack on (x, y) within eps and a
    uniform-CE attack on x_ood within eps_o, then returns
    at_ce_loss + lam * mean CE(attacked OOD logits, uniform target).
    """
    if lam < 0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    cls_spec = AttackSpec(steps=steps, step_size=step_size, objective="cross_entropy",
                          bound=eps, clamp01=clamp01, init_noise=init_noise)
    adv = pgd_classification_attack(model, x, y, cls_spec, generator=generator)
    loss = at_ce_loss(model, adv.final, y)
    if lam > 0:
        ood_spec = AttackSpec(steps=steps, step_size=step_size, objective="uniform_ce",
                              bound=eps_o, clamp01=clamp01, init_noise=init_noise)
        ood_adv = uniform_ce_attack(model, x_ood, ood_spec, generator=generator)
        loss = loss + lam * objective_values(model, ood_adv.final, "uniform_ce").mean()
    return loss


def r1_penalty(model, x, y):
    """Mean squared L2 norm of the true-class logit's input gradient.

    Diagnostic only; never part of the training objective here.
    """
    x_req = x.detach().clone().requires_grad_(True)
    f_true = -joint_energy(model.logits(x_req), y)
    (grad,) = torch.autograd.grad(f_true.sum(), x_req)
    return grad.reshape(grad.shape[0], -1).norm(dim=1).pow(2).mean()


@dataclass
class PreparedBatch:
    """One training step's inputs, already attacked/augmented by the caller.

    x_adv/y feed the classification term; x_gen (mildly augmented data)
    and x_contrastive (sampler output) feed the generative term. Unused
    streams may be None when the matching weight is zero.
    """

    x_adv: torch.Tensor | None
    y: torch.Tensor | None
    x_gen: torch.Tensor | None = None
    x_contrastive: torch.Tensor | None = None


def combined_loss(model, batch: PreparedBatch, weights: LossTermWeights, gen_loss="bce"):
    """w_atce * L_ATCE + w_bce * L_gen, with the term breakdown.

    A term with zero weight is not evaluated at all (its model forwards
    are skipped). Returns (total, {"loss_atce": t, "loss_bce": t}) where
    the breakdown holds the unweighted scalar term tensors, so
    w_atce * loss_atce + w_bce * loss_bce reproduces the total exactly.

    gen_loss "bce" is the sigmoid-scaled objective; "reference" swaps in
    the unscaled surrogate mean E(x_gen) - mean E(x_contrastive), whose
    gradient is the unscaled two-term estimator. Reference mode exists
    for stability comparisons only.
    """
    if gen_loss not in ("bce", "reference"):
        raise DomainError(f"unknown gen_loss {gen_loss!r}")
    zero = torch.zeros((), dtype=torch.float32)
    if weights.w_atce > 0:
        if batch.x_adv is None or batch.y is None:
            raise DomainError("w_atce > 0 needs x_adv and y")
        term_atce = at_ce_loss(model, batch.x_adv, batch.y)
    else:
        term_atce = zero
    if weights.w_bce > 0:
        if batch.x_gen is None or batch.x_contrastive is None:
            raise DomainError("w_bce > 0 needs x_gen and x_contrastive")
        if gen_loss == "bce":
            term_bce = bce_generative_loss(model, batch.x_gen, batch.x_contrastive)
        else:
            term_bce = _marginal(model, batch.x_gen).mean() \
                - _marginal(model, batch.x_contrastive).mean()
    else:
        term_bce = zero
    total = weights.w_atce * term_atce + weights.w_bce * term_bce
    return total, {"loss_atce": term_atce, "loss_bce": term_bce}


def uniform_ce(model, x):
    """Mean CE against the uniform label distribution (RATIO's OOD term)."""
    return objective_values(model, x, "uniform_ce").mean()
