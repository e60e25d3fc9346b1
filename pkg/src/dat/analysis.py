"""Numerical checks connecting adversarial training to gradient penalties.

Two algebraic facts get verified on concrete models instead of trusted:
the first-order expansion max_{|d|<=eps} CE(x+d) ~ CE(x) + eps*|grad CE|
(inner max approximated by a dense multi-restart PGD), and the exact
four-term decomposition of |grad_x CE|^2 into per-class logit gradients.
A third check compares ancestral and marginal contrastive sampling by
FID on a trained model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .attacks import DEGENERATE_GRAD_EPS, AttackSpec, pgd_classification_attack, pgd_energy_sample
from .data import sample_labels
from .energy import conditional_probs
from .errors import DomainError
from .metrics import GaussianSummary, fid
from .models import FROZEN_STATS, set_norm_mode

__all__ = [
    "ExpansionRow",
    "verify_first_order_expansion",
    "verify_gradient_decomposition",
    "compare_sampling_strategies",
]


@dataclass
class ExpansionRow:
    eps: float
    inner_max: float
    linear: float
    rel_error: float
    mean_gap: float  # inner_max - linear, sign matters (>= 0 when CE is convex in d)


def _per_sample_ce_and_grad(model, x, y):
    x_req = x.detach().clone().requires_grad_(True)
    logits = model.logits(x_req)
    ce = torch.nn.functional.cross_entropy(logits, y.long(), reduction="none")
    # a CE disconnected from x is the all-degenerate case, reported below
    (grad,) = torch.autograd.grad(ce.sum(), x_req, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x_req)
    return ce.detach(), grad.detach()


def verify_first_order_expansion(model, x, y, eps_list, steps=100, restarts=10,
                                 generator=None, clamp01=False):
    """Compare the PGD inner max against CE(x) + eps * ||grad CE(x)||.

    Dense PGD (default 100 steps, 10 restarts, first restart noiseless)
    stands in for the exact inner maximum. Returns one ExpansionRow per
    eps with batch-mean values. Vanishing CE gradients are an error:
    the linear prediction would be meaningless there.
    """
    prev = getattr(model, "norm_mode", None)
    if prev is not None:
        set_norm_mode(model, FROZEN_STATS)
    try:
        ce0, grad = _per_sample_ce_and_grad(model, x, y)
        gnorm = grad.reshape(grad.shape[0], -1).norm(dim=1)
        if (gnorm < DEGENERATE_GRAD_EPS).any():
            raise DomainError("degenerate CE gradient; expansion undefined")
        rows = []
        for eps in eps_list:
            eps = float(eps)
            linear = ce0 + eps * gnorm
            if eps == 0:
                inner = ce0.clone()
            else:
                inner = torch.full_like(ce0, float("-inf"))
                for r in range(restarts):
                    spec = AttackSpec(steps=steps, step_size=2.5 * eps / steps,
                                      objective="cross_entropy", bound=eps,
                                      init_noise=0.0 if r == 0 else eps / 2,
                                      clamp01=clamp01)
                    traj = pgd_classification_attack(model, x, y, spec, generator=generator)
                    inner = torch.maximum(inner, traj.objective_values.max(dim=0).values)
            rel = (inner - linear).abs() / linear.abs().clamp_min(1e-12)
            rows.append(ExpansionRow(eps=eps, inner_max=float(inner.mean()),
                                     linear=float(linear.mean()),
                                     rel_error=float(rel.mean()),
                                     mean_gap=float((inner - linear).mean())))
        return rows
    finally:
        if prev is not None:
            set_norm_mode(model, prev)


def verify_gradient_decomposition(model, x, y) -> np.ndarray:
    """Per-sample |direct - expansion| residuals of the CE-gradient identity.

    ||grad_x CE||^2 == (1-p_y)^2 ||g_y||^2 + sum_{k!=y} p_k^2 ||g_k||^2
    - 2 (1-p_y) sum_{k!=y} p_k <g_y, g_k> + 2 sum_{i<j!=y} p_i p_j <g_i, g_j>
    with g_k the input gradient of logit k. Algebraic identity; residuals
    are numerical noise only.
    """
    prev = getattr(model, "norm_mode", None)
    if prev is not None:
        set_norm_mode(model, FROZEN_STATS)
    try:
        b = x.shape[0]
        x_req = x.detach().clone().requires_grad_(True)
        logits = model.logits(x_req)
        k = logits.shape[1]
        if k < 2:
            raise DomainError("decomposition needs K >= 2")
        ce = torch.nn.functional.cross_entropy(logits, y.long(), reduction="none")
        (grad_ce,) = torch.autograd.grad(ce.sum(), x_req, retain_graph=True)
        direct = grad_ce.detach().reshape(b, -1).norm(dim=1).pow(2)

        probs = conditional_probs(logits).detach()
        class_grads = []
        for c in range(k):
            (g,) = torch.autograd.grad(logits[:, c].sum(), x_req, retain_graph=c < k - 1)
            class_grads.append(g.reshape(b, -1))
        g = torch.stack(class_grads, dim=1)  # [B, K, D]
        gram = torch.einsum("bkd,bld->bkl", g, g)
        y_idx = y.long()
        p_y = probs.gather(1, y_idx.unsqueeze(1)).squeeze(1)
        ar = torch.arange(b)
        gy_sq = gram[ar, y_idx, y_idx]
        others = torch.ones_like(probs, dtype=torch.bool)
        others[ar, y_idx] = False

        term1 = (1 - p_y).pow(2) * gy_sq
        pk = probs.clone()
        pk[~others] = 0.0
        term2 = (pk.pow(2) * torch.diagonal(gram, dim1=1, dim2=2)).sum(dim=1)
        cross_y = gram[ar, y_idx, :]  # <g_y, g_k> for all k
        term3 = -2.0 * (1 - p_y) * (pk * cross_y).sum(dim=1)
        # full symmetric sum over k != y pairs, i < j, via the Gram matrix
        pairs = torch.einsum("bk,bl,bkl->b", pk, pk, gram)
        diag = (pk.pow(2) * torch.diagonal(gram, dim1=1, dim2=2)).sum(dim=1)
        term4 = pairs - diag  # equals 2 * sum_{i<j} p_i p_j <g_i, g_j>
        expansion = term1 + term2 + term3 + term4
        return (direct - expansion).abs().cpu().numpy()
    finally:
        if prev is not None:
            set_norm_mode(model, prev)


def compare_sampling_strategies(model, data, ood_x, gen_spec: AttackSpec, embedder,
                                seed=0):
    """FID of ancestral vs marginal contrastive sampling from shared starts.

    Ancestral draws labels from the data's empirical marginal and ascends
    the joint energy's negation; marginal ascends the marginal energy's.
    Both sample sets are scored against the same data summary. Returns
    (fid_ancestral, fid_marginal).
    """
    ref = GaussianSummary.from_features(embedder(data.samples))
    g_label = torch.Generator()
    g_label.manual_seed(seed)
    y_prime = sample_labels(data, ood_x.shape[0], g_label)
    anc_spec = replace(gen_spec, objective="neg_joint_energy")
    marg_spec = replace(gen_spec, objective="neg_marginal_energy")
    g1 = torch.Generator()
    g1.manual_seed(seed + 1)
    g2 = torch.Generator()
    g2.manual_seed(seed + 2)
    anc = pgd_energy_sample(model, ood_x, anc_spec, labels=y_prime, generator=g1).final
    marg = pgd_energy_sample(model, ood_x, marg_spec, generator=g2).final
    fid_anc = fid(ref, GaussianSummary.from_features(embedder(anc)))
    fid_marg = fid(ref, GaussianSummary.from_features(embedder(marg)))
    return fid_anc, fid_marg
