"""Energy reinterpretation of a classifier's logits.

A classifier producing logits f(x) in R^K defines a joint energy
E(x, y) = -f(x)[y] and, by marginalizing the implied joint density over
labels, a marginal energy E(x) = -logsumexp(f(x)). The conditional label
distribution recovered from the same logits is the ordinary softmax, so
nothing about the classifier changes; these are just different readings
of one tensor.
"""

import torch

from .errors import DomainError

__all__ = ["joint_energy", "marginal_energy", "conditional_probs"]


def _check_logits(logits):
    if logits.dim() != 2:
        raise DomainError(f"logits must be [batch, classes], got shape {tuple(logits.shape)}")
    if logits.shape[0] < 1 or logits.shape[1] < 1:
        # empty batches would surface later as NaN means; fail where it happened
        raise DomainError(f"logits must be non-empty, got shape {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise DomainError("non-finite logits")


def joint_energy(logits, labels):
    """Energy of (x, y) pairs: the negated logit of the given label.

    logits: [B, K], labels: [B] integer class indices. Returns [B].
    """
    _check_logits(logits)
    if labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise DomainError(
            f"labels must be [batch] = [{logits.shape[0]}], got shape {tuple(labels.shape)}"
        )
    k = logits.shape[1]
    if labels.numel() and (labels.min().item() < 0 or labels.max().item() >= k):
        raise DomainError(f"label out of range [0, {k})")
    return -logits.gather(1, labels.long().unsqueeze(1)).squeeze(1)


def marginal_energy(logits):
    """Energy of x alone: -logsumexp over the class dimension. Returns [B].

    torch.logsumexp is max-shifted internally, so large logits do not
    overflow; marginal_energy(tensor([[1000.0, 0.0]])) == -1000.
    """
    _check_logits(logits)
    return -torch.logsumexp(logits, dim=1)


def conditional_probs(logits):
    """Softmax label distribution, rows summing to one. Returns [B, K]."""
    _check_logits(logits)
    return torch.softmax(logits, dim=1)
