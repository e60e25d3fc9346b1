"""Evaluation battery: robust accuracy, FID, IS, OOD AUROC, ECE, counterfactual FID.

Distribution metrics run on numpy float64 features produced by a named
embedder; the embedder name travels with every report row so numbers
from different feature spaces are never cross-compared.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .attacks import (AttackSpec, attack_hash, pgd_classification_attack, pgd_energy_sample,
                      run_attack, uniform_ce_attack)
from .energy import conditional_probs, marginal_energy
from .errors import DomainError
from .models import FROZEN_STATS, set_norm_mode

__all__ = [
    "IdentityFlatten",
    "TrainedProbe",
    "train_probe",
    "GaussianSummary",
    "fid",
    "fid_from_features",
    "inception_score",
    "robust_accuracy",
    "accuracy",
    "ood_scores",
    "ood_auroc",
    "ece",
    "counterfactual_fid",
    "MetricReport",
    "write_reports",
]

# exact pair counting below this many comparisons, midranks above
_PAIR_LIMIT = 10 ** 6


class _FrozenEval:
    """Evaluate a model with frozen stats and no grad, restoring its mode."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.prev = getattr(self.model, "norm_mode", None)
        if self.prev is not None:
            set_norm_mode(self.model, FROZEN_STATS)
        return self.model

    def __exit__(self, *exc):
        if self.prev is not None:
            set_norm_mode(self.model, self.prev)
        return False


class IdentityFlatten:
    """Feature embedder that just flattens samples. For low-dim data."""

    name = "identity_flatten"

    def __call__(self, x) -> np.ndarray:
        return x.detach().reshape(x.shape[0], -1).cpu().numpy().astype(np.float64)


class TrainedProbe:
    """Penultimate features of a frozen, independently trained classifier."""

    name = "trained_probe"

    def __init__(self, model, batch_size=256):
        self.model = model
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, x) -> np.ndarray:
        outs = []
        with _FrozenEval(self.model) as m:
            for i in range(0, x.shape[0], self.batch_size):
                outs.append(m.features(x[i:i + self.batch_size]).cpu().numpy())
        return np.concatenate(outs).astype(np.float64)


def train_probe(data, seed=0, steps=300, batch_size=128, lr=1e-3) -> TrainedProbe:
    """Train a small independent classifier on ID images for FID features.

    The probe is separate from any evaluated model; its weights freeze
    after training so the feature space is fixed per (data, seed).
    """
    from .data import BatchStream, derive_seed
    from .models import build_model

    model = build_model({"kind": "conv", "in_shape": data.sample_shape,
                         "num_classes": data.num_classes, "width": 16},
                        seed=derive_seed("probe", seed))
    stream = BatchStream(data.samples, data.labels, batch_size,
                         derive_seed("probe_stream", seed))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for _ in range(steps):
        x, y = stream.next_batch()
        loss = torch.nn.functional.cross_entropy(model.logits(x), y)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    set_norm_mode(model, FROZEN_STATS)
    for p in model.parameters():
        p.requires_grad_(False)
    return TrainedProbe(model)


@dataclass
class GaussianSummary:
    """Mean and covariance of an embedded sample set."""

    mean: np.ndarray
    cov: np.ndarray
    n: int
    regularized: bool = False

    @staticmethod
    def from_features(feats: np.ndarray) -> "GaussianSummary":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise DomainError("need a [N >= 2, D] feature matrix")
        n, d = feats.shape
        mean = feats.mean(axis=0)
        cov = np.cov(feats, rowvar=False).reshape(d, d)
        cov = 0.5 * (cov + cov.T)
        regularized = n < d + 1
        if regularized:
            # too few samples for a full-rank estimate
            cov = cov + 1e-6 * np.eye(d)
        return GaussianSummary(mean=mean, cov=cov, n=n, regularized=regularized)


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < -1e-6:
        raise DomainError(f"covariance not PSD: min eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: GaussianSummary, b: GaussianSummary) -> float:
    """Frechet distance between two Gaussian summaries.

    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}); the cross sqrt is
    taken via sqrt(Sa) Sb sqrt(Sa), whose eigenvalues are clipped at
    -1e-6 (error beyond that).
    """
    if a.mean.shape != b.mean.shape:
        raise DomainError("summaries have different dimensions")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    cross = root_a @ b.cov @ root_a
    cross = 0.5 * (cross + cross.T)
    cvals = np.linalg.eigvalsh(cross)
    if cvals.min() < -1e-6:
        raise DomainError(f"cross product not PSD: min eigenvalue {cvals.min():.3e}")
    tr_cross = np.sqrt(np.clip(cvals, 0.0, None)).sum()
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_cross)
    return max(value, 0.0)


def fid_from_features(fa, fb) -> float:
    return fid(GaussianSummary.from_features(fa), GaussianSummary.from_features(fb))


def inception_score(probs) -> float:
    """exp(mean KL(p_i || mean p)); 1 for uniform rows, up to K."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise DomainError("probs must be [N, K]")
    if (p < -1e-8).any() or (np.abs(p.sum(axis=1) - 1.0) > 1e-5).any():
        raise DomainError("rows must be probability distributions")
    p = np.clip(p, 0.0, None)
    p_bar = p.mean(axis=0)
    terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(p_bar)), 0.0)
    kl = np.clip(terms.sum(axis=1), 0.0, None)  # roundoff can dip below zero
    return float(np.exp(kl.mean()))


@torch.no_grad()
def accuracy(model, x, y) -> float:
    with _FrozenEval(model) as m:
        pred = m.logits(x).argmax(dim=1)
    return float((pred == y).float().mean())


def robust_accuracy(model, x, y, spec: AttackSpec, generator=None) -> float:
    """Fraction of samples still classified correctly after a bounded attack."""
    traj = pgd_classification_attack(model, x, y, spec, generator=generator)
    return accuracy(model, traj.final, y)


_SCORE_FNS = ("neg_energy", "max_confidence")


def ood_scores(model, x, fn: str, adversarial: AttackSpec | None = None,
               generator=None) -> np.ndarray:
    """Per-sample in-distribution scores; higher = more in-distribution.

    neg_energy: -E(x) (logsumexp of logits). max_confidence: max softmax.
    With an adversarial spec, x is first attacked to raise the matching
    score (the worst case for a detector), then scored.
    """
    if fn not in _SCORE_FNS:
        raise DomainError(f"unknown score fn {fn!r}")
    if adversarial is not None:
        objective = "neg_marginal_energy" if fn == "neg_energy" else "uniform_ce"
        if adversarial.objective != objective:
            adversarial = replace(adversarial, objective=objective)
        if adversarial.bound is None:
            raise DomainError("adversarial scoring needs a bounded attack")
        traj = run_attack(model, x, adversarial, generator=generator, keep_best=True)
        x = traj.final
    with torch.no_grad(), _FrozenEval(model) as m:
        logits = m.logits(x)
        if fn == "neg_energy":
            scores = -marginal_energy(logits)
        else:
            scores = conditional_probs(logits).max(dim=1).values
    return scores.cpu().numpy().astype(np.float64)


def ood_auroc(scores_id, scores_ood) -> float:
    """P(ID score > OOD score) with ties counted half.

    Exact pair counting when N*M is small; midrank summation (same
    value, O(n log n)) otherwise.
    """
    a = np.asarray(scores_id, dtype=np.float64)
    b = np.asarray(scores_ood, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DomainError("empty score array")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DomainError("non-finite scores")
    n, m = a.size, b.size
    if n * m <= _PAIR_LIMIT:
        greater = (a[:, None] > b[None, :]).sum()
        ties = (a[:, None] == b[None, :]).sum()
        return float((greater + 0.5 * ties) / (n * m))
    both = np.sort(np.concatenate([a, b]))
    lo = np.searchsorted(both, a, side="left")
    hi = np.searchsorted(both, a, side="right")
    midranks = 0.5 * (lo + hi + 1)  # 1-based average rank in the pooled sample
    return float((midranks.sum() - 0.5 * n * (n + 1)) / (n * m))


@dataclass
class EceBin:
    lo: float
    hi: float
    count: int
    acc: float
    conf: float


def ece(probs, labels, bins: int = 15):
    """Expected calibration error over equal-width max-confidence bins.

    Returns (ece value, list of EceBin rows). The last bin is closed at
    1.0; empty bins report zero accuracy/confidence.
    """
    if bins < 1:
        raise DomainError(f"bins must be >= 1, got {bins}")
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    conf = p.max(axis=1)
    correct = p.argmax(axis=1) == y
    idx = np.clip(np.floor(conf * bins).astype(int), 0, bins - 1)
    total = 0.0
    table = []
    for b in range(bins):
        mask = idx == b
        count = int(mask.sum())
        acc = float(correct[mask].mean()) if count else 0.0
        mean_conf = float(conf[mask].mean()) if count else 0.0
        if count:
            total += (count / p.shape[0]) * abs(acc - mean_conf)
        table.append(EceBin(lo=b / bins, hi=(b + 1) / bins, count=count,
                            acc=acc, conf=mean_conf))
    return float(total), table


@dataclass
class CounterfactualRow:
    eps: float
    fid: float
    confidence: float
    regularized: bool


def counterfactual_fid(model, x_sources, x_real_target, target_class, eps_grid,
                       spec: AttackSpec, embedder, generator=None):
    """Targeted attacks toward one class, scored against that class's reals.

    For each eps: drive x_sources toward target_class with a bounded
    targeted CE attack, then report FID(counterfactuals, x_real_target)
    under the embedder plus the mean predicted target-class confidence.
    The step size grows with eps (2.5 * eps / steps, never below the
    base spec's) so large balls are actually explored rather than capped
    by the base step budget. Small real sets (< D+1 samples) get a
    regularized covariance and the row is flagged.
    """
    real_summary = GaussianSummary.from_features(embedder(x_real_target))
    target = torch.full((x_sources.shape[0],), int(target_class), dtype=torch.int64)
    rows = []
    for eps in eps_grid:
        step_size = max(spec.step_size, 2.5 * float(eps) / max(spec.steps, 1))
        cf_spec = AttackSpec(steps=spec.steps, step_size=step_size,
                             objective="cross_entropy", bound=float(eps),
                             init_noise=spec.init_noise, clamp01=spec.clamp01,
                             targeted=True, step_rule=spec.step_rule)
        traj = pgd_classification_attack(model, x_sources, target, cf_spec,
                                         generator=generator)
        cf_summary = GaussianSummary.from_features(embedder(traj.final))
        with torch.no_grad(), _FrozenEval(model) as m:
            conf = conditional_probs(m.logits(traj.final))[:, int(target_class)].mean()
        rows.append(CounterfactualRow(
            eps=float(eps),
            fid=fid(cf_summary, real_summary),
            confidence=float(conf),
            regularized=real_summary.regularized or cf_summary.regularized,
        ))
    return rows


@dataclass
class MetricReport:
    """One evaluation result row, as logged to eval.csv."""

    step: int
    metric: str
    value: float
    embedder: str = ""
    attack_hash: str = ""
    n_samples: int = 0
    seed: int = 0


EVAL_CSV_COLUMNS = ("step", "metric", "value", "embedder", "attack_hash", "n_samples", "seed")


def write_reports(path, reports, append=True):
    """Append MetricReport rows to a CSV, writing the header once."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists())
    mode = "a" if append else "w"
    with open(path, mode, newline="") as f:
        writer = csv.writer(f)
        if fresh or not append:
            writer.writerow(EVAL_CSV_COLUMNS)
        for r in reports:
            writer.writerow([r.step, r.metric, repr(float(r.value)), r.embedder,
                             r.attack_hash, r.n_samples, r.seed])
    return path
