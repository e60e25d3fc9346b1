"""Model architectures, normalization-mode control, EMA, checkpoints.

Every model here is a plain classifier: forward(x) -> logits [B, K].
Normalization layers live in one of two modes:

  * BATCH_STATS: batch norm uses batch statistics and updates running stats
    (standard training behavior).
  * FROZEN_STATS: batch norm applies stored running statistics and leaves
    them untouched (eval behavior), regardless of the surrounding
    train/eval flags.

The mode is an explicit model attribute so training code can assert on it
instead of trusting module.training flags.
"""

from __future__ import annotations

import io

import torch
import torch.nn as nn

from .errors import CheckpointError, DomainError, UnsupportedOperation

__all__ = [
    "BATCH_STATS",
    "FROZEN_STATS",
    "EnergyModel",
    "MLPEnergyModel",
    "ConvEnergyModel",
    "set_norm_mode",
    "input_gradient",
    "EmaShadow",
    "build_model",
    "save_checkpoint",
    "load_checkpoint",
]

BATCH_STATS = "batch_stats"
FROZEN_STATS = "frozen_stats"

CHECKPOINT_VERSION = 1


class EnergyModel(nn.Module):
    """Base classifier with an explicit normalization mode.

    Subclasses set self.input_shape (sample shape, no batch dim) and
    self.num_classes, and implement forward/features.
    """

    input_shape: tuple[int, ...]
    num_classes: int

    def __init__(self):
        super().__init__()
        self._norm_mode = BATCH_STATS

    @property
    def norm_mode(self) -> str:
        return self._norm_mode

    def _apply_norm_mode(self):
        training = self._norm_mode == BATCH_STATS
        for m in self.modules():
            if isinstance(m, nn.modules.batchnorm._BatchNorm):
                m.training = training

    def train(self, mode: bool = True):
        # Norm layers follow norm_mode, not the generic training flag.
        super().train(mode)
        self._apply_norm_mode()
        return self

    def logits(self, x):
        """Validated forward pass: x must be [B, *input_shape]."""
        if x.dim() != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise DomainError(
                f"expected input [B, {', '.join(map(str, self.input_shape))}], "
                f"got shape {tuple(x.shape)}"
            )
        return self(x)

    def features(self, x):
        raise NotImplementedError

    def config(self) -> dict:
        """Constructor description, enough to rebuild the architecture."""
        raise NotImplementedError


class MLPEnergyModel(EnergyModel):
    """Small fully connected classifier for low-dimensional data."""

    def __init__(self, in_dim=2, hidden=(64, 64), num_classes=2, batch_norm=True):
        super().__init__()
        self.input_shape = (in_dim,)
        self.num_classes = num_classes
        self._cfg = dict(in_dim=in_dim, hidden=tuple(hidden), num_classes=num_classes,
                         batch_norm=batch_norm)
        layers = []
        d = in_dim
        for h in hidden:
            layers.append(nn.Linear(d, h))
            if batch_norm:
                layers.append(nn.BatchNorm1d(h))
            layers.append(nn.SiLU())
            d = h
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(d, num_classes)
        self._apply_norm_mode()

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.body(x))

    def config(self):
        return {"kind": "mlp", **self._cfg}


class ConvEnergyModel(EnergyModel):
    """Small convolutional classifier for image batches [B, C, H, W]."""

    def __init__(self, in_shape=(1, 8, 8), num_classes=10, width=16):
        super().__init__()
        self.input_shape = tuple(in_shape)
        self.num_classes = num_classes
        self._cfg = dict(in_shape=tuple(in_shape), num_classes=num_classes, width=width)
        c = in_shape[0]
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(c, w, 3, padding=1),
            nn.BatchNorm2d(w),
            nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, padding=1, stride=2),
            nn.BatchNorm2d(2 * w),
            nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1),
            nn.BatchNorm2d(2 * w),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.head = nn.Linear(2 * w, num_classes)
        self._apply_norm_mode()

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.body(x))

    def config(self):
        return {"kind": "conv", **self._cfg}


def set_norm_mode(model: EnergyModel, mode: str):
    """Switch normalization behavior; running statistics are preserved."""
    if mode not in (BATCH_STATS, FROZEN_STATS):
        raise DomainError(f"unknown norm mode {mode!r}")
    model._norm_mode = mode
    model._apply_norm_mode()
    return model


def input_gradient(model, x, objective):
    """Gradient of a scalar objective(model, x) with respect to x.

    The model's parameters are left untouched (no .grad set). The
    objective must return a scalar tensor connected to x.
    """
    x_req = x.detach().clone().requires_grad_(True)
    value = objective(model, x_req)
    if not torch.is_tensor(value) or value.dim() != 0:
        raise UnsupportedOperation("objective must return a scalar tensor")
    if not value.requires_grad:
        raise UnsupportedOperation("objective is not differentiable with respect to x")
    try:
        (grad,) = torch.autograd.grad(value, x_req)
    except RuntimeError as e:
        raise UnsupportedOperation(f"objective is not differentiable: {e}") from e
    return grad


class EmaShadow:
    """Exponential moving average of model parameters.

    After update(): shadow = decay * shadow + (1 - decay) * parameter.
    Buffers (running stats) are not shadowed; the live model owns them.
    """

    def __init__(self, model: nn.Module, decay: float):
        if not 0.0 < decay < 1.0:
            raise DomainError(f"decay must be in (0, 1), got {decay}")
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.named_parameters()}

    @torch.no_grad()
    def update(self, model: nn.Module):
        for k, v in model.named_parameters():
            self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1.0 - self.decay)

    @torch.no_grad()
    def copy_to(self, model: nn.Module):
        for k, v in model.named_parameters():
            v.copy_(self.shadow[k])

    class _Swap:
        def __init__(self, ema, model):
            self.ema, self.model = ema, model

        def __enter__(self):
            self.backup = {k: v.detach().clone() for k, v in self.model.named_parameters()}
            self.ema.copy_to(self.model)
            return self.model

        def __exit__(self, *exc):
            with torch.no_grad():
                for k, v in self.model.named_parameters():
                    v.copy_(self.backup[k])
            return False

    def applied(self, model: nn.Module):
        """Context manager: model runs with shadow weights, then restores."""
        return EmaShadow._Swap(self, model)

    def state_dict(self):
        return {"decay": self.decay, "shadow": {k: v.clone() for k, v in self.shadow.items()}}

    def load_state_dict(self, state):
        self.decay = state["decay"]
        self.shadow = {k: v.clone() for k, v in state["shadow"].items()}


_MODEL_KINDS = {"mlp": MLPEnergyModel, "conv": ConvEnergyModel}


def build_model(config: dict, seed: int | None = None) -> EnergyModel:
    """Construct a model from a config() dict, optionally with seeded init."""
    cfg = dict(config)
    kind = cfg.pop("kind", None)
    if kind not in _MODEL_KINDS:
        raise DomainError(f"unknown model kind {kind!r}")
    if seed is not None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            return _MODEL_KINDS[kind](**cfg)
    return _MODEL_KINDS[kind](**cfg)


def save_checkpoint(path, model: EnergyModel, ema: EmaShadow | None = None,
                    plan_hash: str = "", step: int = 0, extra: dict | None = None):
    """Write a versioned checkpoint container.

    Holds parameters and running stats (state_dict), the EMA shadow, the
    norm mode, the plan hash that produced it, and optional extra state
    (optimizer/stream/rng) for exact resume.
    """
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config(),
        "state_dict": {k: v.cpu() for k, v in model.state_dict().items()},
        "ema": ema.state_dict() if ema is not None else None,
        "norm_mode": model.norm_mode,
        "plan_hash": plan_hash,
        "step": step,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Read a checkpoint; returns (model, payload) with norm mode restored."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    for key in ("model_config", "state_dict", "norm_mode"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} missing field {key!r}")
    model = build_model(payload["model_config"])
    model.load_state_dict(payload["state_dict"])
    set_norm_mode(model, payload["norm_mode"])
    return model, payload
