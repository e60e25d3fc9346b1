"""Datasets, augmentation policies, and the dual training stream.

Desk-scale corpora: a two-moons set (ID) with a surrounding annulus
(OOD) for 2D work, and an 8x8 digit set (ID) with rendered letter
glyphs (OOD) for image work. OOD handles carry no labels. All samples
live in [0, 1].

Everything is deterministic under its seed. Augmentation randomness is
derived per (seed, role, step), never drawn from the data streams, so
changing one stream's policy cannot shift another stream's draws.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DomainError

__all__ = [
    "DatasetHandle",
    "AugmentationPolicy",
    "parse_policy",
    "apply_policy",
    "load_dataset",
    "BatchStream",
    "DualStream",
    "sample_labels",
    "derive_seed",
]


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary hashable parts (not salted)."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


@dataclass
class DatasetHandle:
    """In-memory dataset: samples in [0,1], optional integer labels."""

    name: str
    split: str
    samples: torch.Tensor
    labels: torch.Tensor | None
    num_classes: int

    def __len__(self):
        return self.samples.shape[0]

    @property
    def sample_shape(self):
        return tuple(self.samples.shape[1:])


def _two_moons(n, seed, noise=0.06):
    rng = np.random.default_rng(seed)
    n_out = n // 2
    n_in = n - n_out
    t_out = rng.uniform(0.0, np.pi, n_out)
    t_in = rng.uniform(0.0, np.pi, n_in)
    outer = np.stack([np.cos(t_out), np.sin(t_out)], axis=1)
    inner = np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1)
    pts = np.concatenate([outer, inner], axis=0)
    labels = np.concatenate([np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)])
    pts = pts + rng.normal(0.0, noise, pts.shape)
    # isotropic map into [0,1]^2 (same scale both axes keeps the geometry)
    pts = (pts + np.array([1.3, 0.8])) / 3.6
    perm = rng.permutation(n)
    pts = np.clip(pts[perm], 0.0, 1.0)
    return torch.tensor(pts, dtype=torch.float32), torch.tensor(labels[perm])


def _ring(n, seed, center=(0.5, 0.30), r_lo=0.18, r_hi=0.30):
    rng = np.random.default_rng(seed)
    # sqrt of a uniform makes the annulus area-uniform
    r = np.sqrt(rng.uniform(r_lo ** 2, r_hi ** 2, n))
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    pts = np.stack([center[0] + r * np.cos(theta), center[1] + r * np.sin(theta)], axis=1)
    pts = np.clip(pts, 0.0, 1.0)
    return torch.tensor(pts, dtype=torch.float32)


def _digits(split, seed, size=None):
    from sklearn.datasets import load_digits

    bunch = load_digits()
    imgs = torch.tensor(bunch.images, dtype=torch.float32).unsqueeze(1) / 16.0
    labels = torch.tensor(bunch.target, dtype=torch.int64)
    perm = torch.tensor(np.random.default_rng(derive_seed("digits", seed)).permutation(len(imgs)))
    imgs, labels = imgs[perm], labels[perm]
    cut = 1500
    if split == "train":
        imgs, labels = imgs[:cut], labels[:cut]
    else:
        imgs, labels = imgs[cut:], labels[cut:]
    if size is not None:
        imgs, labels = imgs[:size], labels[:size]
    return imgs, labels


_LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


def _letters(n, seed):
    from PIL import Image, ImageDraw, ImageFont

    font = ImageFont.load_default()
    rng = np.random.default_rng(seed)
    out = np.zeros((n, 1, 8, 8), dtype=np.float32)
    for i in range(n):
        ch = _LETTERS[rng.integers(0, len(_LETTERS))]
        dx, dy = rng.integers(-1, 2), rng.integers(-1, 2)
        canvas = Image.new("L", (16, 16), 0)
        ImageDraw.Draw(canvas).text((int(4 + dx), int(2 + dy)), ch, fill=255, font=font)
        small = canvas.resize((8, 8), Image.BILINEAR)
        out[i, 0] = np.asarray(small, dtype=np.float32) / 255.0
    return torch.tensor(out)


def _image_folder(root, split, seed, size=None):
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DomainError(f"image folder {root} does not exist")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DomainError(f"corrupt folder {root}: no class subdirectories")
    samples, labels = [], []
    for ci, cdir in enumerate(class_dirs):
        for f in sorted(cdir.iterdir()):
            if not f.is_file():
                continue
            try:
                arr = np.asarray(Image.open(f), dtype=np.float32)
            except Exception as e:
                raise DomainError(f"corrupt folder {root}: cannot read {f.name}: {e}") from e
            if arr.ndim == 2:
                arr = arr[None]
            elif arr.ndim == 3:
                arr = arr.transpose(2, 0, 1)
            else:
                raise DomainError(f"corrupt folder {root}: bad image rank in {f.name}")
            samples.append(arr / 255.0)
            labels.append(ci)
    if not samples:
        raise DomainError(f"corrupt folder {root}: no images")
    shape = samples[0].shape
    if any(s.shape != shape for s in samples):
        raise DomainError(f"corrupt folder {root}: inconsistent image shapes")
    x = torch.tensor(np.stack(samples), dtype=torch.float32).clamp(0.0, 1.0)
    y = torch.tensor(labels, dtype=torch.int64)
    perm = torch.tensor(np.random.default_rng(derive_seed("folder", split, seed)).permutation(len(x)))
    x, y = x[perm], y[perm]
    if size is not None:
        x, y = x[:size], y[:size]
    return x, y, len(class_dirs)


_DEFAULT_SIZES = {
    ("two_moons_id", "train"): 2048,
    ("two_moons_id", "test"): 512,
    ("ring_ood", "train"): 1024,
    ("ring_ood", "test"): 512,
    ("small_letters_ood", "train"): 512,
    ("small_letters_ood", "test"): 256,
}


def load_dataset(name, split="train", seed=0, size=None) -> DatasetHandle:
    """Build a named dataset deterministically.

    Names: two_moons_id, ring_ood, small_digits_id, small_letters_ood,
    or "folder:<root>" with <root>/<class>/<image> layout. Splits draw
    from disjoint derived seeds (or index ranges for finite corpora).
    """
    if split not in ("train", "test"):
        raise DomainError(f"unknown split {split!r}")
    n = size or _DEFAULT_SIZES.get((name, split))
    sub = derive_seed(name, split, seed)
    if name == "two_moons_id":
        x, y = _two_moons(n, sub)
        return DatasetHandle(name, split, x, y, 2)
    if name == "ring_ood":
        return DatasetHandle(name, split, _ring(n, sub), None, 0)
    if name == "small_digits_id":
        x, y = _digits(split, seed, size)
        return DatasetHandle(name, split, x, y, 10)
    if name == "small_letters_ood":
        return DatasetHandle(name, split, _letters(n, sub), None, 0)
    if name.startswith("folder:"):
        x, y, k = _image_folder(name.split(":", 1)[1], split, seed, size)
        return DatasetHandle(name, split, x, y, k)
    raise DomainError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    """Ordered list of (transform name, integer parameter or None)."""

    ops: tuple
    text: str

    def __str__(self):
        return self.text


_TRANSFORM_NAMES = ("none", "horizontal_flip", "random_crop_pad", "center_crop",
                    "resize", "cutout", "autoaugment_like")
_PARAMETRIC = ("random_crop_pad", "cutout")


def parse_policy(text) -> AugmentationPolicy:
    """Parse "horizontal_flip,random_crop_pad(1),cutout(2)" style strings."""
    text = (text or "none").strip()
    ops = []
    for raw in text.split(","):
        item = raw.strip()
        if not item:
            continue
        param = None
        if "(" in item:
            if not item.endswith(")"):
                raise DomainError(f"malformed transform {item!r}")
            item, arg = item[:-1].split("(", 1)
            try:
                param = int(arg)
            except ValueError:
                raise DomainError(f"transform parameter must be an integer: {raw!r}")
        if item not in _TRANSFORM_NAMES:
            raise DomainError(f"unknown transform {item!r}")
        if item in _PARAMETRIC and (param is None or param < 1):
            raise DomainError(f"transform {item} needs a positive integer parameter")
        if item == "none":
            continue
        ops.append((item, param))
    return AugmentationPolicy(ops=tuple(ops), text=text)


POLICY_NONE = AugmentationPolicy(ops=(), text="none")


def _need_images(x, name):
    if x.dim() != 4:
        raise DomainError(f"transform {name} needs image batches [B,C,H,W], got rank {x.dim()}")


def _t_horizontal_flip(x, _param, gen):
    _need_images(x, "horizontal_flip")
    coin = torch.rand(x.shape[0], generator=gen) < 0.5
    out = x.clone()
    out[coin] = out[coin].flip(-1)
    return out


def _t_random_crop_pad(x, k, gen):
    _need_images(x, "random_crop_pad")
    h, w = x.shape[-2:]
    padded = F.pad(x, (k, k, k, k))
    oy = torch.randint(0, 2 * k + 1, (x.shape[0],), generator=gen)
    ox = torch.randint(0, 2 * k + 1, (x.shape[0],), generator=gen)
    rows = [padded[i:i + 1, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w] for i in range(x.shape[0])]
    return torch.cat(rows, dim=0)


def _t_center_crop(x, param, _gen):
    _need_images(x, "center_crop")
    k = param or 1
    h, w = x.shape[-2:]
    if 2 * k >= min(h, w):
        raise DomainError(f"center_crop margin {k} too large for {h}x{w}")
    inner = x[..., k:h - k, k:w - k]
    return F.interpolate(inner, size=(h, w), mode="bilinear", align_corners=False)


def _t_resize(x, _param, _gen):
    # shapes are fixed per pipeline; resize to the native shape is identity
    _need_images(x, "resize")
    return x


def _t_cutout(x, n, gen):
    _need_images(x, "cutout")
    h, w = x.shape[-2:]
    if n > min(h, w):
        raise DomainError(f"cutout size {n} exceeds image {h}x{w}")
    oy = torch.randint(0, h - n + 1, (x.shape[0],), generator=gen)
    ox = torch.randint(0, w - n + 1, (x.shape[0],), generator=gen)
    out = x.clone()
    for i in range(x.shape[0]):
        out[i, :, oy[i]:oy[i] + n, ox[i]:ox[i] + n] = 0.0
    return out


def _t_autoaugment_like(x, _param, gen):
    # fixed small jitter set: brightness, contrast, shear
    _need_images(x, "autoaugment_like")
    b = x.shape[0]
    bright = torch.rand(b, generator=gen) * 0.3 - 0.15
    contrast = 0.75 + torch.rand(b, generator=gen) * 0.5
    shear = torch.rand(b, generator=gen) * 0.4 - 0.2
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    out = (x - mean) * contrast.view(-1, 1, 1, 1) + mean + bright.view(-1, 1, 1, 1)
    theta = torch.zeros(b, 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = 1.0
    theta[:, 1, 1] = 1.0
    theta[:, 0, 1] = shear
    grid = F.affine_grid(theta, list(out.shape), align_corners=False)
    out = F.grid_sample(out, grid, align_corners=False, padding_mode="zeros")
    return out.clamp(0.0, 1.0)


_TRANSFORMS = {
    "horizontal_flip": _t_horizontal_flip,
    "random_crop_pad": _t_random_crop_pad,
    "center_crop": _t_center_crop,
    "resize": _t_resize,
    "cutout": _t_cutout,
    "autoaugment_like": _t_autoaugment_like,
}


def apply_policy(policy: AugmentationPolicy, batch, seed) -> torch.Tensor:
    """Apply a policy's transforms in order, deterministically under seed.

    Output has the batch's shape and stays in [0, 1].
    """
    if not policy.ops:
        return batch
    gen = torch.Generator()
    gen.manual_seed(derive_seed("aug", seed))
    x = batch
    for name, param in policy.ops:
        x = _TRANSFORMS[name](x, param, gen)
    if x.shape != batch.shape:
        raise DomainError("transform changed the batch shape")
    return x.clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# streams


class BatchStream:
    """Endless batches with seeded shuffling; reshuffles on exhaustion.

    State (generator bytes, permutation, cursor) is serializable so a
    resumed run continues with the exact same draws.
    """

    def __init__(self, samples, labels, batch_size, seed):
        if batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {batch_size}")
        if samples.shape[0] < 1:
            raise DomainError("empty dataset")
        self.samples = samples
        self.labels = labels
        self.batch_size = batch_size
        self._gen = torch.Generator()
        self._gen.manual_seed(derive_seed("stream", seed))
        self._reshuffle()

    def _reshuffle(self):
        self._perm = torch.randperm(self.samples.shape[0], generator=self._gen)
        self._pos = 0

    def next_batch(self):
        n = self.samples.shape[0]
        chunks = []
        need = self.batch_size
        while need > 0:
            if self._pos >= n:
                self._reshuffle()
            take = min(need, n - self._pos)
            chunks.append(self._perm[self._pos:self._pos + take])
            self._pos += take
            need -= take
        idx = torch.cat(chunks)
        x = self.samples[idx]
        y = self.labels[idx] if self.labels is not None else None
        return x, y

    def state_dict(self):
        return {"gen": self._gen.get_state().clone(), "perm": self._perm.clone(),
                "pos": self._pos}

    def load_state_dict(self, state):
        self._gen.set_state(state["gen"].clone())
        self._perm = state["perm"].clone()
        self._pos = state["pos"]


class DualStream:
    """Per-step triple: (x strong-augmented + y, x_hat mild, x0 mild).

    Three independent sub-streams over two datasets. Augmentation seeds
    derive from (seed, role, step), so swapping the strong policy leaves
    the two mild streams bit-identical.
    """

    def __init__(self, data: DatasetHandle, ood: DatasetHandle, strong: AugmentationPolicy,
                 mild: AugmentationPolicy, batch_size, ood_batch_size=None, seed=0):
        if data.labels is None:
            raise DomainError("classification stream needs a labeled dataset")
        self.strong = strong
        self.mild = mild
        self._seed = seed
        self.step = 0
        self._cls = BatchStream(data.samples, data.labels, batch_size,
                                derive_seed(seed, "cls"))
        self._gen = BatchStream(data.samples, None, batch_size, derive_seed(seed, "gen"))
        self._ood = BatchStream(ood.samples, None, ood_batch_size or batch_size,
                                derive_seed(seed, "ood"))

    def next(self):
        x, y = self._cls.next_batch()
        x = apply_policy(self.strong, x, derive_seed(self._seed, "strong", self.step))
        x_hat, _ = self._gen.next_batch()
        x_hat = apply_policy(self.mild, x_hat, derive_seed(self._seed, "mild_data", self.step))
        x0, _ = self._ood.next_batch()
        x0 = apply_policy(self.mild, x0, derive_seed(self._seed, "mild_ood", self.step))
        self.step += 1
        return x, y, x_hat, x0

    def state_dict(self):
        return {"cls": self._cls.state_dict(), "gen": self._gen.state_dict(),
                "ood": self._ood.state_dict(), "step": self.step}

    def load_state_dict(self, state):
        self._cls.load_state_dict(state["cls"])
        self._gen.load_state_dict(state["gen"])
        self._ood.load_state_dict(state["ood"])
        self.step = state["step"]


def sample_labels(data: DatasetHandle, n, generator=None) -> torch.Tensor:
    """Draw labels from the empirical label distribution of a dataset."""
    if data.labels is None:
        raise DomainError(f"dataset {data.name} has no labels")
    idx = torch.randint(0, data.labels.shape[0], (n,), generator=generator)
    return data.labels[idx].clone()
