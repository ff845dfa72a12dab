"""Dataset ingestion and the two-view training dataset.

Images are kept as uint8 HWC arrays; views are produced on the fly.
Supported sources:

* ``synthetic-shapes`` -- procedurally rendered shape x texture classes (no download)
* ``cifar10`` / ``cifar100`` -- the python pickle archives under ``data_root``
* ``stl10`` -- the binary archive (``stl10_binary/``) under ``data_root``
* ``folder`` -- ``<data_root>/<split>.txt`` with ``relative/path.png <label>`` lines
"""

from __future__ import annotations

import colorsys
import os
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.utils.data import Dataset

from cgh import augment

DATA_ROOT_ENV = "CGH_DATA_ROOT"

# channel statistics published with the standard archives
_KNOWN_STATS = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "stl10": ((0.4467, 0.4398, 0.4066), (0.2603, 0.2566, 0.2713)),
}
_DEFAULT_SIZE = {"synthetic-shapes": 32, "cifar10": 32, "cifar100": 32, "stl10": 96, "folder": 64}


@dataclass
class LabeledImages:
    images: Sequence[np.ndarray]  # uint8 HWC
    labels: np.ndarray  # int64
    num_classes: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    image_size: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "LabeledImages":
        indices = np.asarray(indices, dtype=np.int64)
        if isinstance(self.images, np.ndarray):
            images = self.images[indices]
        else:
            images = [self.images[i] for i in indices]
        return LabeledImages(images, self.labels[indices], self.num_classes, self.mean, self.std, self.image_size)


def channel_stats(images: Sequence[np.ndarray]) -> tuple[tuple[float, ...], tuple[float, ...]]:
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for img in images:
        x = img.reshape(-1, img.shape[-1]).astype(np.float64) / 255.0
        if x.shape[1] == 1:
            x = np.repeat(x, 3, axis=1)
        total += x.sum(0)
        total_sq += (x ** 2).sum(0)
        count += x.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean ** 2, 1e-12))
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


# ----------------------------------------------------------------------
# synthetic shapes x textures
# ----------------------------------------------------------------------
SHAPES = ("disk", "square", "triangle", "ring", "cross")
TEXTURES = ("solid", "hstripes", "vstripes", "checker")
MAX_SYNTHETIC_CLASSES = len(SHAPES) * len(TEXTURES)
_GOLDEN = 0.618033988749895  # spreads class hues evenly for any class count


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u, v: coordinates in the shape's rotated frame, unit = half size
    if shape == "disk":
        return u ** 2 + v ** 2 <= 1.0
    if shape == "square":
        return (np.abs(u) <= 0.85) & (np.abs(v) <= 0.85)
    if shape == "triangle":
        return (v <= 0.8) & (v >= 2.0 * np.abs(u) - 1.0)
    if shape == "ring":
        r2 = u ** 2 + v ** 2
        return (r2 <= 1.0) & (r2 >= 0.35)
    if shape == "cross":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1.0))
    raise ValueError(shape)


def _texture(texture: str, x: np.ndarray, y: np.ndarray, period: float, phase: float) -> np.ndarray:
    if texture == "solid":
        return np.ones_like(x)
    if texture == "hstripes":
        return (np.sin(2 * np.pi * (y + phase) / period) > 0).astype(np.float64)
    if texture == "vstripes":
        return (np.sin(2 * np.pi * (x + phase) / period) > 0).astype(np.float64)
    if texture == "checker":
        a = np.sin(2 * np.pi * (x + phase) / period) > 0
        b = np.sin(2 * np.pi * (y + phase) / period) > 0
        return (a ^ b).astype(np.float64)
    raise ValueError(texture)


def render_synthetic(label: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One RGB uint8 image of class ``label`` (shape = label // 4, texture = label % 4)."""
    shape = SHAPES[label // len(TEXTURES)]
    texture = TEXTURES[label % len(TEXTURES)]
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    # foreground hue leans towards a per-class hue, as colour does in natural
    # images; neighbouring classes overlap, so colour alone is not enough
    hue = (label * _GOLDEN + rng.normal(0.0, 0.06)) % 1.0
    fg = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.5, 1.0), rng.uniform(0.55, 1.0)))
    bg = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.35), rng.uniform(0.1, 0.9)))
    while np.abs(fg - bg).sum() < 0.6:
        bg = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.35), rng.uniform(0.1, 0.9)))
    # smooth background clutter
    coarse = rng.normal(0.0, 0.12, (4, 4, 3))
    clutter = np.kron(coarse, np.ones((size // 4 + 1, size // 4 + 1, 1)))[:size, :size]
    img = bg[None, None, :] + clutter

    half = rng.uniform(0.28, 0.42) * size
    cx, cy = rng.uniform(half * 0.8, size - half * 0.8, 2)
    angle = rng.uniform(-0.35, 0.35)
    du, dv = (x - cx) / half, (y - cy) / half
    u = np.cos(angle) * du + np.sin(angle) * dv
    v = -np.sin(angle) * du + np.cos(angle) * dv
    mask = _shape_mask(shape, u, v)

    period = rng.uniform(0.16, 0.24) * size
    tex = _texture(texture, x, y, period, rng.uniform(0, period))
    fill = tex[..., None] * fg[None, None, :] + (1 - tex[..., None]) * (0.5 * fg + 0.5 * bg)[None, None, :]
    img = np.where(mask[..., None], fill, img)
    img = img + rng.normal(0.0, 0.03, img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def synthetic_shapes(num_classes: int, per_class: int, seed: int, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    if not 2 <= num_classes <= MAX_SYNTHETIC_CLASSES:
        raise ValueError(f"synthetic-shapes supports 2..{MAX_SYNTHETIC_CLASSES} classes")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    rng.shuffle(labels)
    images = np.stack([render_synthetic(int(c), rng, size) for c in labels])
    return images, labels.astype(np.int64)


# ----------------------------------------------------------------------
# standard archives
# ----------------------------------------------------------------------
def _resolve_root(data_root: str | None) -> Path:
    root = data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise FileNotFoundError(f"no data root: set data_root in the config or ${DATA_ROOT_ENV}")
    return Path(root)


def _load_cifar(root: Path, name: str, split: str) -> tuple[np.ndarray, np.ndarray, int]:
    if name == "cifar10":
        base = root / "cifar-10-batches-py"
        files = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
        key, ncls = b"labels", 10
    else:
        base = root / "cifar-100-python"
        files = ["train"] if split == "train" else ["test"]
        key, ncls = b"fine_labels", 100
    xs, ys = [], []
    for fname in files:
        with open(base / fname, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        xs.append(np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        ys.append(np.asarray(batch[key], dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys), ncls


def _load_stl10(root: Path, split: str) -> tuple[np.ndarray, np.ndarray, int]:
    base = root / "stl10_binary"
    prefix = "train" if split == "train" else "test"
    raw = np.fromfile(base / f"{prefix}_X.bin", dtype=np.uint8)
    # stored column-major per channel
    images = raw.reshape(-1, 3, 96, 96).transpose(0, 3, 2, 1)
    labels = np.fromfile(base / f"{prefix}_y.bin", dtype=np.uint8).astype(np.int64) - 1
    return np.ascontiguousarray(images), labels, 10


def _load_folder(root: Path, split: str) -> tuple[list[np.ndarray], np.ndarray, int]:
    from PIL import Image

    index = root / f"{split}.txt"
    if not index.exists():
        raise FileNotFoundError(f"missing label index {index}")
    paths, raw_labels = [], []
    for line in index.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        path, label = line.rsplit(maxsplit=1)
        paths.append(path)
        raw_labels.append(label)
    classes_file = root / "classes.txt"
    if classes_file.exists():
        classes = [c.strip() for c in classes_file.read_text().splitlines() if c.strip()]
    else:
        classes = sorted(set(raw_labels), key=lambda c: (not c.isdigit(), int(c) if c.isdigit() else 0, c))
    lookup = {c: i for i, c in enumerate(classes)}
    images = [np.asarray(Image.open(root / p).convert("RGB"), dtype=np.uint8) for p in paths]
    labels = np.asarray([lookup[c] for c in raw_labels], dtype=np.int64)
    return images, labels, len(classes)


def load_dataset(cfg, split: str = "train") -> LabeledImages:
    """Load ``split`` ("train" or "val") of the dataset named in the config."""
    if split not in ("train", "val"):
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    size = cfg.image_size or _DEFAULT_SIZE[cfg.dataset]
    if cfg.dataset == "synthetic-shapes":
        per_class = cfg.synthetic_train_per_class if split == "train" else cfg.synthetic_val_per_class
        # train and val are rendered from disjoint streams
        images, labels = synthetic_shapes(cfg.synthetic_classes, per_class, seed=10_007 + (split == "val"),
                                          size=max(size, 32))
        ncls = cfg.synthetic_classes
        stats = None
    elif cfg.dataset in ("cifar10", "cifar100"):
        images, labels, ncls = _load_cifar(_resolve_root(cfg.data_root), cfg.dataset, split)
        stats = _KNOWN_STATS[cfg.dataset]
    elif cfg.dataset == "stl10":
        images, labels, ncls = _load_stl10(_resolve_root(cfg.data_root), split)
        stats = _KNOWN_STATS["stl10"]
    elif cfg.dataset == "folder":
        images, labels, ncls = _load_folder(_resolve_root(cfg.data_root), split)
        stats = None
    else:
        raise ValueError(f"unknown dataset {cfg.dataset!r}")
    if len(labels) == 0:
        raise ValueError(f"dataset {cfg.dataset!r} split {split!r} is empty")
    if stats is None:
        # statistics always come from the training split
        stats = channel_stats(images if split == "train" else load_dataset(cfg, "train").images)
    return LabeledImages(images, labels, ncls, stats[0], stats[1], size)


class PairDataset(Dataset):
    """(contrastive view, weak view, label, index) with per-sample seeded streams."""

    def __init__(self, data: LabeledImages, strong: augment.ViewSpec, weak: augment.ViewSpec, seed: int):
        self.data = data
        self.strong = strong
        self.weak = weak
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.data)

    def __getitem__(self, index: int):
        student_gen, teacher_gen = augment.view_generators(self.seed, self.epoch, index)
        pair = augment.make_pair(self.data.images[index], student_gen, teacher_gen, self.strong, self.weak)
        return pair.x1, pair.x2, int(self.data.labels[index]), index


class EvalDataset(Dataset):
    def __init__(self, data: LabeledImages):
        self.data = data

    def __len__(self) -> int:
        return len(self.data)

    def __getitem__(self, index: int):
        x = augment.eval_view(self.data.images[index], self.data.image_size, self.data.mean, self.data.std)
        return x, int(self.data.labels[index]), index


class AugmentedLabeledDataset(Dataset):
    """Weak-augmented labeled views, for fine-tuning."""

    def __init__(self, data: LabeledImages, spec: augment.ViewSpec, seed: int):
        self.data = data
        self.spec = spec
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.data)

    def __getitem__(self, index: int):
        gen, _ = augment.view_generators(self.seed, self.epoch, index)
        x = augment.augment(self.data.images[index], self.spec, gen)
        return x, int(self.data.labels[index]), index


def collate(batch):
    """Stack tensors, turn ints into long tensors."""
    cols = list(zip(*batch))
    out = []
    for col in cols:
        if isinstance(col[0], torch.Tensor):
            out.append(torch.stack(col))
        else:
            out.append(torch.as_tensor(col, dtype=torch.long))
    return out
