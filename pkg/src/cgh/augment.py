"""Weak (teacher) and contrastive (student) views.

Randomness is drawn only from the ``torch.Generator`` passed in, so a view is a
pure function of ``(image, generator state)``.  Every draw is made whether or
not the transform fires, which keeps the stream layout independent of the
configured probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF

MIN_IMAGE_SIDE = 8


@dataclass(frozen=True)
class ViewSpec:
    size: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    scale: tuple[float, float] = (0.2, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter_prob: float = 0.0
    jitter_strength: float = 0.4
    jitter_hue: float = 0.1
    grayscale_prob: float = 0.0
    blur_prob: float = 0.0
    blur_sigma: tuple[float, float] = (0.1, 2.0)


@dataclass(frozen=True)
class ViewParams:
    crop: tuple[int, int, int, int]  # top, left, height, width
    flip: bool
    jitter: tuple[tuple[int, ...], float, float, float, float] | None  # order, b, c, s, h
    grayscale: bool
    blur_sigma: float | None


@dataclass
class AugmentedPair:
    x1: torch.Tensor  # contrastive view, student input
    x2: torch.Tensor  # weak view, teacher input


def weak_spec(cfg, size: int, mean, std) -> ViewSpec:
    """Random resized crop + horizontal flip."""
    return ViewSpec(size=size, mean=tuple(mean), std=tuple(std), scale=tuple(cfg.weak_crop_scale),
                    flip_prob=cfg.flip_prob)


def contrastive_spec(cfg, size: int, mean, std) -> ViewSpec:
    blur = cfg.blur_prob
    if blur is None:
        blur = 0.5 if size > 96 else 0.0
    return ViewSpec(
        size=size,
        mean=tuple(mean),
        std=tuple(std),
        scale=tuple(cfg.crop_scale),
        flip_prob=cfg.flip_prob,
        jitter_prob=cfg.jitter_prob,
        jitter_strength=cfg.jitter_strength,
        jitter_hue=cfg.jitter_hue,
        grayscale_prob=cfg.grayscale_prob,
        blur_prob=blur,
    )


def view_generators(seed: int, epoch: int, index: int) -> tuple[torch.Generator, torch.Generator]:
    """Independent (student, teacher) streams for one sample of one epoch."""
    gens = []
    for stream in (0, 1):
        state = np.random.SeedSequence([seed, epoch, index, stream]).generate_state(1, dtype=np.uint64)[0]
        gens.append(torch.Generator().manual_seed(int(state)))
    return gens[0], gens[1]


def _uniform(gen: torch.Generator, lo: float = 0.0, hi: float = 1.0) -> float:
    return lo + (hi - lo) * torch.rand(1, generator=gen, dtype=torch.float64).item()


def to_float_image(image) -> torch.Tensor:
    """uint8 or float image (CHW or HWC numpy) -> float32 CHW in [0, 1], 3 channels."""
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
        if image.ndim == 3 and image.shape[-1] in (1, 3) and image.shape[0] not in (1, 3):
            image = image.permute(2, 0, 1)
    if image.ndim == 2:
        image = image.unsqueeze(0)
    if image.ndim != 3:
        raise ValueError(f"expected a CHW image, got shape {tuple(image.shape)}")
    if image.dtype == torch.uint8:
        image = image.float() / 255.0
    else:
        image = image.float()
    if image.shape[0] == 1:
        image = image.expand(3, -1, -1)
    if image.shape[-1] < MIN_IMAGE_SIDE or image.shape[-2] < MIN_IMAGE_SIDE:
        raise ValueError(
            f"image {tuple(image.shape[-2:])} is smaller than the minimum {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
        )
    return image


def sample_crop(height: int, width: int, scale: Sequence[float], ratio: Sequence[float],
                gen: torch.Generator) -> tuple[int, int, int, int]:
    # same acceptance scheme as torchvision's RandomResizedCrop, on our own stream
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * _uniform(gen, scale[0], scale[1])
        aspect = math.exp(_uniform(gen, *log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(torch.randint(0, height - h + 1, (1,), generator=gen).item())
            left = int(torch.randint(0, width - w + 1, (1,), generator=gen).item())
            return top, left, h, w
    in_ratio = width / height
    if in_ratio < min(ratio):
        w = width
        h = int(round(w / min(ratio)))
    elif in_ratio > max(ratio):
        h = height
        w = int(round(h * max(ratio)))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def sample_params(spec: ViewSpec, height: int, width: int, gen: torch.Generator) -> ViewParams:
    crop = sample_crop(height, width, spec.scale, spec.ratio, gen)
    flip = _uniform(gen) < spec.flip_prob

    jitter_draw = _uniform(gen)
    order = tuple(torch.randperm(4, generator=gen).tolist())
    s = spec.jitter_strength
    factors = [_uniform(gen, max(0.0, 1 - s), 1 + s) for _ in range(3)]
    hue = _uniform(gen, -spec.jitter_hue, spec.jitter_hue)
    jitter = (order, *factors, hue) if jitter_draw < spec.jitter_prob else None

    grayscale = _uniform(gen) < spec.grayscale_prob
    blur_draw = _uniform(gen)
    sigma = _uniform(gen, *spec.blur_sigma)
    return ViewParams(crop=crop, flip=flip, jitter=jitter, grayscale=grayscale,
                      blur_sigma=sigma if blur_draw < spec.blur_prob else None)


def normalize(image: torch.Tensor, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    mean_t = torch.tensor(mean, dtype=image.dtype).view(-1, 1, 1)
    std_t = torch.tensor(std, dtype=image.dtype).view(-1, 1, 1)
    return (image - mean_t) / std_t


def _blur_kernel(size: int) -> int:
    k = max(3, int(0.1 * size))
    return k if k % 2 == 1 else k + 1


def apply_params(image: torch.Tensor, params: ViewParams, spec: ViewSpec) -> torch.Tensor:
    top, left, h, w = params.crop
    out = TF.resized_crop(image, top, left, h, w, [spec.size, spec.size], antialias=True)
    if params.jitter is not None:
        order, b, c, s, hue = params.jitter
        for op in order:
            if op == 0:
                out = TF.adjust_brightness(out, b)
            elif op == 1:
                out = TF.adjust_contrast(out, c)
            elif op == 2:
                out = TF.adjust_saturation(out, s)
            else:
                out = TF.adjust_hue(out, hue)
    if params.grayscale:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    if params.blur_sigma is not None:
        k = _blur_kernel(spec.size)
        out = TF.gaussian_blur(out, [k, k], [params.blur_sigma, params.blur_sigma])
    if params.flip:
        out = TF.hflip(out)
    return normalize(out, spec.mean, spec.std)


def augment(image, spec: ViewSpec, gen: torch.Generator) -> torch.Tensor:
    img = to_float_image(image)
    params = sample_params(spec, img.shape[-2], img.shape[-1], gen)
    return apply_params(img, params, spec)


def augment_weak(image, gen: torch.Generator, spec: ViewSpec) -> torch.Tensor:
    if spec.jitter_prob or spec.grayscale_prob or spec.blur_prob:
        raise ValueError("weak view spec must not enable jitter, grayscale or blur")
    return augment(image, spec, gen)


def augment_contrastive(image, gen: torch.Generator, spec: ViewSpec) -> torch.Tensor:
    return augment(image, spec, gen)


def make_pair(image, student_gen: torch.Generator, teacher_gen: torch.Generator,
              strong: ViewSpec, weak: ViewSpec) -> AugmentedPair:
    img = to_float_image(image)
    x1 = apply_params(img, sample_params(strong, img.shape[-2], img.shape[-1], student_gen), strong)
    x2 = apply_params(img, sample_params(weak, img.shape[-2], img.shape[-1], teacher_gen), weak)
    return AugmentedPair(x1=x1, x2=x2)


def eval_view(image, size: int, mean, std) -> torch.Tensor:
    """Deterministic view for feature extraction: resize shorter side, center crop."""
    img = to_float_image(image)
    if img.shape[-2:] != (size, size):
        img = TF.resize(img, [size], antialias=True)
        img = TF.center_crop(img, [size, size])
    return normalize(img, mean, std)
