"""Residual backbone with four tapped blocks, hypercolumn head and projectors."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

BACKBONE_SPECS = {
    # name: (block widths, blocks per stage, stem)
    "resnet18": ((64, 128, 256, 512), (2, 2, 2, 2), "imagenet"),
    "resnet18-cifar": ((64, 128, 256, 512), (2, 2, 2, 2), "cifar"),
    "resnet-mini": ((16, 32, 64, 128), (1, 1, 1, 1), "cifar"),
}


class BasicBlock(nn.Module):
    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet(nn.Module):
    """ResNet trunk returning the output of each of its four stages."""

    def __init__(self, widths: Sequence[int], blocks: Sequence[int], stem: str = "imagenet"):
        super().__init__()
        if len(widths) != 4 or len(blocks) != 4:
            raise ValueError("backbone needs exactly four stages")
        self.widths = tuple(widths)
        if stem == "imagenet":
            self.stem = nn.Sequential(
                nn.Conv2d(3, widths[0], 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(widths[0]),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
        elif stem == "cifar":
            self.stem = nn.Sequential(
                nn.Conv2d(3, widths[0], 3, stride=1, padding=1, bias=False),
                nn.BatchNorm2d(widths[0]),
                nn.ReLU(inplace=True),
            )
        else:
            raise ValueError(f"unknown stem {stem!r}")
        stages = []
        in_planes = widths[0]
        for i, (planes, n) in enumerate(zip(widths, blocks)):
            stride = 1 if i == 0 else 2
            layers = []
            for j in range(n):
                layers.append(BasicBlock(in_planes, planes, stride if j == 0 else 1))
                in_planes = planes
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        x = self.stem(x)
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps, maps[-1].mean(dim=(2, 3))


def build_backbone(name: str) -> ResNet:
    try:
        widths, blocks, stem = BACKBONE_SPECS[name]
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; choose from {sorted(BACKBONE_SPECS)}") from None
    return ResNet(widths, blocks, stem)


def forward_backbone(backbone: nn.Module, view: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
    """Return the four block maps and the globally pooled feature of block 4."""
    if view.ndim != 4 or view.shape[1] != 3:
        raise ValueError(f"shape mismatch: expected (B, 3, H, W), got {tuple(view.shape)}")
    return backbone(view)


class HypercolumnHead(nn.Module):
    """Align selected block maps to block-4 resolution, concatenate, 1x1 conv + BN + ReLU + GAP."""

    def __init__(self, block_channels: Sequence[int], layers: Sequence[int], out_dim: int,
                 batch_norm: bool = True):
        super().__init__()
        layers = tuple(sorted(layers))
        if not layers:
            raise ValueError("layer-set must be nonempty")
        if any(layer not in (1, 2, 3, 4) for layer in layers):
            raise ValueError("layer-set must be a subset of {1,2,3,4}")
        self.layers = layers
        self.in_channels = sum(block_channels[layer - 1] for layer in layers)
        self.conv = nn.Conv2d(self.in_channels, out_dim, kernel_size=1, bias=not batch_norm)
        self.bn = nn.BatchNorm2d(out_dim) if batch_norm else nn.Identity()

    def stack(self, maps: Sequence[torch.Tensor]) -> torch.Tensor:
        """Channel-concatenated hypercolumn map at the last block's spatial size."""
        target = tuple(maps[-1].shape[-2:])
        aligned = []
        for layer in self.layers:
            fmap = maps[layer - 1]
            h, w = fmap.shape[-2:]
            if h < target[0] or w < target[1]:
                raise ValueError(f"block {layer} map {h}x{w} is smaller than block-4 size {target}")
            if (h, w) != target:
                fmap = F.adaptive_avg_pool2d(fmap, target)
            aligned.append(fmap)
        return torch.cat(aligned, dim=1)

    def forward(self, maps: Sequence[torch.Tensor]) -> torch.Tensor:
        x = F.relu(self.bn(self.conv(self.stack(maps))))
        return x.mean(dim=(2, 3))


def build_hypercolumn(maps: Sequence[torch.Tensor], head: HypercolumnHead) -> torch.Tensor:
    return head(maps)


def l2_normalize(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("zero vector cannot be normalized")
    return z / norms


class MLPHead(nn.Module):
    """linear -> ReLU -> linear, output L2-normalised.  Used as projector and predictor."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"dimension mismatch: head expects {self.in_dim}, got {x.shape[-1]}")
        return l2_normalize(self.fc2(F.relu(self.fc1(x))))


def project(context: torch.Tensor, head: MLPHead) -> torch.Tensor:
    return head(context)


def predictor_forward(embedding: torch.Tensor, head: MLPHead) -> torch.Tensor:
    return head(embedding)


@dataclass
class BranchOutput:
    maps: list[torch.Tensor]
    h_g: torch.Tensor
    h_h: torch.Tensor | None
    z_g: torch.Tensor
    z_h: torch.Tensor | None


class CGHNetwork(nn.Module):
    """Encoder plus global/hypercolumn heads for one role (student or teacher)."""

    def __init__(self, backbone: str, layers: Sequence[int], hyper_dim: int | None, hidden_dim: int,
                 embed_dim: int, use_hypercolumn: bool = True, use_predictor: bool = False):
        super().__init__()
        self.backbone = build_backbone(backbone)
        feat_dim = self.backbone.out_dim
        hyper_dim = hyper_dim or feat_dim
        self.projector = MLPHead(feat_dim, hidden_dim, embed_dim)
        self.hyper_head = None
        self.hyper_projector = None
        if use_hypercolumn:
            self.hyper_head = HypercolumnHead(self.backbone.widths, layers, hyper_dim)
            self.hyper_projector = MLPHead(hyper_dim, hidden_dim, embed_dim)
        self.predictor = None
        self.hyper_predictor = None
        if use_predictor:
            self.predictor = MLPHead(embed_dim, hidden_dim, embed_dim)
            if use_hypercolumn:
                self.hyper_predictor = MLPHead(embed_dim, hidden_dim, embed_dim)

    @property
    def feat_dim(self) -> int:
        return self.backbone.out_dim

    @property
    def hyper_dim(self) -> int | None:
        return None if self.hyper_head is None else self.hyper_head.conv.out_channels

    def contexts(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor, torch.Tensor | None]:
        maps, h_g = forward_backbone(self.backbone, x)
        h_h = build_hypercolumn(maps, self.hyper_head) if self.hyper_head is not None else None
        return maps, h_g, h_h

    def forward(self, x: torch.Tensor) -> BranchOutput:
        maps, h_g, h_h = self.contexts(x)
        z_g = project(h_g, self.projector)
        if self.predictor is not None:
            z_g = predictor_forward(z_g, self.predictor)
        z_h = None
        if h_h is not None:
            z_h = project(h_h, self.hyper_projector)
            if self.hyper_predictor is not None:
                z_h = predictor_forward(z_h, self.hyper_predictor)
        return BranchOutput(maps=maps, h_g=h_g, h_h=h_h, z_g=z_g, z_h=z_h)


def build_networks(cfg) -> tuple[CGHNetwork, CGHNetwork]:
    """Student and its EMA teacher.

    The teacher starts as an exact copy without predictors, never receives
    gradients, and its BN layers use batch statistics without touching their
    running buffers (those follow the student through the EMA update).
    """
    student = CGHNetwork(
        cfg.backbone,
        cfg.layers,
        cfg.hyper_dim,
        cfg.hidden_dim,
        cfg.embed_dim,
        use_hypercolumn=cfg.context_variant != "global",
        use_predictor=cfg.use_predictor,
    )
    teacher = copy.deepcopy(student)
    teacher.predictor = None
    teacher.hyper_predictor = None
    for p in teacher.parameters():
        p.requires_grad_(False)
    for m in teacher.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.momentum = 0.0
    return student, teacher
