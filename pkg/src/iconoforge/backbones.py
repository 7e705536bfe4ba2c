"""Residual backbones: torchvision ResNets plus a reduced-depth variant.

Every backbone exposes the same structure — ``stem`` followed by
``block1``..``block4`` — so the freeze levels map uniformly: "stem+block2"
freezes the stem and the first two residual blocks, the default
fine-tuning configuration.

The reduced-depth ``tiny`` backbone exists for CPU-scale experiments and
the test suite; its pretraining corpus is procedurally generated texture
patterns, standing in for the large natural-image corpus used to pretrain
the full-size ResNets.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

FREEZE_LEVELS = ("none", "stem", "stem+block1", "stem+block2", "stem+block3",
                 "all_backbone")

BACKBONE_NAMES = ("resnet50", "resnet18", "tiny")


class MissingWeightsError(RuntimeError):
    """No pretrained weights available; training from scratch is not
    supported by design."""


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1,
                               bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class TinyResNet(nn.Module):
    """Stride-16 residual net: stem /2 then four basic blocks at /1,/2,/2,/2."""

    feature_channels = 128
    stride = 16

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True))
        self.block1 = BasicBlock(16, 16, stride=1)
        self.block2 = BasicBlock(16, 32, stride=2)
        self.block3 = BasicBlock(32, 64, stride=2)
        self.block4 = BasicBlock(64, 128, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.block1(x)
        x = self.block2(x)
        x = self.block3(x)
        return self.block4(x)


class TorchvisionResNetBackbone(nn.Module):
    """A torchvision ResNet with pooling/fc removed, regrouped into
    stem + block1..block4."""

    def __init__(self, name: str):
        super().__init__()
        import torchvision.models as tvm

        if name == "resnet50":
            net = tvm.resnet50(weights=None)
            self.feature_channels = 2048
        elif name == "resnet18":
            net = tvm.resnet18(weights=None)
            self.feature_channels = 512
        else:
            raise ValueError(f"unsupported torchvision backbone {name!r}")
        self.stride = 32
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.block1 = net.layer1
        self.block2 = net.layer2
        self.block3 = net.layer3
        self.block4 = net.layer4

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.block1(x)
        x = self.block2(x)
        x = self.block3(x)
        return self.block4(x)

    def load_torchvision_weights(self, name: str) -> None:
        import torchvision.models as tvm

        try:
            if name == "resnet50":
                full = tvm.resnet50(weights=tvm.ResNet50_Weights.IMAGENET1K_V2)
            else:
                full = tvm.resnet18(weights=tvm.ResNet18_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise MissingWeightsError(
                f"could not obtain torchvision weights for {name}: {exc}") from exc
        self.stem.load_state_dict(nn.Sequential(
            full.conv1, full.bn1, full.relu, full.maxpool).state_dict())
        self.block1.load_state_dict(full.layer1.state_dict())
        self.block2.load_state_dict(full.layer2.state_dict())
        self.block3.load_state_dict(full.layer3.state_dict())
        self.block4.load_state_dict(full.layer4.state_dict())


def create_backbone(name: str) -> nn.Module:
    if name == "tiny":
        return TinyResNet()
    if name in ("resnet50", "resnet18"):
        return TorchvisionResNetBackbone(name)
    raise ValueError(f"unknown backbone {name!r}; choose from {BACKBONE_NAMES}")


def load_backbone_weights(backbone: nn.Module, name: str,
                          weights_source: str | None) -> None:
    """Load pretrained weights into a freshly built backbone.

    ``weights_source`` is a state-dict file path, or "torchvision" for the
    published ImageNet weights of the full-size ResNets. Absent or
    unreadable weights are a hard error.
    """
    if not weights_source:
        raise MissingWeightsError(
            f"backbone {name!r} needs pretrained weights; training from "
            f"scratch is not supported")
    if weights_source == "torchvision":
        if not isinstance(backbone, TorchvisionResNetBackbone):
            raise MissingWeightsError(
                f"'torchvision' weights only apply to resnet backbones, not {name!r}")
        backbone.load_torchvision_weights(name)
        return
    path = Path(weights_source)
    if not path.exists():
        raise MissingWeightsError(f"pretrained weights not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    backbone.load_state_dict(state)


def frozen_group_names(freeze_level: str) -> list[str]:
    if freeze_level not in FREEZE_LEVELS:
        raise ValueError(
            f"unknown freeze level {freeze_level!r}; choose from {FREEZE_LEVELS}")
    if freeze_level == "none":
        return []
    if freeze_level == "all_backbone":
        return ["stem", "block1", "block2", "block3", "block4"]
    groups = ["stem"]
    if freeze_level != "stem":
        n = int(freeze_level.removeprefix("stem+block"))
        groups.extend(f"block{i}" for i in range(1, n + 1))
    return groups


def apply_freeze(backbone: nn.Module, freeze_level: str) -> list[nn.Module]:
    """Disable gradients on the frozen prefix and return the frozen modules
    (their normalization layers must be kept in eval mode while training)."""
    frozen = []
    for group in frozen_group_names(freeze_level):
        module = getattr(backbone, group)
        for param in module.parameters():
            param.requires_grad_(False)
        frozen.append(module)
    return frozen


# ---------------------------------------------------------------------------
# tiny-backbone pretraining


_N_PRETEXT_CLASSES = 6


def _pretext_image(rng: np.random.Generator, label: int, size: int = 64) -> np.ndarray:
    """One texture-pattern image: stripes, checkers, blobs or rings."""
    base = rng.uniform(0.1, 0.9, size=3)
    other = rng.uniform(0.1, 0.9, size=3)
    period = int(rng.integers(6, 16))
    yy, xx = np.mgrid[0:size, 0:size]
    if label == 0:
        mask = (yy // (period // 2)) % 2 == 0
    elif label == 1:
        mask = (xx // (period // 2)) % 2 == 0
    elif label == 2:
        mask = ((xx + yy) // (period // 2)) % 2 == 0
    elif label == 3:
        mask = ((xx // period) + (yy // period)) % 2 == 0
    elif label == 4:
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(4, 9))):
            cx, cy = rng.integers(0, size, size=2)
            r = int(rng.integers(4, 10))
            mask |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    else:
        cx, cy = rng.integers(size // 4, 3 * size // 4, size=2)
        rad = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        mask = (rad // (period // 2)) % 2 == 0
    img = np.where(mask[:, :, None], base[None, None, :], other[None, None, :])
    img += rng.normal(0, 0.03, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def pretrain_tiny_backbone(out_path: str | Path, seed: int = 0,
                           n_images: int = 600, epochs: int = 3) -> Path:
    """Pretrain the reduced-depth backbone on procedural texture patterns
    and save its state dict. Deterministic given the seed; the resulting
    file is what build_model() consumes as the tiny backbone's pretrained
    weights."""
    out_path = Path(out_path)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)

    labels = np.asarray([i % _N_PRETEXT_CLASSES for i in range(n_images)])
    images = np.stack([_pretext_image(rng, int(lbl)) for lbl in labels])
    x = torch.from_numpy(images).permute(0, 3, 1, 2)
    y = torch.from_numpy(labels).long()

    backbone = TinyResNet()
    head = nn.Linear(backbone.feature_channels, _N_PRETEXT_CLASSES)
    params = list(backbone.parameters()) + list(head.parameters())
    optimizer = torch.optim.Adam(params, lr=1e-3)
    loss_fn = nn.CrossEntropyLoss()

    backbone.train()
    batch = 32
    for epoch in range(epochs):
        order = torch.randperm(n_images)
        total = 0.0
        for start in range(0, n_images, batch):
            idx = order[start:start + batch]
            optimizer.zero_grad()
            feats = backbone(x[idx]).mean(dim=(2, 3))
            loss = loss_fn(head(feats), y[idx])
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
        log.info("tiny pretraining epoch %d: loss %.4f", epoch, total)

    out_path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(backbone.state_dict(), out_path)
    return out_path
