"""Fully-convolutional classifier: build, fine-tune, predict.

The network is a residual backbone with pooling and fully-connected layers
removed, topped by a 1x1 convolution that emits one spatial map per class.
A class score is the logistic of the spatial mean of its map, which makes
the map itself the class activation map. Training uses per-class binary
cross-entropy with two learning-rate groups (backbone lower than head) and
keeps the best-validation checkpoint.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn

from .backbones import (
    FREEZE_LEVELS,
    apply_freeze,
    create_backbone,
    load_backbone_weights,
)
from .classes import CLASS_CODES, N_CLASSES, by_index
from .dataset import EpochPlan
from .evaluation import average_precision
from .ingest import ChannelStats
from .preprocessing import augment, preprocess

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "iconoforge-model-v1"

DEFAULT_STATS = ChannelStats(mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25),
                             n_images=1)


@dataclass
class ModelConfig:
    backbone: str = "resnet50"
    weights_source: str | None = "torchvision"
    freeze_level: str = "stem+block2"
    input_size: int = 224
    channel_stats: ChannelStats = field(default_factory=lambda: DEFAULT_STATS)
    head_lr: float = 1e-3
    backbone_lr: float = 1e-4
    momentum: float = 0.9
    hflip_prob: float = 0.5
    n_classes: int = N_CLASSES
    batch_size: int = 16
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.backbone_lr > self.head_lr:
            raise ValueError("backbone_lr must not exceed head_lr")
        if self.input_size < 64:
            raise ValueError("input_size must be at least 64")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0,1]")
        if self.freeze_level not in FREEZE_LEVELS:
            raise ValueError(f"unknown freeze level {self.freeze_level!r}")

    def to_dict(self) -> dict[str, Any]:
        d = self.__dict__.copy()
        d["channel_stats"] = self.channel_stats.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        data["channel_stats"] = ChannelStats.from_dict(data["channel_stats"])
        return cls(**data)


class FullyConvClassifier(nn.Module):
    """Backbone feature maps -> per-class spatial maps via 1x1 convolution.
    No fully-connected layer anywhere."""

    def __init__(self, backbone: nn.Module, n_classes: int):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Conv2d(backbone.feature_channels, n_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


@dataclass
class Prediction:
    record_id: str | None
    class_maps: np.ndarray  # (n_classes, h, w) pre-sigmoid maps
    scores: np.ndarray  # (n_classes,) in [0,1]
    predicted: str | None
    threshold: float
    input_size: int


@dataclass
class TrainedModel:
    config: ModelConfig
    module: FullyConvClassifier
    class_index_map: dict[str, int]
    training_log: list[dict[str, Any]] = field(default_factory=list)

    @property
    def is_trained(self) -> bool:
        return len(self.training_log) > 0

    @property
    def checkpoint_id(self) -> str:
        buffer = io.BytesIO()
        torch.save(self.module.state_dict(), buffer)
        return hashlib.sha256(buffer.getvalue()).hexdigest()[:12]

    def frozen_modules(self) -> list[nn.Module]:
        return apply_freeze(self.module.backbone, self.config.freeze_level)


def _init_head(head: nn.Conv2d, seed: int) -> None:
    # Zero-mean init with scale tied to fan-in; bias starts at zero so the
    # initial scores sit at 0.5.
    fan_in = head.in_channels
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        head.weight.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=generator)
        head.bias.zero_()


def build_model(config: ModelConfig) -> TrainedModel:
    """Assemble the fully-convolutional classifier around a pretrained
    backbone. Raises MissingWeightsError if no pretrained weights can be
    loaded — this toolkit never trains a backbone from scratch."""
    backbone = create_backbone(config.backbone)
    load_backbone_weights(backbone, config.backbone, config.weights_source)
    module = FullyConvClassifier(backbone, config.n_classes)
    _init_head(module.head, config.seed)
    apply_freeze(backbone, config.freeze_level)
    class_index_map = {code: i for i, code in enumerate(CLASS_CODES)}
    return TrainedModel(config=config, module=module,
                        class_index_map=class_index_map)


def _forward_scores(module: FullyConvClassifier, batch: torch.Tensor,
                    ) -> tuple[torch.Tensor, torch.Tensor]:
    maps = module(batch)
    logits = maps.mean(dim=(2, 3))
    return maps, logits


def predict(model: TrainedModel, image: np.ndarray,
            threshold: float | None = None,
            record_id: str | None = None) -> Prediction:
    """Run one image through the classifier.

    scores[c] is exactly the logistic of the spatial mean of class map c;
    the argmax class is reported only when its score clears the threshold,
    otherwise the prediction is None.
    """
    threshold = model.config.threshold if threshold is None else threshold
    tensor = preprocess(image, model.config.channel_stats,
                        model.config.input_size)
    model.module.eval()
    with torch.no_grad():
        maps, logits = _forward_scores(model.module, tensor.unsqueeze(0))
        scores = torch.sigmoid(logits)[0]
    scores_np = scores.numpy().astype(np.float64)
    best = int(np.argmax(scores_np))
    predicted = by_index(best).code if scores_np[best] >= threshold else None
    return Prediction(record_id=record_id,
                      class_maps=maps[0].numpy().astype(np.float32),
                      scores=scores_np, predicted=predicted,
                      threshold=threshold,
                      input_size=model.config.input_size)


def predict_scores_batch(model: TrainedModel, images: list[np.ndarray],
                         batch_size: int = 32) -> np.ndarray:
    """Scores only, batched — the workhorse for evaluation sweeps."""
    model.module.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = torch.stack([
                preprocess(img, model.config.channel_stats,
                           model.config.input_size)
                for img in images[start:start + batch_size]])
            _, logits = _forward_scores(model.module, batch)
            chunks.append(torch.sigmoid(logits).numpy().astype(np.float64))
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, N_CLASSES))


def _validation_metrics(model: TrainedModel,
                        val_examples: Mapping[str, tuple[np.ndarray, int]],
                        ) -> dict[str, float]:
    ids = sorted(val_examples)
    images = [val_examples[rid][0] for rid in ids]
    labels = np.asarray([val_examples[rid][1] for rid in ids])
    scores = predict_scores_batch(model, images)
    aps = []
    for c in range(model.config.n_classes):
        truths = (labels == c).astype(int)
        if truths.sum() == 0:
            continue
        aps.append(average_precision(scores[:, c].tolist(), truths.tolist()))
    accuracy = float((scores.argmax(axis=1) == labels).mean()) if ids else 0.0
    return {"val_mean_ap": float(np.mean(aps)) if aps else 0.0,
            "val_accuracy": accuracy}


def train(model: TrainedModel,
          epoch_plans: list[EpochPlan],
          train_examples: Mapping[str, tuple[np.ndarray, int]],
          val_examples: Mapping[str, tuple[np.ndarray, int]] | None = None,
          ) -> TrainedModel:
    """Fine-tune on oversampled epoch plans (one plan per epoch).

    Per-class binary cross-entropy on the sigmoid scores; backbone and head
    get separate learning rates. Validation mean AP is logged per epoch and
    the best-validation weights are restored at the end. A non-finite loss
    aborts training and the last good weights win. Zero plans return the
    model unchanged.
    """
    if not epoch_plans:
        return model
    config = model.config
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    cache: dict[str, torch.Tensor] = {
        rid: preprocess(img, config.channel_stats, config.input_size)
        for rid, (img, _) in train_examples.items()}
    label_of = {rid: label for rid, (_, label) in train_examples.items()}

    frozen = model.frozen_modules()
    head_params = list(model.module.head.parameters())
    backbone_params = [p for p in model.module.backbone.parameters()
                       if p.requires_grad]
    groups = [{"params": head_params, "lr": config.head_lr}]
    if backbone_params:
        groups.append({"params": backbone_params, "lr": config.backbone_lr})
    optimizer = torch.optim.SGD(groups, momentum=config.momentum)
    loss_fn = nn.BCEWithLogitsLoss()

    best_state: dict[str, torch.Tensor] | None = None
    best_ap = -1.0
    last_good = copy.deepcopy(model.module.state_dict())

    for epoch, plan in enumerate(epoch_plans):
        model.module.train()
        for module in frozen:
            module.eval()
        order = list(plan.epoch_order)
        total_loss, n_batches = 0.0, 0
        aborted = False
        for start in range(0, len(order), config.batch_size):
            rids = order[start:start + config.batch_size]
            batch = torch.stack([
                augment(cache[rid], config.hflip_prob, rng) for rid in rids])
            targets = torch.zeros(len(rids), config.n_classes)
            for row, rid in enumerate(rids):
                targets[row, label_of[rid]] = 1.0
            optimizer.zero_grad()
            _, logits = _forward_scores(model.module, batch)
            loss = loss_fn(logits, targets)
            if not torch.isfinite(loss):
                log.error("training diverged at epoch %d; restoring last "
                          "good checkpoint", epoch)
                model.module.load_state_dict(last_good)
                aborted = True
                break
            loss.backward()
            optimizer.step()
            total_loss += float(loss.detach())
            n_batches += 1
        if aborted:
            model.training_log.append({"epoch": epoch, "aborted": True})
            break
        entry: dict[str, Any] = {
            "epoch": epoch,
            "train_loss": total_loss / max(n_batches, 1),
        }
        if val_examples:
            entry.update(_validation_metrics(model, val_examples))
            if entry["val_mean_ap"] >= best_ap:
                best_ap = entry["val_mean_ap"]
                best_state = copy.deepcopy(model.module.state_dict())
        model.training_log.append(entry)
        last_good = copy.deepcopy(model.module.state_dict())
        log.info("epoch %d: loss %.4f%s", epoch, entry["train_loss"],
                 f", val mAP {entry['val_mean_ap']:.4f}" if val_examples else "")

    if best_state is not None:
        model.module.load_state_dict(best_state)
    return model


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: TrainedModel, path: str | Path) -> str:
    """Write the single-archive checkpoint; returns the checkpoint id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    weights = io.BytesIO()
    torch.save(model.module.state_dict(), weights)
    checkpoint_id = hashlib.sha256(weights.getvalue()).hexdigest()[:12]
    manifest = {"format": CHECKPOINT_FORMAT, "checkpoint_id": checkpoint_id}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True))
        zf.writestr("config.json", json.dumps(model.config.to_dict(),
                                              sort_keys=True))
        zf.writestr("class_index_map.json",
                    json.dumps(model.class_index_map, sort_keys=True))
        zf.writestr("training_log.json", json.dumps(model.training_log))
        zf.writestr("weights.pt", weights.getvalue())
    return checkpoint_id


def load_checkpoint(path: str | Path) -> TrainedModel:
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(
                f"{path} is not a {CHECKPOINT_FORMAT} checkpoint "
                f"(format tag: {manifest.get('format')!r})")
        config = ModelConfig.from_dict(json.loads(zf.read("config.json")))
        class_index_map = json.loads(zf.read("class_index_map.json"))
        training_log = json.loads(zf.read("training_log.json"))
        weights = torch.load(io.BytesIO(zf.read("weights.pt")),
                             map_location="cpu", weights_only=True)
    backbone = create_backbone(config.backbone)
    module = FullyConvClassifier(backbone, config.n_classes)
    module.load_state_dict(weights)
    apply_freeze(backbone, config.freeze_level)
    return TrainedModel(config=config, module=module,
                        class_index_map=class_index_map,
                        training_log=training_log)
