"""Transfer learning for four-class density classification."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from age_kit import CLASSES
from age_kit.erase import AugmentationPolicy, apply_policy
from age_kit.errors import ConfigError, DataError
from age_kit.evalstat import confusion_matrix, macro_f1
from age_kit.seeding import sample_rng
from age_kit.vit import VisionTransformer, save_backbone, to_tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 5e-6
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    patience: int = 10
    monitor: str = "val_macro_f1"
    loss: str = "softmax"   # or "ovr_sigmoid"
    seed: int = 0
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    class_weights: dict | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.loss not in ("softmax", "ovr_sigmoid"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.monitor != "val_macro_f1":
            raise ConfigError("only val_macro_f1 can be monitored")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights.values()):
            raise ConfigError("class weights must be positive")


class ClassifierModel(nn.Module):
    def __init__(self, backbone: VisionTransformer, num_classes=len(CLASSES)):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(backbone.config.embed_dim, num_classes)
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, images):
        return self.head(self.backbone(images))


def compute_class_weights(counts):
    """Inverse-frequency weights N / (K * n_c), so sum(w_c * n_c) = N."""
    zero = [c for c, n in counts.items() if n <= 0]
    if zero:
        raise DataError(f"classes {zero} have no training samples; merge or oversample them")
    total = sum(counts.values())
    k = len(counts)
    return {c: total / (k * n) for c, n in counts.items()}


def weighted_ce_loss(logits, labels, weights=None, kind="softmax"):
    """Mean over the batch of w[y_i] * loss_i.

    ``kind="softmax"`` is categorical cross-entropy; ``"ovr_sigmoid"``
    sums one-vs-rest binary cross-entropies per sample.
    """
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    if kind == "softmax":
        per = -F.log_softmax(logits, dim=-1).gather(1, labels[:, None])[:, 0]
    elif kind == "ovr_sigmoid":
        target = F.one_hot(labels, logits.shape[-1]).to(logits.dtype)
        per = F.binary_cross_entropy_with_logits(logits, target, reduction="none").sum(dim=-1)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    if weights is not None:
        per = weights[labels] * per
    return per.mean()


@torch.no_grad()
def predict(model: ClassifierModel, images, batch_size=64):
    """Argmax labels and softmax probabilities; no augmentation."""
    model.eval()
    images = np.asarray(images, dtype=np.float32)
    probs = []
    for i in range(0, len(images), batch_size):
        probs.append(F.softmax(model(to_tensor(images[i:i + batch_size])).double(), dim=-1).numpy())
    probs = np.concatenate(probs) if probs else np.zeros((0, len(CLASSES)))
    return probs.argmax(axis=1), probs


def evaluate(model, samples):
    labels = np.array([s.label_index for s in samples])
    pred, _ = predict(model, np.stack([s.pixels for s in samples]))
    cm = confusion_matrix(labels, pred)
    return cm, macro_f1(cm)[1]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_macro_f1: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    initial_val_macro_f1: float = float("nan")
    best_epoch: int = 0
    best_val_macro_f1: float = float("nan")
    stopped_early: bool = False

    def write_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_macro_f1"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.train_loss:.10f}", f"{r.val_macro_f1:.10f}"])


def _batch(samples, idx, masks, policy, seed, epoch):
    imgs = []
    for i in idx:
        s = samples[i]
        img, _ = apply_policy(s.pixels, None if masks is None else masks[s.id], policy,
                              sample_rng(seed, epoch, s.id))
        imgs.append(img)
    return to_tensor(np.stack(imgs)), torch.as_tensor([samples[i].label_index for i in idx])


def train_classifier(train, val, backbone: VisionTransformer, config: TrainConfig, masks=None):
    """Fine-tune ``backbone`` plus a linear head; keeps the best validation
    checkpoint.

    The starting model's validation score is the baseline an epoch has to
    beat; after ``patience`` consecutive epochs without a strict
    improvement training stops.
    """
    if config.policy.mode == "AGE":
        if masks is None:
            raise DataError("AGE training needs a mask cache")
        missing = sorted(s.id for s in train if s.id not in masks)
        if missing:
            raise DataError(f"no masks for {len(missing)} training samples: {', '.join(missing[:10])}")
    torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    model = ClassifierModel(copy.deepcopy(backbone))
    if config.class_weights is None:
        counts = {c: 0 for c in CLASSES}
        for s in train:
            counts[s.label] += 1
        weights = compute_class_weights(counts)
    else:
        weights = config.class_weights
    w = torch.tensor([weights[c] for c in CLASSES], dtype=torch.float32)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay, betas=tuple(config.betas))
    log = TrainLog()
    _, best = evaluate(model, val)
    log.initial_val_macro_f1 = log.best_val_macro_f1 = best
    best_state = copy.deepcopy(model.state_dict())
    wait = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = sample_rng(config.seed, "order", epoch).permutation(len(train))
        total, seen = 0.0, 0
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            x, y = _batch(train, idx, masks, config.policy, config.seed, epoch)
            loss = weighted_ce_loss(model(x), y, w, config.loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        _, score = evaluate(model, val)
        log.records.append(EpochRecord(epoch, total / seen, score))
        if score > best:
            best, wait = score, 0
            best_state = copy.deepcopy(model.state_dict())
            log.best_epoch, log.best_val_macro_f1 = epoch, score
        else:
            wait += 1
            if wait >= config.patience:
                log.stopped_early = epoch < config.epochs
                break
    model.load_state_dict(best_state)
    model.eval()
    return model, log


def save_classifier(path, model: ClassifierModel, metadata=None):
    head = {f"head.{k}": v for k, v in model.head.state_dict().items()}
    save_backbone(path, model.backbone, extra_tensors=head, extra_metadata=metadata)
