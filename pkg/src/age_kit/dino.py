"""Self-distillation pretraining (DINO) for the vision transformer.

The student sees every crop, the teacher only the global crops; the teacher
follows the student by EMA and its outputs are centred and sharpened before
the cross-entropy.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from torch import nn

from age_kit.dataset import resize
from age_kit.errors import ConfigError
from age_kit.seeding import sample_rng
from age_kit.vit import ViTConfig, VisionTransformer, save_backbone, to_tensor


@dataclass(frozen=True)
class DinoConfig:
    global_crop_scale: tuple = (0.4, 1.0)
    local_crop_scale: tuple = (0.05, 0.4)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    num_global_crops: int = 2
    num_local_crops: int = 8
    global_crop_size: int = 224
    local_crop_size: int = 96
    projection_dim: int = 256
    head_hidden_dim: int = 512
    head_bottleneck_dim: int = 64
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    ema_momentum_start: float = 0.996
    ema_momentum_end: float = 1.0
    epochs: int = 300
    batch_size: int = 32
    max_steps: int | None = None
    learning_rate: float = 5e-4
    weight_decay: float = 0.04
    warmup_steps: int = 0
    cosine_lr: bool = False
    clip_grad: float = 3.0
    smoothing_window: int = 20
    center_init: str = "zero"  # or "first_batch"
    # augmentation probabilities: (global view 1, global view 2, local views)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    jitter_strength: float = 0.4
    blur_p: tuple = (1.0, 0.1, 0.5)
    blur_sigma: tuple = (0.1, 2.0)
    solarize_p: tuple = (0.0, 0.2, 0.0)

    def __post_init__(self):
        for name in ("global_crop_scale", "local_crop_scale"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {(lo, hi)}")
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ConfigError("temperatures must be positive")
        for name in ("center_momentum", "ema_momentum_start", "ema_momentum_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.num_global_crops != 2:
            raise ConfigError("DINO uses exactly 2 global crops")


@dataclass
class CropView:
    pixels: np.ndarray
    box: tuple          # (top, left, height, width) in source pixels
    area_fraction: float
    is_global: bool


def sample_crop_box(h, w, scale, ratio, rng, max_attempts=10):
    """Random-resized-crop geometry: area fraction in ``scale``, log-uniform aspect."""
    area = h * w
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(max_attempts):
        target = area * rng.uniform(scale[0], scale[1])
        ar = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h and scale[0] <= ch * cw / area <= scale[1]:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # Fallback: a centred square at the clamped scale.
    side = min(h, w, max(1, int(round(math.sqrt(area * min(max(scale[0], (scale[0] + scale[1]) / 2), 1.0))))))
    if side * side / area > scale[1]:
        side = max(1, int(math.floor(math.sqrt(area * scale[1]))))
    return (h - side) // 2, (w - side) // 2, side, side


def _augment(img, rng, config: DinoConfig, slot):
    if rng.random() < config.flip_p:
        img = img[:, ::-1]
    if rng.random() < config.jitter_p:
        s = config.jitter_strength
        b = rng.uniform(1 - s, 1 + s)
        c = rng.uniform(1 - s, 1 + s)
        mean = img.mean()
        img = np.clip(((img - mean) * c + mean) * b, 0.0, 1.0)
    if rng.random() < config.blur_p[slot]:
        sigma = rng.uniform(*config.blur_sigma) * img.shape[0] / 224
        img = gaussian_filter(img, sigma)
    if rng.random() < config.solarize_p[slot]:
        img = np.where(img >= 0.5, 1.0 - img, img)
    return np.ascontiguousarray(img, dtype=np.float32)


def multi_crop(image, config: DinoConfig, rng):
    """Global then local crops of one image, each resized and augmented."""
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape
    views = []
    specs = [(True, config.global_crop_scale, config.global_crop_size, i) for i in range(config.num_global_crops)]
    specs += [(False, config.local_crop_scale, config.local_crop_size, 2)] * config.num_local_crops
    for is_global, scale, size, slot in specs:
        top, left, ch, cw = sample_crop_box(h, w, scale, config.crop_ratio, rng)
        crop = resize(image[top:top + ch, left:left + cw], size)
        crop = _augment(crop, rng, config, slot)
        views.append(CropView(crop, (top, left, ch, cw), ch * cw / (h * w), is_global))
    return views


class DinoHead(nn.Module):
    def __init__(self, in_dim, out_dim, hidden_dim=512, bottleneck_dim=64):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.GELU(),
                                 nn.Linear(hidden_dim, hidden_dim), nn.GELU(),
                                 nn.Linear(hidden_dim, bottleneck_dim))
        self.last = nn.Linear(bottleneck_dim, out_dim, bias=False)
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.last.weight, std=0.02)

    def forward(self, x):
        x = F.normalize(self.mlp(x), dim=-1)
        return F.linear(x, F.normalize(self.last.weight, dim=-1))


class DinoNetwork(nn.Module):
    def __init__(self, vit_config: ViTConfig, config: DinoConfig):
        super().__init__()
        self.backbone = VisionTransformer(vit_config)
        self.head = DinoHead(vit_config.embed_dim, config.projection_dim,
                             config.head_hidden_dim, config.head_bottleneck_dim)

    def forward(self, views):
        """``views`` is a list of (B, H, W) tensors; same-size views share a pass."""
        out = []
        i = 0
        while i < len(views):
            j = i
            while j < len(views) and views[j].shape == views[i].shape:
                j += 1
            batch = torch.cat(views[i:j])
            emb = self.backbone(batch, allow_resize=True)
            out.extend(self.head(emb).chunk(j - i))
            i = j
        return out


def dino_loss(student_logits, teacher_logits, center, config: DinoConfig):
    """Cross-entropy between centred/sharpened teacher and student outputs,
    averaged over (teacher view, student view) pairs that are not the
    same view."""
    for t in list(student_logits) + list(teacher_logits):
        if not torch.isfinite(t).all():
            raise FloatingPointError("non-finite logits in dino_loss")
    targets = [F.softmax((t.detach() - center) / config.teacher_temp, dim=-1) for t in teacher_logits]
    log_probs = [F.log_softmax(s / config.student_temp, dim=-1) for s in student_logits]
    total = 0.0
    pairs = 0
    for iq, q in enumerate(targets):
        for v, lp in enumerate(log_probs):
            if v == iq:
                continue
            total = total + torch.sum(-q * lp, dim=-1).mean()
            pairs += 1
    return total / pairs


def _params(x):
    return list(x.parameters()) if isinstance(x, nn.Module) else list(x)


@torch.no_grad()
def ema_update(teacher, student, m):
    """In place: teacher <- m * teacher + (1 - m) * student."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA momentum must be in [0, 1], got {m}")
    tp, sp = _params(teacher), _params(student)
    if len(tp) != len(sp) or any(a.shape != b.shape for a, b in zip(tp, sp)):
        raise ValueError("teacher and student parameter shapes do not match")
    for t, s in zip(tp, sp):
        t.mul_(m).add_(s.detach(), alpha=1.0 - m)
    return teacher


@torch.no_grad()
def update_center(center, teacher_outputs, momentum):
    """center' = momentum * center + (1 - momentum) * batch mean."""
    if isinstance(teacher_outputs, (list, tuple)):
        if not teacher_outputs:
            raise ValueError("empty teacher batch")
        teacher_outputs = torch.cat(list(teacher_outputs))
    if teacher_outputs.shape[0] == 0:
        raise ValueError("empty teacher batch")
    return center * momentum + teacher_outputs.mean(dim=0) * (1.0 - momentum)


def ema_momentum(step, total_steps, config: DinoConfig):
    """Cosine schedule from ema_momentum_start to ema_momentum_end."""
    if total_steps <= 1:
        return config.ema_momentum_start
    cos = (1 + math.cos(math.pi * step / (total_steps - 1))) / 2
    return config.ema_momentum_end - (config.ema_momentum_end - config.ema_momentum_start) * cos


def learning_rate(step, total_steps, config: DinoConfig):
    if config.warmup_steps and step < config.warmup_steps:
        return config.learning_rate * (step + 1) / config.warmup_steps
    if not config.cosine_lr:
        return config.learning_rate
    span = max(1, total_steps - config.warmup_steps)
    return config.learning_rate * 0.5 * (1 + math.cos(math.pi * (step - config.warmup_steps) / span))


def smoothed(trace, window):
    """Trailing moving average; entry i averages trace[max(0, i-window+1) : i+1]."""
    trace = np.asarray(trace, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(trace)])
    idx = np.arange(1, trace.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class DinoState:
    student: DinoNetwork
    teacher: DinoNetwork
    center: torch.Tensor
    step: int = 0


@dataclass
class PretrainResult:
    state: DinoState
    best_teacher: dict
    best_step: int
    loss_trace: list = field(default_factory=list)
    ema_trace: list = field(default_factory=list)

    def best_backbone(self):
        model = VisionTransformer(self.state.teacher.backbone.config)
        model.load_state_dict({k[len("backbone."):]: v for k, v in self.best_teacher.items()
                               if k.startswith("backbone.")})
        model.eval()
        return model


def init_state(vit_config, config: DinoConfig, seed):
    torch.manual_seed(seed)
    student = DinoNetwork(vit_config, config)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return DinoState(student, teacher, torch.zeros(config.projection_dim))


def pretrain(images, config: DinoConfig, vit_config: ViTConfig, seed=0, sample_ids=None,
             callback=None, student_trace=None):
    """Run DINO on a list of 2-D images.

    Keeps the teacher weights at the step with the least smoothed loss.
    ``student_trace``, when a list, receives a copy of the student
    parameters after every optimiser step (used to replay the EMA).
    """
    if len(images) == 0:
        raise ValueError("pretraining needs at least one image")
    if config.global_crop_size != vit_config.image_size:
        raise ConfigError("global_crop_size must equal the backbone image_size")
    torch.set_num_threads(1)
    sample_ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(len(images))]
    state = init_state(vit_config, config, seed)
    opt = torch.optim.AdamW(state.student.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(images) / config.batch_size)
    total = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    result = PretrainResult(state, copy.deepcopy(state.teacher.state_dict()), 0)
    best = math.inf
    epoch = 0
    while state.step < total:
        order = sample_rng(seed, "dino-epoch", epoch).permutation(len(images))
        for b in range(steps_per_epoch):
            if state.step >= total:
                break
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            crops = [multi_crop(images[i], config, sample_rng(seed, epoch, sample_ids[i])) for i in idx]
            views = [to_tensor(np.stack([c[v].pixels for c in crops])) for v in range(len(crops[0]))]
            for g in opt.param_groups:
                g["lr"] = learning_rate(state.step, total, config)
            state.student.train()
            with torch.no_grad():
                teacher_out = state.teacher(views[:config.num_global_crops])
            if state.step == 0 and config.center_init == "first_batch":
                state.center = torch.cat(teacher_out).mean(dim=0)
            student_out = state.student(views)
            loss = dino_loss(student_out, teacher_out, state.center, config)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite DINO loss at step {state.step}")
            opt.zero_grad()
            loss.backward()
            if config.clip_grad:
                nn.utils.clip_grad_norm_(state.student.parameters(), config.clip_grad)
            opt.step()
            m = ema_momentum(state.step, total, config)
            ema_update(state.teacher, state.student, m)
            state.center = update_center(state.center, teacher_out, config.center_momentum)
            result.loss_trace.append(loss.item())
            result.ema_trace.append(m)
            if student_trace is not None:
                student_trace.append([p.detach().clone() for p in state.student.parameters()])
            state.step += 1
            window = config.smoothing_window
            current = float(np.mean(result.loss_trace[-window:]))
            if len(result.loss_trace) >= min(window, total) and current < best:
                best = current
                result.best_step = state.step
                result.best_teacher = copy.deepcopy(state.teacher.state_dict())
            if callback is not None:
                callback(state.step, loss.item())
        epoch += 1
    return result


def save_pretrain_checkpoint(path, result: PretrainResult, vit_config, config: DinoConfig):
    model = result.best_backbone()
    head = {k: v for k, v in result.best_teacher.items() if k.startswith("head.")}
    save_backbone(path, model, extra_tensors={**head, "dino.center": result.state.center},
                  extra_metadata={"dino_config": _jsonable(config), "best_step": result.best_step})


def _jsonable(dc):
    from dataclasses import asdict

    return asdict(dc)


def write_loss_trace(path, trace):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(trace, start=1):
            w.writerow([i, repr(float(loss))])
