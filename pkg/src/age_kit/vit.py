"""A small vision transformer that exposes per-head [CLS] attention.

Pre-norm blocks (DeiT layout), learned positional embeddings, no dropout.
Checkpoints are safetensors files whose metadata carries a format tag and
the JSON-encoded model config.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from age_kit.errors import ConfigError

CHECKPOINT_FORMAT = "age-kit-checkpoint/1"


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 96
    depth: int = 4
    num_heads: int = 6
    mlp_ratio: float = 4.0
    num_register_tokens: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_register_tokens != 0:
            raise ConfigError("register tokens are not supported")

    @property
    def grid_size(self):
        return self.image_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid_size ** 2 + 1


@dataclass
class AttentionHeadMaps:
    """Final-layer attention from the [CLS] query, one grid per head."""

    layer: int
    maps: np.ndarray                # (num_heads, grid, grid)
    cls_self_attention: np.ndarray  # (num_heads,)

    @property
    def num_heads(self):
        return self.maps.shape[0]


def patchify(images, patch_size):
    """Split (..., H, W) images into row-major flattened patches.

    Returns (..., (H/p)*(W/p), p*p).
    """
    *lead, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(*lead, gh, patch_size, gw, patch_size)
    x = x.transpose(-3, -2) if isinstance(x, torch.Tensor) else np.swapaxes(x, -3, -2)
    return x.reshape(*lead, gh * gw, patch_size * patch_size)


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class VisionTransformer(nn.Module):
    def __init__(self, config: ViTConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Linear(config.patch_size ** 2, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_tokens, d))
        self.blocks = nn.ModuleList(Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def _pos_embed_for(self, h, w):
        p = self.config.patch_size
        if (h, w) == (self.config.image_size,) * 2:
            return self.pos_embed
        g = self.config.grid_size
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        patch_pos = patch_pos.reshape(1, g, g, -1).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(h // p, w // p), mode="bicubic", align_corners=False)
        return torch.cat([cls_pos, patch_pos.flatten(2).transpose(1, 2)], dim=1)

    def check_finite(self):
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise FloatingPointError(f"parameter {name} has non-finite values")

    def forward_features(self, images, capture_attention=False, allow_resize=False):
        """[CLS] embeddings for a (B, H, W) batch, plus final-layer attention.

        Inputs other than ``image_size`` need ``allow_resize``, which
        interpolates the positional embeddings (used for DINO local crops).
        """
        if images.ndim == 2:
            images = images[None]
        h, w = images.shape[-2:]
        if not allow_resize and (h, w) != (self.config.image_size,) * 2:
            raise ValueError(f"expected {self.config.image_size}x{self.config.image_size} images, got {h}x{w}")
        self.check_finite()
        x = self.patch_embed(patchify(images, self.config.patch_size))
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        x = x + self._pos_embed_for(h, w)
        attn = None
        for blk in self.blocks:
            x, attn = blk(x)
        cls = self.norm(x)[:, 0]
        return cls, (attn if capture_attention else None)

    def forward(self, images, allow_resize=False):
        return self.forward_features(images, allow_resize=allow_resize)[0]


def attention_to_maps(attn, config: ViTConfig):
    """Split a (B, heads, N, N) attention tensor into per-image head maps."""
    cls_row = attn[:, :, 0, :].detach().cpu().double().numpy()
    g = config.grid_size
    return [AttentionHeadMaps(config.depth - 1, row[:, 1:].reshape(-1, g, g), row[:, 0].copy())
            for row in cls_row]


def to_tensor(images, dtype=torch.float32):
    return torch.as_tensor(np.asarray(images), dtype=dtype)


def gradient_check(model: nn.Module, loss_fn, epsilon=1e-5, num_params=50, seed=0, skip_below=1e-8):
    """Max relative error of autograd gradients against central differences.

    ``loss_fn(model)`` must return a scalar tensor; the model should be in
    float64. Entries whose analytic gradient magnitude is below
    ``skip_below`` are compared absolutely and excluded from the relative
    figure.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn(model).backward()
    grads = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(num_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for f in flat:
            i = int(np.searchsorted(offsets, f, side="right") - 1)
            j = int(f - offsets[i])
            view = params[i].view(-1)
            orig = view[j].item()
            view[j] = orig + epsilon
            plus = loss_fn(model).item()
            view[j] = orig - epsilon
            minus = loss_fn(model).item()
            view[j] = orig
            numeric = (plus - minus) / (2 * epsilon)
            analytic = grads[i].view(-1)[j].item()
            if abs(analytic) < skip_below:
                continue
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    model.zero_grad()
    return worst


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, tensors: dict, metadata: dict):
    """Write named tensors as little-endian float32 plus JSON metadata."""
    from safetensors.torch import save_file

    flat = {k: v.detach().to(torch.float32).contiguous().cpu() for k, v in tensors.items()}
    meta = {"format": CHECKPOINT_FORMAT}
    meta.update({k: json.dumps(v, sort_keys=True) for k, v in metadata.items()})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(flat, str(path), metadata=meta)
    _canonical_header(path)


def _canonical_header(path):
    """Rewrite the safetensors JSON header with sorted keys.

    The writer emits metadata in hash-map order, which varies between
    processes; sorting makes identical checkpoints byte-identical. Tensor
    offsets are relative to the data section, so only the header moves.
    """
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n])
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    Path(path).write_bytes(struct.pack("<Q", len(text)) + text + raw[8 + n:])


def load_checkpoint(path):
    """Returns (tensors, metadata) with metadata values JSON-decoded."""
    from safetensors import safe_open

    tensors = {}
    with safe_open(str(path), framework="pt") as fh:
        meta = dict(fh.metadata() or {})
        for k in fh.keys():
            tensors[k] = fh.get_tensor(k)
    fmt = meta.pop("format", None)
    if fmt != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {fmt!r}")
    return tensors, {k: json.loads(v) for k, v in meta.items()}


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_backbone(path, model: VisionTransformer, extra_tensors=None, extra_metadata=None):
    tensors = {f"backbone.{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra_tensors or {})
    save_checkpoint(path, tensors, {"vit_config": asdict(model.config), **(extra_metadata or {})})


def load_backbone(path):
    """Rebuild a VisionTransformer from a checkpoint; returns (model, tensors, metadata)."""
    tensors, meta = load_checkpoint(path)
    model = VisionTransformer(ViTConfig(**meta["vit_config"]))
    state = {k[len("backbone."):]: v for k, v in tensors.items() if k.startswith("backbone.")}
    model.load_state_dict(state)
    model.eval()
    return model, tensors, meta
