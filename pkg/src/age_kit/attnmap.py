"""[CLS] attention extraction, head selection and binary masks.

Head selection counts, per head, the attention-grid cells that stay above
a threshold after min-max normalisation. Concentrated heads light up few
cells; the chosen head is the most concentrated one among those whose
worst-case count over a sample of training images stays under a ceiling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from age_kit.errors import ConfigError, DataError
from age_kit.seeding import sample_rng
from age_kit.vit import AttentionHeadMaps, VisionTransformer, attention_to_maps, to_tensor

MASK_INDEX = "index.json"


@dataclass(frozen=True)
class HeadSelectionConfig:
    sample_fraction: float = 0.10
    activation_threshold: float = 0.5
    count_ceiling: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigError("sample_fraction must be in (0, 1]")
        if not 0.0 < self.activation_threshold < 1.0:
            raise ConfigError("activation_threshold must be in (0, 1)")
        if self.count_ceiling <= 0:
            raise ConfigError("count_ceiling must be positive")


@dataclass
class HeadStats:
    head: int
    max_count: int
    mean_count: float
    histogram: list


@dataclass
class HeadSelectionReport:
    per_head: list
    selected_head: int      # 0-based
    sample_size: int
    sample_ids: list = field(default_factory=list)
    used_fallback: bool = False

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls([HeadStats(**h) for h in d["per_head"]], d["selected_head"], d["sample_size"],
                   d.get("sample_ids", []), d.get("used_fallback", False))

    def to_text(self):
        lines = [f"sample size: {self.sample_size}",
                 f"{'head':>4} {'max cells':>9} {'mean cells':>10}"]
        for h in self.per_head:
            mark = "  <- selected" if h.head == self.selected_head else ""
            lines.append(f"{h.head + 1:>4} {h.max_count:>9} {h.mean_count:>10.2f}{mark}")
        if self.used_fallback:
            lines.append("no head stayed under the ceiling; fell back to the global minimum")
        return "\n".join(lines) + "\n"


@dataclass
class BinaryMask:
    grid: np.ndarray
    pixel_mask: np.ndarray
    source_head: int
    threshold: float


@torch.no_grad()
def extract_cls_attention(backbone: VisionTransformer, images):
    """Final-layer [CLS]-query attention maps.

    ``images`` is one (H, W) image or a (B, H, W) stack; returns one
    AttentionHeadMaps or a list of them accordingly.
    """
    backbone.eval()
    arr = np.asarray(images, dtype=np.float32)
    single = arr.ndim == 2
    _, attn = backbone.forward_features(to_tensor(arr), capture_attention=True)
    maps = attention_to_maps(attn, backbone.config)
    return maps[0] if single else maps


def extract_batched(backbone, images, batch_size=64):
    out = []
    for i in range(0, len(images), batch_size):
        out.extend(extract_cls_attention(backbone, np.stack(images[i:i + batch_size])))
    return out


def normalize_grid(grid):
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    if hi <= lo:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def count_active_cells(grid, threshold):
    """Cells above ``threshold`` after min-max normalisation (constant grid -> 0)."""
    grid = np.asarray(grid)
    if grid.size == 0:
        raise ValueError("empty attention grid")
    return int((normalize_grid(grid) > threshold).sum())


def choose_head(max_counts, ceiling):
    """Index of the smallest max-count under ``ceiling``; ties go to the
    lowest index. Falls back to the global minimum when no head qualifies.

    Returns (head, used_fallback).
    """
    counts = np.asarray(max_counts)
    below = np.flatnonzero(counts < ceiling)
    if below.size:
        return int(below[np.argmin(counts[below])]), False
    return int(np.argmin(counts)), True


def draw_subset(sample_ids, fraction, seed):
    """Seeded subset of ids, independent of the input order."""
    ids = sorted(sample_ids)
    n = max(1, int(round(fraction * len(ids))))
    pick = sample_rng(seed, "head-selection").choice(len(ids), size=n, replace=False)
    return [ids[i] for i in sorted(pick)]


def head_statistics(maps, threshold):
    """Per-head active-cell counts over a list of AttentionHeadMaps."""
    if not maps:
        raise ValueError("no attention maps to analyse")
    counts = np.array([[count_active_cells(m.maps[h], threshold) for h in range(m.num_heads)] for m in maps])
    cells = maps[0].maps[0].size
    return [HeadStats(h, int(counts[:, h].max()), float(counts[:, h].mean()),
                      np.bincount(counts[:, h], minlength=cells + 1).tolist())
            for h in range(counts.shape[1])]


def select_head(backbone, samples, config: HeadSelectionConfig = HeadSelectionConfig()):
    """Pick the density head from a seeded fraction of ``samples``.

    ``samples`` are ImageSample objects already at the backbone resolution.
    """
    if not samples:
        raise ValueError("select_head needs a non-empty sample set")
    by_id = {s.id: s for s in samples}
    ids = draw_subset(by_id, config.sample_fraction, config.seed)
    maps = extract_batched(backbone, [by_id[i].pixels for i in ids])
    stats = head_statistics(maps, config.activation_threshold)
    head, fallback = choose_head([s.max_count for s in stats], config.count_ceiling)
    return HeadSelectionReport(stats, head, len(ids), ids, fallback)


def make_mask(grid, threshold=0.5, dilation_cells=1, patch_size=16, source_head=-1, fallback=True):
    """Threshold a normalised attention grid into a patch mask and its
    nearest-neighbour pixel expansion.

    Dilation uses the Chebyshev (8-connected) neighbourhood. With
    ``fallback`` an empty foreground becomes the first argmax cell.
    """
    grid = np.asarray(grid, dtype=np.float64)
    norm = normalize_grid(grid)
    fg = norm > threshold
    if dilation_cells > 0:
        size = 2 * dilation_cells + 1
        fg = ndimage.binary_dilation(fg, structure=np.ones((size, size), dtype=bool))
    if fallback and not fg.any():
        fg = np.zeros_like(fg)
        fg[np.unravel_index(np.argmax(grid), grid.shape)] = True
    pixel = np.repeat(np.repeat(fg, patch_size, axis=0), patch_size, axis=1)
    return BinaryMask(fg, pixel, source_head, threshold)


def masks_for(backbone, samples, head, threshold=0.5, dilation_cells=1):
    maps = extract_batched(backbone, [s.pixels for s in samples])
    p = backbone.config.patch_size
    return {s.id: make_mask(m.maps[head], threshold, dilation_cells, p, head) for s, m in zip(samples, maps)}


def mask_recall(mask, truth):
    """Fraction of truth-mask pixels covered by the mask (1.0 if truth empty)."""
    truth = np.asarray(truth, dtype=bool)
    keep = np.asarray(getattr(mask, "pixel_mask", mask), dtype=bool)
    return float((keep & truth).sum() / truth.sum()) if truth.any() else 1.0


# --- mask cache ---------------------------------------------------------------

def write_mask_cache(directory, masks, meta):
    """One 8-bit PNG per sample (0 background, 255 foreground) plus index.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sid, m in sorted(masks.items()):
        Image.fromarray(m.pixel_mask.astype(np.uint8) * 255).save(directory / f"{sid}.png")
    index = dict(meta)
    if masks:
        first = next(iter(masks.values()))
        index.setdefault("patch_size", first.pixel_mask.shape[0] // first.grid.shape[0])
        index.setdefault("source_head", first.source_head)
        index.setdefault("tau_mask", first.threshold)
    index["ids"] = sorted(masks)
    (directory / MASK_INDEX).write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def read_mask_cache(directory, patch_size=None):
    """Returns ({id: BinaryMask}, index)."""
    directory = Path(directory)
    index_path = directory / MASK_INDEX
    if not index_path.is_file():
        raise DataError(f"no mask cache at {directory}")
    index = json.loads(index_path.read_text())
    p = patch_size or index["patch_size"]
    masks = {}
    for sid in index["ids"]:
        path = directory / f"{sid}.png"
        if not path.is_file():
            raise DataError(f"mask cache is missing {path.name}")
        with Image.open(path) as im:
            pixel = np.asarray(im) > 127
        masks[sid] = BinaryMask(pixel[::p, ::p].copy(), pixel, index["source_head"], index["tau_mask"])
    return masks, index
