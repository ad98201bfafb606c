"""Attention overlays and original/overlay/mask/erased panels."""

import numpy as np
from matplotlib import colormaps
from PIL import Image


def _gray_rgb(image):
    g = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def attention_overlay(image, grid, alpha=0.5, cmap="inferno"):
    """Blend a min-max normalised attention grid over a grayscale image."""
    image = np.asarray(image, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    rep = image.shape[0] // grid.shape[0]
    heat = np.kron(grid, np.ones((rep, rep)))
    span = heat.max() - heat.min()
    heat = (heat - heat.min()) / span if span > 0 else np.zeros_like(heat)
    colored = colormaps[cmap](heat)[..., :3] * 255
    out = (1 - alpha) * _gray_rgb(image) + alpha * colored
    return np.round(out).astype(np.uint8)


def panel(image, grid, mask, erased, scale=2, gap=4):
    """Horizontal strip: original | attention overlay | mask | erased."""
    tiles = [_gray_rgb(image), attention_overlay(image, grid),
             _gray_rgb(np.asarray(mask, dtype=np.float64)), _gray_rgb(erased)]
    h = tiles[0].shape[0]
    sep = np.full((h, gap, 3), 255, dtype=np.uint8)
    strip = np.concatenate([t for tile in tiles for t in (tile, sep)][:-1], axis=1)
    if scale != 1:
        strip = np.kron(strip, np.ones((scale, scale, 1), dtype=np.uint8))
    return strip


def save_rgb(path, array):
    Image.fromarray(array).save(path)
