"""Attention-guided erasing, the Random Erasing baseline, and the
probabilistic policy that applies either during training.

All transforms take and return 2-D float arrays in [0, 1]; randomness
comes from an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from age_kit.errors import ConfigError

MODES = ("none", "RE", "AGE")

DEFAULT_STANDARD_AUGS = (
    ("hflip", {"p": 0.5}),
    ("rotate", {"degrees": 10.0}),
    ("jitter", {"brightness": 0.1, "contrast": 0.1}),
)


@dataclass(frozen=True)
class AugmentationPolicy:
    mode: str = "none"
    probability: float = 0.0
    fill_value: float = 0.0
    re_area: tuple = (0.02, 0.33)
    re_aspect: tuple = (0.3, 3.3)
    standard_augs: tuple = DEFAULT_STANDARD_AUGS

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown erasing mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"probability must be in [0, 1], got {self.probability}")
        lo, hi = self.re_area
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError(f"re_area must lie inside (0, 1), got {self.re_area}")
        if not 0.0 < self.re_aspect[0] <= self.re_aspect[1]:
            raise ConfigError(f"re_aspect must be positive, got {self.re_aspect}")
        for name, _ in self.standard_augs:
            if name not in STANDARD_AUGS:
                raise ConfigError(f"unknown standard augmentation {name!r}")


def _pixel_mask(mask):
    return np.asarray(getattr(mask, "pixel_mask", mask), dtype=bool)


def apply_age(image, mask, fill=0.0):
    """Keep pixels inside ``mask`` and set everything else to ``fill``."""
    image = np.asarray(image)
    keep = _pixel_mask(mask)
    if keep.shape != image.shape:
        raise ValueError(f"mask shape {keep.shape} does not match image shape {image.shape}")
    return np.where(keep, image, np.asarray(fill, dtype=image.dtype))


def sample_erase_box(shape, area=(0.02, 0.33), aspect=(0.3, 3.3), rng=None, max_attempts=10):
    """Draw (top, left, height, width) for one erasing rectangle, or None.

    The aspect ratio is drawn log-uniformly. A draw is rejected unless the
    rounded rectangle fits inside the image and its realised area fraction
    stays inside ``area``.
    """
    rng = np.random.default_rng() if rng is None else rng
    h, w = shape
    total = h * w
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])
    for _ in range(max_attempts):
        target = rng.uniform(area[0], area[1]) * total
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        eh = int(round(math.sqrt(target * ratio)))
        ew = int(round(math.sqrt(target / ratio)))
        if not (0 < eh <= h and 0 < ew <= w):
            continue
        if not area[0] <= eh * ew / total <= area[1]:
            continue
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        return top, left, eh, ew
    return None


def apply_random_erasing(image, area=(0.02, 0.33), aspect=(0.3, 3.3), rng=None, max_attempts=10):
    """Fill one random rectangle with uniform noise; unchanged if no fit."""
    rng = np.random.default_rng() if rng is None else rng
    image = np.asarray(image)
    box = sample_erase_box(image.shape, area, aspect, rng, max_attempts)
    if box is None:
        return image.copy()
    top, left, eh, ew = box
    out = image.copy()
    out[top:top + eh, left:left + ew] = rng.uniform(0.0, 1.0, size=(eh, ew)).astype(image.dtype)
    return out


# --- standard downstream augmentations ---------------------------------------

def _hflip(image, rng, p=0.5):
    return image[:, ::-1].copy() if rng.random() < p else image


def _rotate(image, rng, degrees=10.0):
    angle = rng.uniform(-degrees, degrees)
    return ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0)


def _jitter(image, rng, brightness=0.1, contrast=0.1):
    b = rng.uniform(-brightness, brightness)
    c = rng.uniform(1.0 - contrast, 1.0 + contrast)
    mean = image.mean()
    return np.clip((image - mean) * c + mean + b, 0.0, 1.0).astype(image.dtype)


STANDARD_AUGS = {"hflip": _hflip, "rotate": _rotate, "jitter": _jitter}


def apply_standard_augs(image, augs, rng):
    for name, params in augs:
        image = STANDARD_AUGS[name](image, rng, **params)
    return image


def apply_policy(image, mask, policy: AugmentationPolicy, rng):
    """Erase with probability ``policy.probability``, then run the
    standard augmentations.

    Returns ``(image, erased)``. One uniform draw decides erasing for every
    mode, so the stream consumption does not depend on the outcome.
    """
    if policy.mode == "AGE" and mask is None:
        raise ConfigError("AGE policy requires a mask")
    image = np.asarray(image)
    erased = bool(rng.random() < policy.probability) and policy.mode != "none"
    if erased and policy.mode == "AGE":
        image = apply_age(image, mask, policy.fill_value)
    elif erased:
        image = apply_random_erasing(image, policy.re_area, policy.re_aspect, rng)
    return apply_standard_augs(image, policy.standard_augs, rng), erased
