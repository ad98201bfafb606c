"""Samples, split manifests, image ingestion and synthetic phantoms.

Phantoms stand in for mammograms: a half-ellipse breast footprint against
black air, disc-shaped dense tissue whose area fraction fixes the density
class, and background distractors (pectoral wedge, skin fold, noise) that
carry no class information.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from age_kit import CLASSES
from age_kit.errors import ConfigError, DataError

SPLITS = ("train", "val", "test")
VIEWS = ("CC", "MLO")
MANIFEST_HEADER = ("id", "path", "label", "split")

# Dense-area fraction of the breast footprint, per class: [lo, hi).
CLASS_THRESHOLDS = {"A": (0.0, 0.05), "B": (0.05, 0.25), "C": (0.25, 0.60), "D": (0.60, 1.0)}

# VinDr-Mammo density counts per split (train / val / test).
VINDR_COUNTS = {
    "train": {"A": 72, "B": 1308, "C": 10366, "D": 1854},
    "val": {"A": 8, "B": 220, "C": 1866, "D": 306},
    "test": {"A": 20, "B": 380, "C": 3060, "D": 540},
}


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray
    label: Optional[str] = None
    view: Optional[str] = None
    laterality: Optional[str] = None

    def __post_init__(self):
        if self.label is not None and self.label not in CLASSES:
            raise DataError(f"sample {self.id}: unknown label {self.label!r}")
        if self.view is not None and self.view not in VIEWS:
            raise DataError(f"sample {self.id}: unknown view {self.view!r}")
        if self.laterality is not None and self.laterality not in ("L", "R"):
            raise DataError(f"sample {self.id}: unknown laterality {self.laterality!r}")

    @property
    def label_index(self):
        return CLASSES.index(self.label)


@dataclass
class ManifestEntry:
    id: str
    path: Path
    label: str
    split: str


@dataclass
class SplitManifest:
    entries: list
    class_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.class_counts:
            self.class_counts = recount(self.entries)

    def split(self, name):
        return [e for e in self.entries if e.split == name]


def recount(entries):
    counts = {}
    for e in entries:
        counts.setdefault(e.split, Counter())[e.label] += 1
    return {s: {c: counts[s][c] for c in CLASSES} for s in SPLITS if s in counts}


def load_manifest(path, check_files=True):
    """Read and validate an ``id,path,label,split`` CSV.

    Relative image paths resolve against the manifest's directory. Row
    numbers in error messages are file line numbers (the header is line 1).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        rows = [(reader.line_num, r) for r in reader if r]
    problems = []
    entries = []
    seen = {}
    for i, row in rows:
        if len(row) != 4:
            problems.append(f"line {i}: expected 4 fields, got {len(row)}")
            continue
        sid, rel, label, split = (x.strip() for x in row)
        if label not in CLASSES:
            problems.append(f"line {i}: unknown label {label!r}")
        if split not in SPLITS:
            problems.append(f"line {i}: unknown split {split!r}")
        if sid in seen:
            problems.append(f"line {i}: duplicate id {sid!r} (first seen on line {seen[sid]})")
        seen.setdefault(sid, i)
        file = Path(rel) if Path(rel).is_absolute() else path.parent / rel
        if check_files and not file.is_file():
            problems.append(f"line {i}: missing image file {file}")
        entries.append(ManifestEntry(sid, file, label, split))
    if problems:
        raise DataError(f"{path}: invalid manifest\n  " + "\n  ".join(problems))
    return SplitManifest(entries)


def write_manifest(path, manifest: SplitManifest):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            p = Path(e.path)
            try:
                p = p.relative_to(path.parent)
            except ValueError:
                pass
            writer.writerow([e.id, p.as_posix(), e.label, e.split])


def read_image(path):
    """Load an 8- or 16-bit grayscale image as float32 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            scale = 255.0
    return (arr / scale).astype(np.float32)


def write_image(path, pixels, bits=16):
    """Write a [0, 1] array as lossless 8- or 16-bit grayscale."""
    pixels = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        Image.fromarray(np.round(pixels * 65535).astype(np.uint16)).save(path)
    elif bits == 8:
        Image.fromarray(np.round(pixels * 255).astype(np.uint8)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def resize_and_normalize(sample: ImageSample, target, patch_size=16):
    """Resize to ``target``x``target`` and min-max normalise to [0, 1].

    Constant images normalise to all zeros.
    """
    if target % patch_size:
        raise ConfigError(f"target size {target} is not divisible by patch size {patch_size}")
    pixels = np.asarray(sample.pixels, dtype=np.float32)
    if pixels.shape != (target, target):
        pixels = resize(pixels, target)
    lo, hi = float(pixels.min()), float(pixels.max())
    if hi > lo:
        pixels = (pixels - lo) / (hi - lo)
    else:
        pixels = np.zeros_like(pixels)
    return ImageSample(sample.id, pixels.astype(np.float32), sample.label, sample.view, sample.laterality)


def resize(pixels, size):
    """Bilinear resize of a float image to ``size`` (int or (h, w))."""
    h, w = (size, size) if isinstance(size, int) else size
    im = Image.fromarray(np.asarray(pixels, dtype=np.float32), mode="F")
    return np.asarray(im.resize((w, h), Image.BILINEAR), dtype=np.float32)


def load_samples(manifest: SplitManifest, split, target, patch_size):
    return [resize_and_normalize(ImageSample(e.id, read_image(e.path), e.label), target, patch_size)
            for e in manifest.split(split)]


# --- phantoms -------------------------------------------------------------

@dataclass
class PhantomSpec:
    image_size: int
    breast_region: dict
    dense_blobs: list
    distractors: list
    label: str
    dense_fraction: float
    truth_mask: np.ndarray = field(repr=False)

    def to_json(self):
        d = asdict(self)
        d.pop("truth_mask")
        d["truth_mask_area"] = int(self.truth_mask.sum())
        return d


def density_class(fraction, thresholds=CLASS_THRESHOLDS):
    for label in CLASSES:
        lo, hi = thresholds[label]
        if lo <= fraction < hi:
            return label
    if fraction == 1.0:
        return CLASSES[-1]
    raise ValueError(f"dense fraction {fraction} outside all class intervals")


def scaled_counts(total, reference, min_per_class=1):
    """Spread ``total`` samples over classes in proportion to ``reference``.

    Largest-remainder rounding after reserving ``min_per_class`` each.
    """
    n_ref = sum(reference.values())
    spare = total - min_per_class * len(CLASSES)
    if spare < 0:
        raise ConfigError(f"total {total} is too small for {min_per_class} per class")
    raw = {c: spare * reference[c] / n_ref for c in CLASSES}
    counts = {c: int(raw[c]) for c in CLASSES}
    rest = sorted(CLASSES, key=lambda c: (-(raw[c] - counts[c]), CLASSES.index(c)))
    for c in rest[: spare - sum(counts.values())]:
        counts[c] += 1
    return {c: counts[c] + min_per_class for c in CLASSES}


def _smooth_noise(rng, size, sigma):
    from scipy.ndimage import gaussian_filter

    field_ = gaussian_filter(rng.standard_normal((size, size)), sigma)
    return field_ / (field_.std() + 1e-12)


def make_phantom(rng, label, image_size=128, view="MLO", laterality="L",
                 thresholds=CLASS_THRESHOLDS, noise_sigma=0.02):
    """One phantom image and its spec for the requested density class."""
    if image_size < 64:
        raise ConfigError("phantom image_size must be >= 64")
    if label not in CLASSES:
        raise ConfigError(f"unknown class {label!r}")
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    # Breast footprint: right half of an ellipse whose centre sits on the chest wall (x = 0).
    ry = rng.uniform(0.36, 0.46) * s
    rx = rng.uniform(0.6, 0.85) * s
    cy = s / 2 + rng.uniform(-0.04, 0.04) * s
    ellipse = ((xx / rx) ** 2 + ((yy - cy) / ry) ** 2) <= 1.0
    region = {"center_y": cy, "radius_x": rx, "radius_y": ry}

    distractors = []
    wedge = np.zeros((s, s), dtype=bool)
    if view == "MLO":
        wx = rng.uniform(0.2, 0.45) * s
        wy = rng.uniform(0.45, 0.9) * s
        wedge = (xx / wx + yy / wy) <= 1.0
        distractors.append({"kind": "pectoral_wedge", "width": wx, "height": wy,
                            "intensity": float(rng.uniform(0.6, 0.8))})
    footprint = ellipse & ~wedge

    lo, hi = thresholds[label]
    margin = 0.15 * (min(hi, 0.95) - lo)
    fp_area = footprint.sum()
    fy, fx = np.nonzero(footprint)
    for _ in range(200):
        target = rng.uniform(lo + margin, min(hi, 0.95) - margin)
        dense = np.zeros((s, s), dtype=bool)
        blobs = []
        frac = 0.0
        while frac < target:
            k = rng.integers(fy.size)
            r = rng.uniform(0.03, 0.09) * s
            disc = ((yy - fy[k]) ** 2 + (xx - fx[k]) ** 2) <= r * r
            dense |= disc & footprint
            blobs.append({"center": [float(fy[k]), float(fx[k])], "radius": float(r),
                          "intensity": float(rng.uniform(0.6, 0.8))})
            frac = dense.sum() / fp_area
        if lo <= frac < hi:
            break
    else:  # pragma: no cover - guarded by the margin
        raise RuntimeError(f"could not realise a class {label} phantom")

    texture = _smooth_noise(rng, s, 2.0)
    img = np.zeros((s, s))
    img[ellipse] = 0.3 + 0.04 * texture[ellipse]
    dense_level = np.zeros((s, s))
    for b in blobs:
        disc = ((yy - b["center"][0]) ** 2 + (xx - b["center"][1]) ** 2) <= b["radius"] ** 2
        dense_level = np.where(disc & footprint, np.maximum(dense_level, b["intensity"]), dense_level)
    img = np.where(dense, dense_level + 0.06 * texture, img)
    if view == "MLO":
        img[wedge] = distractors[0]["intensity"] + 0.01 * texture[wedge]

    # Skin fold: a bright band hugging the outer breast boundary.
    rim = ellipse & (((xx / (rx - 0.04 * s)) ** 2 + ((yy - cy) / (ry - 0.04 * s)) ** 2) > 1.0)
    theta0 = rng.uniform(-1.2, 0.6)
    arc = rim & (np.arctan2(yy - cy, xx) > theta0) & (np.arctan2(yy - cy, xx) < theta0 + rng.uniform(0.5, 1.2))
    arc &= ~dense
    fold_intensity = float(rng.uniform(0.55, 0.8))
    img[arc] = fold_intensity
    distractors.append({"kind": "skin_fold", "start_angle": float(theta0), "intensity": fold_intensity})

    img += noise_sigma * rng.standard_normal((s, s))
    distractors.append({"kind": "noise", "sigma": noise_sigma})
    img = np.clip(img, 0.0, 1.0)

    if laterality == "R":
        img = img[:, ::-1]
        dense = dense[:, ::-1]
    spec = PhantomSpec(s, region, blobs, distractors, label, float(frac), dense.copy())
    return img.astype(np.float32), spec


def generate_phantom_dataset(seed, counts, image_size=128, mlo_fraction=0.5,
                             thresholds=CLASS_THRESHOLDS):
    """Deterministic phantom samples.

    ``counts`` maps split -> class -> count. Returns a list of
    ``(split, ImageSample, PhantomSpec)`` in split/class order; each sample
    draws from its own stream keyed by (seed, sample id), so the result
    does not depend on how many other samples are requested.
    """
    from age_kit.seeding import sample_rng

    if image_size < 64:
        raise ConfigError("phantom image_size must be >= 64")
    out = []
    for split in SPLITS:
        for label in CLASSES:
            n = int(counts.get(split, {}).get(label, 0))
            if n < 0:
                raise ConfigError("phantom counts must be non-negative")
            for i in range(n):
                sid = f"{split}-{label}-{i:05d}"
                rng = sample_rng(seed, sid)
                view = "MLO" if rng.random() < mlo_fraction else "CC"
                lat = "L" if rng.random() < 0.5 else "R"
                img, spec = make_phantom(rng, label, image_size, view, lat, thresholds)
                out.append((split, ImageSample(sid, img, label, view, lat), spec))
    return out


def write_phantom_dataset(root, phantoms):
    """Write PNGs, JSON sidecars and a manifest; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for split, sample, spec in phantoms:
        img_path = root / "images" / f"{sample.id}.png"
        write_image(img_path, sample.pixels, bits=16)
        sidecar = spec.to_json() | {"view": sample.view, "laterality": sample.laterality}
        (root / "images" / f"{sample.id}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
        entries.append(ManifestEntry(sample.id, img_path, sample.label, split))
    manifest_path = root / "manifest.csv"
    write_manifest(manifest_path, SplitManifest(entries))
    return manifest_path
