"""Phantom mammograms: what the generator produces and how the density
classes relate to the dense-area fraction."""
from pathlib import Path

import numpy as np
from PIL import Image

from age_kit.dataset import CLASSES, generate_phantom_dataset

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

# four of each class, fixed seed -> identical pictures on every machine
phantoms = generate_phantom_dataset(0, {"train": {c: 4 for c in CLASSES}}, image_size=128)
len(phantoms)

# dense fraction climbs with the class label
for c in CLASSES:
    fr = [spec.dense_fraction for _, s, spec in phantoms if s.label == c]
    print(c, np.round(fr, 3))

# MLO views carry a pectoral-muscle triangle: bright, but not dense tissue
views = [(s.view, len(spec.distractors)) for _, s, spec in phantoms]
print(views[:6])

# one row per class, image next to its truth mask
rows = []
for c in CLASSES:
    _, s, spec = next(p for p in phantoms if p[1].label == c)
    rows.append(np.hstack([s.pixels, spec.truth_mask.astype(np.float32)]))
grid = np.vstack(rows)
Image.fromarray(np.round(grid * 255).astype(np.uint8)).save(out / "phantoms.png")
print("wrote", out / "phantoms.png")
