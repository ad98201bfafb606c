"""Attention heads of a briefly pretrained backbone.

Pretrains for a few epochs on phantoms, then shows every final-layer head's
[CLS] map and the mask built from the head the count rule picks.
"""
import dataclasses
from pathlib import Path

import numpy as np

from age_kit import viz
from age_kit.attnmap import extract_batched, make_mask, mask_recall, select_head
from age_kit.config import quick_profile
from age_kit.dataset import generate_phantom_dataset, resize_and_normalize, scaled_counts
from age_kit.dino import pretrain

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

cfg = quick_profile()
counts = {"train": scaled_counts(240, {"A": 72, "B": 1308, "C": 10366, "D": 1854}, 5)}
phantoms = generate_phantom_dataset(0, counts, image_size=64)
samples = [resize_and_normalize(s, cfg.vit.image_size, cfg.vit.patch_size) for _, s, _ in phantoms]
truth = {s.id: spec.truth_mask for _, s, spec in phantoms}

dino = dataclasses.replace(cfg.dino, epochs=10)
result = pretrain([s.pixels for s in samples], dino, cfg.vit, seed=0)
print("loss: first %.3f  last %.3f" % (result.loss_trace[0], result.loss_trace[-1]))
backbone = result.best_backbone()

report = select_head(backbone, samples, cfg.head_selection)
print(report.to_text())
head = report.selected_head

# all six maps for one image, side by side
sample = samples[0]
maps = extract_batched(backbone, [sample.pixels])[0].maps
strip = np.hstack([viz.attention_overlay(sample.pixels, m) for m in maps])
viz.save_rgb(out / "heads.png", np.kron(strip, np.ones((3, 3, 1), np.uint8)))

# how much of the true dense tissue survives the selected head's mask?
recall = []
for s in samples:
    grid = extract_batched(backbone, [s.pixels])[0].maps[head]
    recall.append(mask_recall(make_mask(grid, cfg.mask.threshold, cfg.mask.dilation_cells,
                                        cfg.vit.patch_size, head), truth[s.id]))
print(f"head {head + 1}: mean truth recall {np.mean(recall):.2f}")
