"""End-to-end steps: pretrain, head selection, masks, training sweep, report.

Every step reads and writes under one output directory:

    config.yaml
    pretrain/checkpoint.safetensors, loss_trace.csv
    heads/head_selection.json, head_selection.txt
    masks/<sample id>.png, masks/index.json
    runs/<method>/seed_<n>/train_log.csv, result.json, model.safetensors
    results.csv
    report/report.txt, report.json, panels/*.png
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from age_kit import CLASSES
from age_kit.attnmap import (HeadSelectionReport, extract_batched, make_mask, mask_recall, masks_for,
                             read_mask_cache, select_head, write_mask_cache)
from age_kit.config import ExperimentConfig, dump_config
from age_kit.dataset import (SPLITS, VINDR_COUNTS, ImageSample, generate_phantom_dataset, load_manifest,
                             load_samples, resize_and_normalize, scaled_counts)
from age_kit.dino import pretrain, save_pretrain_checkpoint, write_loss_trace
from age_kit.downstream import TrainConfig, evaluate, save_classifier, train_classifier
from age_kit.erase import apply_age
from age_kit.errors import DataError
from age_kit.evalstat import (RunResult, build_report, method_key, parse_method_key, read_results_csv,
                              write_results_csv)
from age_kit.vit import file_sha256, load_backbone
from age_kit.viz import panel, save_rgb

log = logging.getLogger(__name__)


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    config = property(lambda self: self.root / "config.yaml")
    checkpoint = property(lambda self: self.root / "pretrain" / "checkpoint.safetensors")
    loss_trace = property(lambda self: self.root / "pretrain" / "loss_trace.csv")
    head_report = property(lambda self: self.root / "heads" / "head_selection.json")
    masks = property(lambda self: self.root / "masks")
    runs = property(lambda self: self.root / "runs")
    results = property(lambda self: self.root / "results.csv")
    report = property(lambda self: self.root / "report")

    def run_dir(self, key, seed):
        return self.runs / key / f"seed_{seed}"


def phantom_counts(cfg: ExperimentConfig):
    """Per-split class counts scaled from the VinDr-Mammo distribution."""
    pc = cfg.dataset.phantom
    return {split: scaled_counts(getattr(pc, split), VINDR_COUNTS[split], pc.min_per_class) for split in SPLITS}


@lru_cache(maxsize=4)
def _phantoms(seed, counts_key, image_size, mlo_fraction):
    counts = {s: dict(c) for s, c in counts_key}
    return generate_phantom_dataset(seed, counts, image_size, mlo_fraction)


def load_dataset(cfg: ExperimentConfig):
    """Returns ({split: [ImageSample]}, {id: truth mask or None})."""
    size, patch = cfg.vit.image_size, cfg.vit.patch_size
    if cfg.dataset.source == "manifest":
        manifest = load_manifest(cfg.dataset.manifest)
        return {s: load_samples(manifest, s, size, patch) for s in SPLITS}, {}
    pc = cfg.dataset.phantom
    counts = phantom_counts(cfg)
    key = tuple((s, tuple(sorted(c.items()))) for s, c in counts.items())
    splits = {s: [] for s in SPLITS}
    truth = {}
    for split, sample, spec in _phantoms(pc.seed, key, pc.image_size, pc.mlo_fraction):
        splits[split].append(resize_and_normalize(sample, size, patch))
        t = spec.truth_mask
        if t.shape != (size, size):
            t = np.asarray(Image.fromarray(t.astype(np.uint8) * 255).resize((size, size), Image.NEAREST)) > 127
        truth[sample.id] = t
    return splits, truth


def _save_config(cfg, layout):
    layout.root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, layout.config)


def run_pretrain(cfg: ExperimentConfig, layout: Layout):
    _save_config(cfg, layout)
    splits, _ = load_dataset(cfg)
    train = splits["train"]
    if not train:
        raise DataError("the training split is empty")
    result = pretrain([s.pixels for s in train], cfg.dino, cfg.vit, seed=cfg.pretrain_seed,
                      sample_ids=[s.id for s in train])
    save_pretrain_checkpoint(layout.checkpoint, result, cfg.vit, cfg.dino)
    write_loss_trace(layout.loss_trace, result.loss_trace)
    log.info("pretrained %d steps, best step %d", len(result.loss_trace), result.best_step)
    return layout.checkpoint


def _checkpoint(layout, checkpoint):
    path = Path(checkpoint) if checkpoint else layout.checkpoint
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path} (run `age-kit pretrain` first)")
    return path


def run_select_head(cfg: ExperimentConfig, layout: Layout, checkpoint=None):
    _save_config(cfg, layout)
    model, _, _ = load_backbone(_checkpoint(layout, checkpoint))
    splits, _ = load_dataset(cfg)
    report = select_head(model, splits["train"], cfg.head_selection)
    layout.head_report.parent.mkdir(parents=True, exist_ok=True)
    layout.head_report.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    layout.head_report.with_suffix(".txt").write_text(report.to_text())
    return report


def run_build_masks(cfg: ExperimentConfig, layout: Layout, checkpoint=None, head=None):
    """Masks for every training sample; ``head`` is 0-based (default: the selected head)."""
    _save_config(cfg, layout)
    ckpt = _checkpoint(layout, checkpoint)
    model, _, _ = load_backbone(ckpt)
    if head is None:
        if not layout.head_report.is_file():
            raise DataError("no head selection report; run `age-kit select-head` or pass --head")
        head = HeadSelectionReport.from_dict(json.loads(layout.head_report.read_text())).selected_head
    if not 0 <= head < cfg.vit.num_heads:
        raise DataError(f"head {head + 1} out of range 1..{cfg.vit.num_heads}")
    splits, truth = load_dataset(cfg)
    masks = masks_for(model, splits["train"], head, cfg.mask.threshold, cfg.mask.dilation_cells)
    meta = {"source_head": head, "tau_mask": cfg.mask.threshold,
            "tau_act": cfg.head_selection.activation_threshold, "dilation_cells": cfg.mask.dilation_cells,
            "patch_size": cfg.vit.patch_size, "checkpoint_sha256": file_sha256(ckpt)}
    if truth:
        recalls = [mask_recall(masks[i], truth[i]) for i in masks]
        meta["truth_recall_mean"] = float(np.mean(recalls))
        meta["truth_recall_floor"] = cfg.mask.recall_floor
        meta["truth_recall_above_floor"] = bool(meta["truth_recall_mean"] > cfg.mask.recall_floor)
        if not meta["truth_recall_above_floor"]:
            log.warning("mean truth recall %.3f is below the floor %.2f", meta["truth_recall_mean"],
                        cfg.mask.recall_floor)
        meta["foreground_fraction_mean"] = float(np.mean([m.pixel_mask.mean() for m in masks.values()]))
    write_mask_cache(layout.masks, masks, meta)
    return layout.masks


def _train_config(cfg: ExperimentConfig, mode, probability, seed):
    d = cfg.downstream
    return TrainConfig(epochs=d.epochs, batch_size=d.batch_size, learning_rate=d.learning_rate,
                       weight_decay=d.weight_decay, betas=tuple(d.betas), patience=d.patience, loss=d.loss,
                       seed=seed, policy=cfg.policy(mode, probability))


def _load_masks(layout, ckpt):
    masks, index = read_mask_cache(layout.masks)
    recorded = index.get("checkpoint_sha256")
    if recorded is not None and recorded != file_sha256(ckpt):
        raise DataError(f"masks in {layout.masks} were built from a different checkpoint; rerun build-masks")
    return masks


def run_train(cfg: ExperimentConfig, layout: Layout, mode, probability, seed, checkpoint=None,
              splits=None, masks=None):
    """One (method, seed) run; writes its log, model and result.json."""
    ckpt = _checkpoint(layout, checkpoint)
    backbone, _, _ = load_backbone(ckpt)
    if splits is None:
        splits, _ = load_dataset(cfg)
    if mode == "AGE" and masks is None:
        masks = _load_masks(layout, ckpt)
    tc = _train_config(cfg, mode, probability, seed)
    model, train_log = train_classifier(splits["train"], splits["val"], backbone, tc,
                                        masks if mode == "AGE" else None)
    cm, _ = evaluate(model, splits["test"])
    result = RunResult(mode, float(probability), seed, cm)
    out = layout.run_dir(result.key, seed)
    out.mkdir(parents=True, exist_ok=True)
    train_log.write_csv(out / "train_log.csv")
    save_classifier(out / "model.safetensors", model, {"method": result.key, "seed": seed})
    (out / "result.json").write_text(json.dumps(result.to_json(), indent=2) + "\n")
    return result


def run_sweep(cfg: ExperimentConfig, layout: Layout, checkpoint=None, resume=True):
    """Train every (mode, P) x seed, skipping completed runs when resuming."""
    _save_config(cfg, layout)
    ckpt = _checkpoint(layout, checkpoint)
    needs_masks = any(m == "AGE" for m, _ in cfg.sweep)
    masks = None
    if needs_masks:
        masks = _load_masks(layout, ckpt)
    splits, _ = load_dataset(cfg)
    results = []
    for mode, p in cfg.sweep:
        for seed in cfg.seeds:
            done = layout.run_dir(method_key(mode, p), seed) / "result.json"
            if resume and done.is_file():
                results.append(RunResult.from_json(json.loads(done.read_text())))
                continue
            log.info("training %s seed %d", method_key(mode, p), seed)
            results.append(run_train(cfg, layout, mode, p, seed, ckpt, splits, masks))
    write_results_csv(layout.results, results)
    return results


def default_comparisons(keys):
    comps = [(k, "none") for k in keys if k != "none" and "none" in keys]
    for k in keys:
        mode, p = parse_method_key(k)
        if mode == "AGE" and method_key("RE", p) in keys:
            comps.append((k, method_key("RE", p)))
    return comps


def run_report(layout: Layout, variant="pooled", panels=4):
    if not layout.results.is_file():
        raise DataError(f"no results at {layout.results} (run `age-kit sweep` first)")
    rows = read_results_csv(layout.results)
    if not rows:
        raise DataError(f"{layout.results} has no result rows")
    runs = {}
    for r in rows:
        runs.setdefault(method_key(r["method"], float(r["P"])), []).append(float(r["macro_f1"]))
    report = build_report(runs, default_comparisons(list(runs)), variant)
    layout.report.mkdir(parents=True, exist_ok=True)
    (layout.report / "report.txt").write_text(report.to_text())
    (layout.report / "report.json").write_text(report.to_json() + "\n")
    if panels and layout.config.is_file() and layout.checkpoint.is_file() and (layout.masks / "index.json").is_file():
        from age_kit.config import load_config

        write_panels(load_config(layout.config), layout, layout.report / "panels", panels)
    return report


def write_panels(cfg, layout, directory, count=4):
    """Original / attention overlay / mask / erased strips for a few training images."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model, _, _ = load_backbone(layout.checkpoint)
    masks, index = read_mask_cache(layout.masks)
    splits, _ = load_dataset(cfg)
    chosen = [s for s in splits["train"] if s.id in masks][:count]
    maps = extract_batched(model, [s.pixels for s in chosen])
    paths = []
    for s, m in zip(chosen, maps):
        mask = masks[s.id]
        erased = apply_age(s.pixels, mask, cfg.downstream.fill_value)
        path = directory / f"{s.id}.png"
        save_rgb(path, panel(s.pixels, m.maps[index["source_head"]], mask.pixel_mask, erased))
        paths.append(path)
    return paths
