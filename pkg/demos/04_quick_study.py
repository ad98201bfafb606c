"""A small end-to-end comparison of no erasing, RE and AGE on phantoms.

Same steps the CLI runs (pretrain, select-head, build-masks, sweep, report)
but shrunk so it finishes in a few minutes on one core.
"""
import dataclasses
import json
from pathlib import Path

from age_kit import pipeline
from age_kit.config import quick_profile

cfg = quick_profile()
cfg = dataclasses.replace(
    cfg,
    dataset=dataclasses.replace(cfg.dataset, phantom=dataclasses.replace(cfg.dataset.phantom,
                                                                         train=300, val=100, test=100)),
    dino=dataclasses.replace(cfg.dino, epochs=10),
    downstream=dataclasses.replace(cfg.downstream, epochs=8),
)
layout = pipeline.Layout(Path(__file__).parent / "out" / "quick-study")

pipeline.run_pretrain(cfg, layout)
print("selected head", pipeline.run_select_head(cfg, layout).selected_head + 1)
meta = json.loads((pipeline.run_build_masks(cfg, layout) / "index.json").read_text())
print("mask recall of the dense truth: %.2f" % meta["truth_recall_mean"])

pipeline.run_sweep(cfg, layout, resume=False)
report = pipeline.run_report(layout, cfg.ttest_variant, panels=2)
print(report.to_text())
