"""Classification metrics, multi-seed aggregation and unpaired t-tests.

The t distribution tail is evaluated through a continued-fraction
regularised incomplete beta function, so this module needs nothing beyond
numpy and the standard library.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from age_kit import CLASSES
from age_kit.errors import DataError

RESULT_FIELDS = ("method", "P", "seed", "macro_f1") + tuple(f"f1_{c}" for c in CLASSES)


def confusion_matrix(y_true, y_pred, num_classes=len(CLASSES)):
    """Count matrix with rows = truth and columns = prediction."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred must have the same shape")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def macro_f1(confusion):
    """Per-class F1 scores and their unweighted mean.

    A class with TP = 0 scores 0, including a class absent from both the
    truth and the predictions; every class still counts toward the mean.

    Returns
    -------
    per_class : numpy.ndarray
    macro : float
    """
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix has negative counts")
    if cm.sum() <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    per_class = np.zeros(cm.shape[0])
    hit = tp > 0
    # 2PR/(P+R) == 2TP/(2TP+FP+FN)
    per_class[hit] = 2 * tp[hit] / (2 * tp[hit] + fp[hit] + fn[hit])
    return per_class, float(per_class.mean())


def majority_baseline_f1(labels, num_classes=len(CLASSES)):
    """Macro F1 of always predicting the most frequent label."""
    labels = np.asarray(labels)
    majority = np.bincount(labels, minlength=num_classes).argmax()
    return macro_f1(confusion_matrix(labels, np.full_like(labels, majority), num_classes))[1]


@dataclass
class RunResult:
    method: str
    probability: float
    seed: int
    confusion: np.ndarray
    per_class_f1: np.ndarray = field(init=False)
    macro_f1: float = field(init=False)

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        self.per_class_f1, self.macro_f1 = macro_f1(self.confusion)

    @property
    def key(self):
        return method_key(self.method, self.probability)

    def to_row(self):
        row = {"method": self.method, "P": f"{self.probability:g}", "seed": self.seed,
               "macro_f1": f"{self.macro_f1:.10f}"}
        for c, f in zip(CLASSES, self.per_class_f1):
            row[f"f1_{c}"] = f"{f:.10f}"
        return row

    def to_json(self):
        return {"method": self.method, "P": self.probability, "seed": self.seed,
                "confusion": self.confusion.tolist(), "macro_f1": self.macro_f1,
                "per_class_f1": self.per_class_f1.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(d["method"], float(d["P"]), int(d["seed"]), np.asarray(d["confusion"]))


def method_key(mode, probability):
    return "none" if mode == "none" else f"{mode}@{probability:g}"


def parse_method_key(key):
    if key == "none":
        return "none", 0.0
    mode, _, p = key.partition("@")
    return mode, float(p)


def aggregate_runs(results):
    """Mean and sample (n-1) standard deviation of macro F1 scores.

    Accepts RunResult objects or bare floats.
    """
    scores = np.array([r.macro_f1 if isinstance(r, RunResult) else float(r) for r in results])
    if scores.size < 2:
        raise ValueError("need at least 2 runs for a sample standard deviation")
    return float(scores.mean()), float(scores.std(ddof=1))


# --- t distribution -------------------------------------------------------

def _betacf(a, b, x, max_iter=500, eps=1e-16):
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def betainc(a, b, x):
    """Regularised incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t, df):
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc(0.5 * df, 0.5, df / (df + t * t)))


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: float
    p_value: float
    variant: str
    degenerate: bool = False


def unpaired_ttest(a, b, variant="pooled"):
    """Two-tailed unpaired t-test (pooled-variance Student or Welch)."""
    if variant not in ("pooled", "welch"):
        raise ValueError(f"unknown t-test variant {variant!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise ValueError("each sample needs at least 2 observations")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if variant == "pooled":
        df = float(na + nb - 2)
        sp2 = ((na - 1) * va + (nb - 1) * vb) / df
        se2 = sp2 * (1.0 / na + 1.0 / nb)
    else:
        qa, qb = va / na, vb / nb
        se2 = qa + qb
        df = float(se2 ** 2 / (qa ** 2 / (na - 1) + qb ** 2 / (nb - 1))) if se2 > 0 else float(na + nb - 2)
    diff = ma - mb
    if se2 == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, df, 1.0, variant, degenerate=True)
        return TTestResult(math.copysign(math.inf, diff), df, 0.0, variant, degenerate=True)
    t = float(diff / math.sqrt(se2))
    return TTestResult(t, df, t_two_sided_p(t, df), variant)


# --- reporting -------------------------------------------------------------

def write_results_csv(path, results: Sequence[RunResult]):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in results:
            writer.writerow(r.to_row())


def read_results_csv(path):
    """Rows of a results CSV as (method key, seed, macro_f1) dicts."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(RESULT_FIELDS) - set(rows[0].keys()) if rows else set()
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    return rows


@dataclass
class Report:
    summary: dict            # method key -> {"mean", "std", "n", "scores"}
    comparisons: list        # dicts with a, b, t, df, p, variant
    best: str
    probabilities: list

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def cell(self, key):
        s = self.summary.get(key)
        if s is None:
            return "-"
        mark = "*" if key == self.best else " "
        std = f"{s['std']:.3f}" if s["std"] is not None else "n/a"
        return f"{s['mean']:.4f} ({std}){mark}"

    def to_text(self):
        lines = ["Macro F1, mean (sample std) over seeds; * marks the best cell", ""]
        if "none" in self.summary:
            lines.append(f"{'No erasing':<14}{self.cell('none')}")
        grid_modes = [m for m in ("RE", "AGE") if any(parse_method_key(k)[0] == m for k in self.summary)]
        if grid_modes:
            lines.append(f"{'P':<14}" + "".join(f"{m:<22}" for m in grid_modes))
            for p in self.probabilities:
                lines.append(f"{p:<14g}" + "".join(f"{self.cell(method_key(m, p)):<22}" for m in grid_modes))
        others = [k for k in self.summary if k != "none" and parse_method_key(k)[0] not in ("RE", "AGE")]
        for k in others:
            lines.append(f"{k:<14}{self.cell(k)}")
        if self.comparisons:
            lines += ["", "Two-tailed unpaired t-tests"]
            for c in self.comparisons:
                lines.append(f"  {c['a']} vs {c['b']}: t={c['t']:.4f} df={c['df']:.2f} "
                             f"p={c['p']:.3g} ({c['variant']})")
        return "\n".join(lines) + "\n"


def build_report(runs: Mapping[str, Sequence], comparisons=None, variant="pooled"):
    """Summarise per-method runs into a mean (std) grid plus t-tests.

    ``runs`` maps method keys ("none", "RE@0.2", "AGE@0.6", ...) to lists
    of RunResult or macro F1 floats. ``comparisons`` is a list of key
    pairs; the default compares every pair.
    """
    if not runs:
        raise ValueError("no runs to report")
    counts = {k: len(v) for k, v in runs.items()}
    if len(set(counts.values())) != 1:
        raise ValueError(f"methods have unequal run counts: {counts}")
    scores = {k: [r.macro_f1 if isinstance(r, RunResult) else float(r) for r in v]
              for k, v in runs.items()}
    summary = {}
    for k, s in scores.items():
        arr = np.asarray(s)
        summary[k] = {"mean": float(arr.mean()),
                      "std": float(arr.std(ddof=1)) if arr.size > 1 else None,
                      "n": int(arr.size), "scores": [float(x) for x in s]}
    best = max(summary, key=lambda k: summary[k]["mean"])
    if comparisons is None:
        comparisons = list(combinations(list(runs), 2))
    tests = []
    for a, b in comparisons:
        if a not in scores or b not in scores:
            raise KeyError(f"comparison ({a}, {b}) names an unknown method")
        res = unpaired_ttest(scores[a], scores[b], variant)
        tests.append({"a": a, "b": b, "t": res.t_statistic, "df": res.degrees_of_freedom,
                      "p": res.p_value, "variant": variant, "degenerate": res.degenerate})
    probs = sorted({parse_method_key(k)[1] for k in runs if k != "none"})
    return Report(summary, tests, best, probs)
