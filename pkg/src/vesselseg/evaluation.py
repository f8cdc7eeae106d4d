"""Metrics, ROC/AUC, deterministic split plans, and report emission.

Fold assignment is fully specified so plans are reproducible across
machines: per dataset, ids are sorted, shuffled by a SplitMix64-driven
Fisher-Yates (stream seeded by seed XOR FNV-1a64(dataset tag)), and dealt
round-robin into k folds.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .imagefiles import ManifestRow

_U64 = 0xFFFFFFFFFFFFFFFF


# --- confusion counts and threshold metrics ----------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred: np.ndarray, g: np.ndarray) -> ConfusionCounts:
    """Exact integer counts; both inputs must be binary and same-shape."""
    pred = np.asarray(pred)
    g = np.asarray(g)
    if pred.shape != g.shape:
        raise ValueError(f"confusion: shape mismatch {pred.shape} vs {g.shape}")
    for name, arr in (("pred", pred), ("g", g)):
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"confusion: {name} is not binary (values {vals[:5]}...)")
    p = pred.astype(bool)
    t = g.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def dice_score(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0  # no vessel pixels anywhere and none predicted
    return 2.0 * c.tp / denom


def sensitivity(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        return 1.0 if c.fp == 0 else 0.0  # vessel class absent
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        return 1.0 if c.fn == 0 else 0.0  # background class absent
    return c.tn / (c.tn + c.fp)


# --- ROC ----------------------------------------------------------------------

def roc_points(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) at every distinct score threshold, from (0,0) to (1,1).

    Equal scores are grouped, which makes the trapezoidal area equal to the
    tie-corrected rank-sum statistic.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos = int(np.count_nonzero(y))
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("roc_points: need at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    cum_tp = np.cumsum(y_sorted)
    cum_fp = np.cumsum(~y_sorted)
    # keep only the last index of each tie group
    last = np.nonzero(np.append(np.diff(s_sorted) != 0, True))[0]
    tpr = np.concatenate([[0.0], cum_tp[last] / pos])
    fpr = np.concatenate([[0.0], cum_fp[last] / neg])
    return fpr, tpr


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Trapezoidal area under the ROC curve; NaN when labels are one-class."""
    y = np.asarray(labels).ravel().astype(bool)
    if y.all() or not y.any():
        return float("nan")
    fpr, tpr = roc_points(scores, labels)
    return float(np.trapezoid(tpr, fpr))


# --- model inference -----------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def predict_image(model, four: np.ndarray, use_tta: bool = False
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Probability map and binary mask for one preprocessed 4-channel input.

    With TTA the input is expanded over the 8 dihedral orientations, each
    prediction is inverse-transformed, and the probabilities are averaged.
    The mask applies the inclusive threshold prob >= 0.5.
    """
    from .augment import D4_TRANSFORMS, tta_fold
    from .engine import Tensor

    def single(arr: np.ndarray) -> np.ndarray:
        out = model.forward(Tensor(arr[None].astype(model.dtype)), training=False)
        return _sigmoid_np(out.fused.data[0, 0].astype(np.float64))

    if use_tta:
        probs = [single(t.apply(four)) for t in D4_TRANSFORMS]
        prob = tta_fold(probs)
    else:
        prob = single(four)
    return prob, (prob >= 0.5).astype(np.uint8)


# --- deterministic splits --------------------------------------------------------

def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _U64
    return h


class SplitMix64:
    """Tiny deterministic stream; identical across platforms."""

    def __init__(self, seed: int):
        self.state = seed & _U64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _U64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
        return z ^ (z >> 31)


def qualified_id(row: ManifestRow) -> str:
    """Fold ids carry the dataset tag so basenames may repeat across sets."""
    return f"{row.dataset}/{row.image_id}"


def _shuffled_ids(rows: list[ManifestRow], dataset: str, seed: int,
                  label: str = "") -> list[str]:
    ids = sorted(qualified_id(r) for r in rows if r.dataset == dataset)
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate image ids in dataset {dataset!r}")
    stream = SplitMix64(seed ^ fnv1a64((dataset + label).encode("utf-8")))
    for i in range(len(ids) - 1, 0, -1):
        j = stream.next() % (i + 1)
        ids[i], ids[j] = ids[j], ids[i]
    return ids


@dataclass
class FoldPlan:
    seed: int
    k: int
    held_out: list[list[str]] = field(default_factory=list)
    train: list[list[str]] = field(default_factory=list)


def make_folds(rows: list[ManifestRow], k: int = 5, seed: int = 42) -> FoldPlan:
    """Dataset-stratified k-fold partition.

    Every image lands in exactly one held-out fold; per dataset the fold
    sizes differ by at most one.
    """
    datasets = sorted({r.dataset for r in rows})
    for d in datasets:
        n = sum(1 for r in rows if r.dataset == d)
        if n < k:
            raise ValueError(f"make_folds: dataset {d!r} has {n} images, fewer than k={k}")
    held: list[list[str]] = [[] for _ in range(k)]
    for d in datasets:
        for idx, image_id in enumerate(_shuffled_ids(rows, d, seed)):
            held[idx % k].append(image_id)
    all_ids = [qualified_id(r) for r in rows]
    train = [sorted(set(all_ids) - set(h)) for h in held]
    return FoldPlan(seed=seed, k=k, held_out=[sorted(h) for h in held], train=train)


@dataclass
class LodoPlan:
    test_dataset: str
    test: list[str]
    train: list[str]
    val: list[str]   # early-stopping slice carved from the training pool


def make_lodo(rows: list[ManifestRow], seed: int = 42,
              val_fraction: float = 0.2) -> list[LodoPlan]:
    """Three leave-one-dataset-out plans.

    The held-out dataset never appears in training or validation; the
    validation slice takes ~20% of each remaining dataset.
    """
    datasets = sorted({r.dataset for r in rows})
    if len(datasets) != 3:
        raise ValueError(f"make_lodo: expected exactly 3 datasets, got {datasets}")
    plans = []
    for test_ds in datasets:
        test = sorted(qualified_id(r) for r in rows if r.dataset == test_ds)
        train: list[str] = []
        val: list[str] = []
        for d in datasets:
            if d == test_ds:
                continue
            ids = _shuffled_ids(rows, d, seed, label="|lodo-val")
            n_val = max(1, round(val_fraction * len(ids)))
            val.extend(ids[:n_val])
            train.extend(ids[n_val:])
        plans.append(LodoPlan(test_dataset=test_ds, test=test,
                              train=sorted(train), val=sorted(val)))
    return plans


# --- reporting -------------------------------------------------------------------

@dataclass
class ImageMetrics:
    dataset: str
    image_id: str
    dice: float
    sensitivity: float
    specificity: float
    auc: float  # NaN when undefined (single-class ground truth)


def mean_sd(values: list[float]) -> tuple[float, float, bool]:
    """Mean and n-1 standard deviation; flag marks a degenerate sample."""
    if not values:
        raise ValueError("mean_sd: empty input")
    m = float(np.mean(values))
    if len(values) < 2:
        return m, 0.0, True
    return m, float(np.std(values, ddof=1)), False


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.10f}"


def write_report(per_image: list[ImageMetrics], out_dir: str,
                 fold_labels: dict[str, str] | None = None,
                 missing: list[str] | None = None) -> dict:
    """Per-image rows plus per-dataset / per-fold / overall aggregates.

    Emits ``per_image.tsv``, ``summary.tsv``, and a readable
    ``summary.txt``; returns the aggregate structure for callers.
    """
    os.makedirs(out_dir, exist_ok=True)
    fold_labels = fold_labels or {}
    rows = sorted(per_image, key=lambda r: (r.dataset, r.image_id))

    with open(os.path.join(out_dir, "per_image.tsv"), "w", encoding="utf-8") as fh:
        fh.write("dataset\timage\tfold\tdice\tsensitivity\tspecificity\tauc\n")
        for r in rows:
            fh.write(f"{r.dataset}\t{r.image_id}\t{fold_labels.get(r.image_id, '-')}\t"
                     f"{_fmt(r.dice)}\t{_fmt(r.sensitivity)}\t{_fmt(r.specificity)}\t{_fmt(r.auc)}\n")

    def aggregate(subset: list[ImageMetrics]) -> dict:
        out = {}
        for metric in ("dice", "sensitivity", "specificity", "auc"):
            vals = [getattr(r, metric) for r in subset
                    if not math.isnan(getattr(r, metric))]
            if vals:
                m, sd, degenerate = mean_sd(vals)
                out[metric] = {"mean": m, "sd": sd, "n": len(vals), "degenerate": degenerate}
        return out

    groups: dict[str, dict] = {"overall": aggregate(rows)}
    for d in sorted({r.dataset for r in rows}):
        groups[f"dataset:{d}"] = aggregate([r for r in rows if r.dataset == d])
    for f in sorted({fold_labels[r.image_id] for r in rows if r.image_id in fold_labels}):
        groups[f"fold:{f}"] = aggregate(
            [r for r in rows if fold_labels.get(r.image_id) == f])

    with open(os.path.join(out_dir, "summary.tsv"), "w", encoding="utf-8") as fh:
        fh.write("group\tmetric\tmean\tsd\tn\tdegenerate\n")
        for gname, metrics in groups.items():
            for metric, stats in metrics.items():
                fh.write(f"{gname}\t{metric}\t{stats['mean']:.6f}\t{stats['sd']:.6f}\t"
                         f"{stats['n']}\t{int(stats['degenerate'])}\n")

    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"images evaluated: {len(rows)}\n")
        if missing:
            fh.write(f"MISSING ({len(missing)}): {', '.join(missing)}\n")
        for gname, metrics in groups.items():
            fh.write(f"\n[{gname}]\n")
            for metric, stats in metrics.items():
                flag = " (single sample)" if stats["degenerate"] else ""
                fh.write(f"  {metric:12s} {100 * stats['mean']:6.2f} +- "
                         f"{100 * stats['sd']:.2f}  (n={stats['n']}){flag}\n")
    return groups
