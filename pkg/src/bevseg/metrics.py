"""IoU accumulation, distance-band profiles, and the latency benchmark.

Counting is integer-exact: predictions are binarized (or argmaxed) and
TP/FP/FN land in 64-bit counters, optionally restricted to distance bands.
IoU for a class nobody predicted and nobody labeled is *undefined* and is
excluded from means rather than silently counted as zero.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from bevseg.autodiff.tensor import Tensor
from bevseg.errors import ConfigError
from bevseg.grid import CANONICAL_CLASSES

DIVIDER_CLASSES = ("road_divider", "lane_divider")


class ConfusionAccumulator:
    """Per-class (and optionally per-band) TP/FP/FN counters."""

    def __init__(self, num_classes: int, threshold: float = 0.5,
                 class_names: tuple | None = None, band_masks: list | None = None,
                 mode: str = "threshold"):
        if num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if mode not in ("threshold", "argmax"):
            raise ConfigError(f"unknown binarization mode {mode!r}")
        if class_names is not None and len(class_names) != num_classes:
            raise ConfigError("class_names length must match num_classes")
        self.num_classes = num_classes
        self.threshold = float(threshold)
        self.class_names = tuple(class_names) if class_names is not None else None
        self.mode = mode
        self.tp = np.zeros(num_classes, dtype=np.int64)
        self.fp = np.zeros(num_classes, dtype=np.int64)
        self.fn = np.zeros(num_classes, dtype=np.int64)
        self.band_masks = [np.asarray(b, dtype=bool) for b in band_masks] if band_masks else None
        nb = len(self.band_masks) if self.band_masks else 0
        self.band_tp = np.zeros((nb, num_classes), dtype=np.int64)
        self.band_fp = np.zeros((nb, num_classes), dtype=np.int64)
        self.band_fn = np.zeros((nb, num_classes), dtype=np.int64)

    # -- accumulation -------------------------------------------------------
    def update(self, probs, gt) -> "ConfusionAccumulator":
        p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
        g = np.asarray(gt)
        if p.shape != g.shape or p.ndim != 3 or p.shape[0] != self.num_classes:
            raise ValueError(f"expected matching ({self.num_classes}, H, W) stacks, "
                             f"got {p.shape} and {g.shape}")
        if self.mode == "argmax":
            pred = np.zeros_like(g, dtype=bool)
            np.put_along_axis(pred, p.argmax(axis=0)[None], True, axis=0)
        else:
            pred = p >= self.threshold
        gb = g > 0.5
        tp_map = pred & gb
        fp_map = pred & ~gb
        fn_map = ~pred & gb
        self.tp += tp_map.sum(axis=(1, 2))
        self.fp += fp_map.sum(axis=(1, 2))
        self.fn += fn_map.sum(axis=(1, 2))
        if self.band_masks is not None:
            for bi, bm in enumerate(self.band_masks):
                if bm.shape != p.shape[1:]:
                    raise ValueError("band mask shape does not match the grids")
                self.band_tp[bi] += (tp_map & bm).sum(axis=(1, 2))
                self.band_fp[bi] += (fp_map & bm).sum(axis=(1, 2))
                self.band_fn[bi] += (fn_map & bm).sum(axis=(1, 2))
        return self

    def merged(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if (other.num_classes != self.num_classes or other.threshold != self.threshold
                or other.mode != self.mode):
            raise ValueError("cannot merge accumulators with different settings")
        out = ConfusionAccumulator(self.num_classes, self.threshold, self.class_names,
                                   self.band_masks, self.mode)
        out.tp = self.tp + other.tp
        out.fp = self.fp + other.fp
        out.fn = self.fn + other.fn
        out.band_tp = self.band_tp + other.band_tp
        out.band_fp = self.band_fp + other.band_fp
        out.band_fn = self.band_fn + other.band_fn
        return out


def accumulate_confusion(acc: ConfusionAccumulator, probs, gt) -> ConfusionAccumulator:
    return acc.update(probs, gt)


def _iou_from_counts(tp, fp, fn) -> np.ndarray:
    denom = tp + fp + fn
    with np.errstate(invalid="ignore"):
        vals = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    return vals


def iou(acc: ConfusionAccumulator) -> np.ndarray:
    """Per-class IoU; NaN marks classes that never appeared (undefined)."""
    return _iou_from_counts(acc.tp, acc.fp, acc.fn)


def _divider_indices(acc: ConfusionAccumulator) -> tuple[int, int]:
    names = acc.class_names or CANONICAL_CLASSES
    try:
        return names.index(DIVIDER_CLASSES[0]), names.index(DIVIDER_CLASSES[1])
    except ValueError:
        raise ConfigError("divider merge needs both divider classes present") from None


def miou(acc: ConfusionAccumulator, merge_dividers: bool = False) -> float:
    """Mean IoU over defined classes (Eq.-free summary: TP/(TP+FP+FN) per class).

    ``merge_dividers`` adds the two divider classes' counts together first,
    reporting a 6-way mean on the canonical 7-class layout.
    """
    tp, fp, fn = acc.tp, acc.fp, acc.fn
    if merge_dividers:
        i, j = _divider_indices(acc)
        keep = [k for k in range(acc.num_classes) if k != j]
        tp = tp.copy(); fp = fp.copy(); fn = fn.copy()
        tp[i] += tp[j]; fp[i] += fp[j]; fn[i] += fn[j]
        tp, fp, fn = tp[keep], fp[keep], fn[keep]
    vals = _iou_from_counts(tp, fp, fn)
    if np.isnan(vals).all():
        return float("nan")
    return float(np.nanmean(vals))


def band_iou(acc: ConfusionAccumulator) -> np.ndarray:
    if acc.band_masks is None:
        raise ConfigError("accumulator was built without band masks")
    return _iou_from_counts(acc.band_tp, acc.band_fp, acc.band_fn)


def band_miou(acc: ConfusionAccumulator) -> np.ndarray:
    vals = band_iou(acc)
    out = np.full(vals.shape[0], np.nan)
    for bi in range(vals.shape[0]):
        if not np.isnan(vals[bi]).all():
            out[bi] = np.nanmean(vals[bi])
    return out


# ---------------------------------------------------------------------------
# distance profiles


def distance_profile(acc: ConfusionAccumulator, edges, mode: str = "annulus") -> list[dict]:
    """Rows of (band bounds, per-class IoU, band mIoU) for a banded accumulator."""
    edges = [float(e) for e in edges]
    if acc.band_masks is None or len(acc.band_masks) != len(edges):
        raise ConfigError("accumulator bands do not match the edge list")
    if mode not in ("annulus", "cumulative"):
        raise ConfigError(f"unknown band mode {mode!r}")
    names = acc.class_names or tuple(f"class_{i}" for i in range(acc.num_classes))
    per_band = band_iou(acc)
    per_band_mean = band_miou(acc)
    rows = []
    lo = 0.0
    for bi, hi in enumerate(edges):
        rows.append({
            "band_lo_m": lo if mode == "annulus" else 0.0,
            "band_hi_m": hi,
            "iou": {n: per_band[bi, ci] for ci, n in enumerate(names)},
            "miou": float(per_band_mean[bi]),
        })
        if mode == "annulus":
            lo = hi
    return rows


def write_distance_profile_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["band_lo_m", "band_hi_m", "class", "IoU", "mIoU"])
        for r in rows:
            for name, val in r["iou"].items():
                w.writerow([r["band_lo_m"], r["band_hi_m"], name,
                            "" if np.isnan(val) else f"{val:.6f}", f"{r['miou']:.6f}"])


def write_per_class_iou_csv(path, acc: ConfusionAccumulator) -> None:
    names = acc.class_names or tuple(f"class_{i}" for i in range(acc.num_classes))
    vals = iou(acc)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "IoU"])
        for n, v in zip(names, vals):
            w.writerow([n, "" if np.isnan(v) else f"{v:.6f}"])


# ---------------------------------------------------------------------------
# latency benchmark


@dataclass
class BenchReport:
    warmup_iters: int
    timed_iters: int
    mean_ms: float
    std_ms: float

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms


def benchmark_forward(model, input_shape: tuple, warmup: int = 100, iters: int = 900,
                      dtype=np.float32, seed: int = 0) -> BenchReport:
    """Wall-clock eval-mode forward latency over a fixed random input.

    Times only the forward call (no tape, no I/O), single-threaded, after
    ``warmup`` discarded iterations.
    """
    if iters < 1:
        raise ConfigError("timed iteration count must be positive")
    if warmup < 0:
        raise ConfigError("warmup must be non-negative")
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=input_shape).astype(dtype))
    for _ in range(warmup):
        model(x, training=False)
    samples = np.empty(iters)
    for i in range(iters):
        t0 = time.perf_counter()
        model(x, training=False)
        samples[i] = time.perf_counter() - t0
    return BenchReport(warmup_iters=warmup, timed_iters=iters,
                       mean_ms=float(samples.mean() * 1e3), std_ms=float(samples.std() * 1e3))


def write_bench_csv(path, reports: dict[str, BenchReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "mean_ms", "std_ms", "fps"])
        for name, r in reports.items():
            w.writerow([name, f"{r.mean_ms:.4f}", f"{r.std_ms:.4f}", f"{r.fps:.2f}"])
