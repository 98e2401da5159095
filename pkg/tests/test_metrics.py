"""IoU counting against brute force, distance bands, CSV output, benchmark."""

import csv

import numpy as np
import pytest

from bevseg.errors import ConfigError
from bevseg.grid import CANONICAL_CLASSES, distance_band_masks
from bevseg.metrics import (BenchReport, ConfusionAccumulator, accumulate_confusion,
                            band_iou, band_miou, benchmark_forward, distance_profile,
                            iou, miou, write_bench_csv, write_distance_profile_csv,
                            write_per_class_iou_csv)

EDGES = (10.0, 20.0, 30.0, 40.0, 50.0)


def brute_counts(probs, gt, threshold):
    """Reference TP/FP/FN, one honest pass over every cell."""
    c = probs.shape[0]
    tp = np.zeros(c, dtype=np.int64)
    fp = np.zeros(c, dtype=np.int64)
    fn = np.zeros(c, dtype=np.int64)
    for ci in range(c):
        for y in range(probs.shape[1]):
            for x in range(probs.shape[2]):
                pred = probs[ci, y, x] >= threshold
                pos = gt[ci, y, x] > 0.5
                if pred and pos:
                    tp[ci] += 1
                elif pred and not pos:
                    fp[ci] += 1
                elif not pred and pos:
                    fn[ci] += 1
    return tp, fp, fn


def brute_iou(tp, fp, fn):
    out = np.full(len(tp), np.nan)
    for ci in range(len(tp)):
        d = tp[ci] + fp[ci] + fn[ci]
        if d > 0:
            out[ci] = tp[ci] / d
    return out


class TestConfusion:
    def test_worked_single_class(self):
        probs = np.array([[[0.9, 0.8, 0.7], [0.6, 0.1, 0.2], [0.1, 0.1, 0.1]]])
        gt = np.array([[[1, 1, 1], [0, 1, 1], [0, 0, 0]]])
        acc = ConfusionAccumulator(1).update(probs, gt)
        assert acc.tp.tolist() == [3]
        assert acc.fp.tolist() == [1]
        assert acc.fn.tolist() == [2]
        np.testing.assert_allclose(iou(acc), [0.5])

    def test_two_class_mean(self):
        # class 0: TP=1, FP=2, FN=1 -> 0.25; class 1 perfect -> mean 0.625
        probs = np.zeros((2, 2, 3))
        gt = np.zeros((2, 2, 3))
        probs[0, 0] = [1.0, 1.0, 1.0]
        gt[0, 0] = [1.0, 0.0, 0.0]
        gt[0, 1, 0] = 1.0
        probs[1, 1, 1:] = 1.0
        gt[1, 1, 1:] = 1.0
        acc = ConfusionAccumulator(2).update(probs, gt)
        np.testing.assert_allclose(iou(acc), [0.25, 1.0])
        assert miou(acc) == pytest.approx(0.625)

    @pytest.mark.parametrize("trial", range(10))
    def test_matches_brute_force(self, trial):
        rng = np.random.default_rng(trial)
        c = int(rng.integers(1, 6))
        h, w = rng.integers(3, 10, 2)
        probs = rng.random((c, h, w))
        gt = (rng.random((c, h, w)) < 0.4).astype(np.uint8)
        thr = float(rng.uniform(0.3, 0.7))
        acc = ConfusionAccumulator(c, threshold=thr).update(probs, gt)
        tp, fp, fn = brute_counts(probs, gt, thr)
        np.testing.assert_array_equal(acc.tp, tp)
        np.testing.assert_array_equal(acc.fp, fp)
        np.testing.assert_array_equal(acc.fn, fn)
        np.testing.assert_allclose(iou(acc), brute_iou(tp, fp, fn))

    def test_undefined_class_is_nan_and_skipped(self):
        probs = np.zeros((2, 3, 3))
        gt = np.zeros((2, 3, 3))
        probs[0, 0, 0] = 1.0
        gt[0, 0, 0] = 1.0
        acc = ConfusionAccumulator(2).update(probs, gt)
        vals = iou(acc)
        assert vals[0] == 1.0 and np.isnan(vals[1])
        assert miou(acc) == 1.0

    def test_all_undefined_miou_is_nan(self):
        acc = ConfusionAccumulator(3)
        assert np.isnan(miou(acc))

    def test_threshold_is_inclusive(self):
        probs = np.full((1, 1, 1), 0.5)
        gt = np.ones((1, 1, 1))
        acc = ConfusionAccumulator(1, threshold=0.5).update(probs, gt)
        assert acc.tp[0] == 1 and acc.fn[0] == 0

    def test_argmax_mode_matches_manual(self):
        rng = np.random.default_rng(2)
        probs = rng.random((4, 6, 6))
        gt = (rng.random((4, 6, 6)) < 0.3).astype(np.uint8)
        acc = ConfusionAccumulator(4, mode="argmax").update(probs, gt)
        winner = probs.argmax(axis=0)
        for ci in range(4):
            pred = winner == ci
            pos = gt[ci] > 0.5
            assert acc.tp[ci] == (pred & pos).sum()
            assert acc.fp[ci] == (pred & ~pos).sum()
            assert acc.fn[ci] == (~pred & pos).sum()

    def test_updates_accumulate_and_merge_agrees(self):
        rng = np.random.default_rng(5)
        chunks = [(rng.random((3, 5, 5)), (rng.random((3, 5, 5)) < 0.5))
                  for _ in range(4)]
        seq = ConfusionAccumulator(3)
        for p, g in chunks:
            accumulate_confusion(seq, p, g)
        parts = []
        for p, g in chunks:
            parts.append(ConfusionAccumulator(3).update(p, g))
        left = parts[0].merged(parts[1]).merged(parts[2]).merged(parts[3])
        right = parts[0].merged(parts[1].merged(parts[2].merged(parts[3])))
        for acc in (left, right):
            np.testing.assert_array_equal(acc.tp, seq.tp)
            np.testing.assert_array_equal(acc.fp, seq.fp)
            np.testing.assert_array_equal(acc.fn, seq.fn)

    def test_merge_rejects_mismatched_settings(self):
        a = ConfusionAccumulator(3, threshold=0.5)
        with pytest.raises(ValueError):
            a.merged(ConfusionAccumulator(3, threshold=0.6))
        with pytest.raises(ValueError):
            a.merged(ConfusionAccumulator(4))

    def test_update_shape_mismatch(self):
        acc = ConfusionAccumulator(2)
        with pytest.raises(ValueError):
            acc.update(np.zeros((2, 3, 3)), np.zeros((2, 4, 4)))
        with pytest.raises(ValueError):
            acc.update(np.zeros((3, 3, 3)), np.zeros((3, 3, 3)))

    @pytest.mark.parametrize("kwargs", [dict(num_classes=0), dict(mode="soft"),
                                        dict(class_names=("a",))])
    def test_bad_construction(self, kwargs):
        full = dict(num_classes=2)
        full.update(kwargs)
        with pytest.raises(ConfigError):
            ConfusionAccumulator(**full)


class TestDividerMerge:
    def test_count_sum_merge(self):
        acc = ConfusionAccumulator(7, class_names=CANONICAL_CLASSES)
        acc.tp = np.array([10, 2, 1, 5, 3, 4, 6], dtype=np.int64)
        acc.fp = np.array([2, 1, 1, 1, 0, 2, 1], dtype=np.int64)
        acc.fn = np.array([3, 2, 3, 0, 1, 1, 2], dtype=np.int64)
        i = CANONICAL_CLASSES.index("road_divider")
        j = CANONICAL_CLASSES.index("lane_divider")
        tp = acc.tp.copy(); fp = acc.fp.copy(); fn = acc.fn.copy()
        tp[i] += tp[j]; fp[i] += fp[j]; fn[i] += fn[j]
        keep = [k for k in range(7) if k != j]
        expect = np.mean([tp[k] / (tp[k] + fp[k] + fn[k]) for k in keep])
        assert miou(acc, merge_dividers=True) == pytest.approx(expect)
        # and the unmerged summary is a plain 7-way mean
        assert miou(acc) == pytest.approx(np.nanmean(iou(acc)))

    def test_merge_needs_divider_classes(self):
        acc = ConfusionAccumulator(2, class_names=("a", "b"))
        acc.tp += 1
        with pytest.raises(ConfigError):
            miou(acc, merge_dividers=True)


class TestBands:
    def make_acc(self, toy_grid, mode):
        masks = distance_band_masks(toy_grid, EDGES, mode=mode)
        return ConfusionAccumulator(3, band_masks=masks)

    def test_annulus_bands_partition_the_counts(self, toy_grid):
        rng = np.random.default_rng(0)
        n = toy_grid.cells_per_side
        acc = self.make_acc(toy_grid, "annulus")
        for _ in range(3):
            acc.update(rng.random((3, n, n)), rng.random((3, n, n)) < 0.5)
        union = np.zeros((n, n), dtype=bool)
        for bm in acc.band_masks:
            union |= bm
        ref = ConfusionAccumulator(3, band_masks=[union])
        rng = np.random.default_rng(0)
        for _ in range(3):
            ref.update(rng.random((3, n, n)), rng.random((3, n, n)) < 0.5)
        np.testing.assert_array_equal(acc.band_tp.sum(axis=0), ref.band_tp[0])
        np.testing.assert_array_equal(acc.band_fp.sum(axis=0), ref.band_fp[0])
        np.testing.assert_array_equal(acc.band_fn.sum(axis=0), ref.band_fn[0])

    def test_cumulative_bands_nest(self, toy_grid):
        rng = np.random.default_rng(1)
        n = toy_grid.cells_per_side
        ann = self.make_acc(toy_grid, "annulus")
        cum = self.make_acc(toy_grid, "cumulative")
        p, g = rng.random((3, n, n)), rng.random((3, n, n)) < 0.5
        ann.update(p, g)
        cum.update(p, g)
        for bi in range(len(EDGES)):
            np.testing.assert_array_equal(cum.band_tp[bi],
                                          ann.band_tp[:bi + 1].sum(axis=0))
            np.testing.assert_array_equal(cum.band_fn[bi],
                                          ann.band_fn[:bi + 1].sum(axis=0))

    def test_band_miou_matches_masked_eval(self, toy_grid):
        rng = np.random.default_rng(2)
        n = toy_grid.cells_per_side
        acc = self.make_acc(toy_grid, "annulus")
        p, g = rng.random((3, n, n)), (rng.random((3, n, n)) < 0.5).astype(np.uint8)
        acc.update(p, g)
        vals = band_miou(acc)
        for bi, bm in enumerate(acc.band_masks):
            tp, fp, fn = brute_counts(p[:, bm][:, None, :], g[:, bm][:, None, :], 0.5)
            expect = np.nanmean(brute_iou(tp, fp, fn))
            assert vals[bi] == pytest.approx(expect)

    def test_band_queries_require_bands(self):
        with pytest.raises(ConfigError):
            band_iou(ConfusionAccumulator(3))

    def test_band_mask_shape_checked(self, toy_grid):
        acc = ConfusionAccumulator(3, band_masks=[np.ones((10, 10), dtype=bool)])
        n = toy_grid.cells_per_side
        with pytest.raises(ValueError):
            acc.update(np.zeros((3, n, n)), np.zeros((3, n, n)))

    def test_profile_rows(self, toy_grid):
        rng = np.random.default_rng(3)
        n = toy_grid.cells_per_side
        acc = self.make_acc(toy_grid, "annulus")
        acc.class_names = ("a", "b", "c")
        acc.update(rng.random((3, n, n)), rng.random((3, n, n)) < 0.5)
        rows = distance_profile(acc, EDGES, mode="annulus")
        assert [(r["band_lo_m"], r["band_hi_m"]) for r in rows] == \
            [(0.0, 10.0), (10.0, 20.0), (20.0, 30.0), (30.0, 40.0), (40.0, 50.0)]
        assert all(set(r["iou"]) == {"a", "b", "c"} for r in rows)
        cum_rows = distance_profile(acc, EDGES, mode="cumulative")
        assert all(r["band_lo_m"] == 0.0 for r in cum_rows)

    def test_profile_validates_inputs(self, toy_grid):
        acc = self.make_acc(toy_grid, "annulus")
        with pytest.raises(ConfigError):
            distance_profile(acc, (10.0, 20.0))
        with pytest.raises(ConfigError):
            distance_profile(acc, EDGES, mode="spiral")
        with pytest.raises(ConfigError):
            distance_profile(ConfusionAccumulator(3), EDGES)


class TestCsvOutput:
    def test_per_class_csv(self, tmp_path):
        acc = ConfusionAccumulator(3, class_names=("a", "b", "c"))
        acc.tp = np.array([3, 0, 0], dtype=np.int64)
        acc.fp = np.array([1, 0, 0], dtype=np.int64)
        acc.fn = np.array([0, 2, 0], dtype=np.int64)
        path = tmp_path / "per_class_iou.csv"
        write_per_class_iou_csv(path, acc)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["class", "IoU"]
        assert rows[1] == ["a", "0.750000"]
        assert rows[2] == ["b", "0.000000"]
        assert rows[3] == ["c", ""]  # undefined stays blank, not zero

    def test_profile_csv(self, tmp_path, toy_grid):
        rng = np.random.default_rng(4)
        n = toy_grid.cells_per_side
        masks = distance_band_masks(toy_grid, EDGES)
        acc = ConfusionAccumulator(2, class_names=("a", "b"), band_masks=masks)
        acc.update(rng.random((2, n, n)), rng.random((2, n, n)) < 0.5)
        rows = distance_profile(acc, EDGES)
        path = tmp_path / "profile.csv"
        write_distance_profile_csv(path, rows)
        lines = list(csv.reader(path.open()))
        assert lines[0] == ["band_lo_m", "band_hi_m", "class", "IoU", "mIoU"]
        assert len(lines) == 1 + len(EDGES) * 2

    def test_bench_csv(self, tmp_path):
        rep = BenchReport(warmup_iters=10, timed_iters=90, mean_ms=4.0, std_ms=0.5)
        assert rep.fps == pytest.approx(250.0)
        path = tmp_path / "bench.csv"
        write_bench_csv(path, {"fast": rep})
        lines = list(csv.reader(path.open()))
        assert lines[0] == ["variant", "mean_ms", "std_ms", "fps"]
        assert lines[1] == ["fast", "4.0000", "0.5000", "250.00"]


class TestBenchmark:
    class CountingModel:
        def __init__(self):
            self.calls = 0

        def __call__(self, x, training=False):
            assert training is False
            self.calls += 1
            return x

    def test_counts_and_report(self):
        model = self.CountingModel()
        rep = benchmark_forward(model, (1, 2, 4, 4), warmup=3, iters=7)
        assert model.calls == 10
        assert rep.warmup_iters == 3 and rep.timed_iters == 7
        assert rep.mean_ms >= 0.0
        assert rep.fps == pytest.approx(1000.0 / rep.mean_ms)

    def test_rejects_bad_iteration_counts(self):
        model = self.CountingModel()
        with pytest.raises(ConfigError):
            benchmark_forward(model, (1, 2, 4, 4), warmup=0, iters=0)
        with pytest.raises(ConfigError):
            benchmark_forward(model, (1, 2, 4, 4), warmup=-1, iters=5)
