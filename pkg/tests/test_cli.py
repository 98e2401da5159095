"""Command-line wiring: exit codes, artifact layout, determinism."""

import csv
import json

import pytest

from bevseg.cli import main
from bevseg.heads import HeadConfig
from bevseg.losses import LossConfig
from bevseg.train import RunConfig


@pytest.fixture(scope="module")
def toy_config(toy_dataset, tmp_path_factory):
    cfg = RunConfig(
        dataset_root=str(toy_dataset),
        head=HeadConfig(variant="unet", in_channels=9, base_channels=8,
                        input_side=32, output_side=50),
        loss=LossConfig(enable_lovasz=False, enable_sem=False, enable_geo=False,
                        enable_boundary=False),
        epochs=1, lr=1e-3,
    )
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    cfg.save(path)
    return path


class TestUsage:
    def test_no_command(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 1

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as e:
            main(["gen"])
        assert e.value.code == 1

    def test_bad_flag_value(self):
        with pytest.raises(SystemExit) as e:
            main(["gen", "--out", "x", "--train", "lots"])
        assert e.value.code == 1


class TestGen:
    def test_deterministic_and_parity_split(self, tmp_path, capsys):
        argv = ["gen", "--seed", "3", "--train", "2", "--val", "1",
                "--grid-cells", "50", "--input-side", "16"]
        assert main(argv + ["--out", str(tmp_path / "a")]) == 0
        assert main(argv + ["--out", str(tmp_path / "b")]) == 0
        assert "3 scenes" in capsys.readouterr().out
        ma = (tmp_path / "a" / "manifest.json").read_bytes()
        mb = (tmp_path / "b" / "manifest.json").read_bytes()
        assert ma == mb
        manifest = json.loads(ma)
        by_split = {}
        for e in manifest["scenes"]:
            by_split.setdefault(e["split"], []).append(e["seed"])
        assert by_split == {"train": [6, 8], "val": [7]}
        sid = manifest["scenes"][0]["id"]
        fa = (tmp_path / "a" / "scenes" / sid / "features.bevt").read_bytes()
        fb = (tmp_path / "b" / "scenes" / sid / "features.bevt").read_bytes()
        assert fa == fb


class TestTrainEval:
    def test_train_then_eval(self, toy_config, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", str(toy_config), "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "best val mIoU" in text
        assert (out / "checkpoints" / "best.npz").exists()
        assert (out / "train_log.jsonl").exists()

        rep = tmp_path / "reports"
        assert main(["eval", "--config", str(toy_config),
                     "--checkpoint", str(out / "checkpoints" / "best.npz"),
                     "--out", str(rep)]) == 0
        text = capsys.readouterr().out
        assert "mIoU" in text
        rows = list(csv.reader((rep / "per_class_iou.csv").open()))
        assert rows[0] == ["class", "IoU"] and len(rows) == 8
        prof = list(csv.reader((rep / "distance_profile.csv").open()))
        assert prof[0] == ["band_lo_m", "band_hi_m", "class", "IoU", "mIoU"]
        summary = json.loads((rep / "summary.json").read_text())
        assert set(summary) == {"split", "miou", "per_class_iou", "distance_profile"}
        assert len(summary["distance_profile"]) == 5

    def test_seed_override_lands_in_config(self, toy_config, tmp_path):
        out = tmp_path / "seeded"
        assert main(["train", "--config", str(toy_config), "--seed", "5",
                     "--out", str(out)]) == 0
        saved = json.loads((out / "run_config.json").read_text())
        assert saved["seed"] == 5

    def test_missing_config_is_config_error(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_invalid_config_value(self, toy_config, tmp_path):
        d = json.loads(toy_config.read_text())
        d["lr"] = -1.0
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(d))
        assert main(["train", "--config", str(bad)]) == 2

    def test_missing_dataset_is_data_error(self, toy_config, tmp_path, capsys):
        d = json.loads(toy_config.read_text())
        d["dataset_root"] = str(tmp_path / "gone")
        moved = tmp_path / "moved.json"
        moved.write_text(json.dumps(d))
        assert main(["train", "--config", str(moved)]) == 3
        assert "data error" in capsys.readouterr().err

    def test_missing_checkpoint_is_data_error(self, toy_config, tmp_path):
        assert main(["eval", "--config", str(toy_config),
                     "--checkpoint", str(tmp_path / "none.npz")]) == 3


class TestGradcheckCommand:
    def test_passes_at_default_tolerance(self, capsys):
        assert main(["gradcheck", "--instances", "1"]) == 0
        assert "checks passed" in capsys.readouterr().out

    def test_impossible_tolerance_fails_numerically(self, capsys):
        assert main(["gradcheck", "--instances", "1", "--tol", "1e-14"]) == 4
        assert "numeric failure" in capsys.readouterr().err


class TestBenchCommand:
    def test_writes_csv(self, tmp_path, capsys):
        assert main(["bench", "--base-channels", "2", "--input-side", "8",
                     "--output-side", "10", "--warmup", "1", "--iters", "3",
                     "--out", str(tmp_path)]) == 0
        text = capsys.readouterr().out
        assert "vanilla" in text and "unet" in text
        rows = list(csv.reader((tmp_path / "bench.csv").open()))
        assert rows[0] == ["variant", "mean_ms", "std_ms", "fps"]
        assert {r[0] for r in rows[1:]} == {"vanilla", "unet"}


class TestAblateCommand:
    def test_head_ablation_single_seed(self, toy_config, tmp_path, capsys):
        assert main(["ablate", "--kind", "head", "--config", str(toy_config),
                     "--seeds", "0", "--out", str(tmp_path / "ab")]) == 0
        text = capsys.readouterr().out
        assert "vanilla" in text and "unet" in text
        assert "insufficient seeds" in text
        report = json.loads((tmp_path / "ab" / "ablation_report.json").read_text())
        assert report["kind"] == "head"
