"""Command line front end.

Subcommands: ``gen`` (synthetic dataset), ``train``, ``eval``, ``gradcheck``,
``bench``, ``ablate``.  Exit codes: 1 usage, 2 bad configuration, 3 data
problems, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from bevseg import metrics
from bevseg.errors import ConfigError, DataError, NumericError
from bevseg.gradcheck_suite import run_suite, suite_passed
from bevseg.grid import GridSpec
from bevseg.heads import HeadConfig, build_head
from bevseg.scenes import CorruptionPreset, SceneSpec, write_dataset
from bevseg.train import (DEFAULT_BAND_EDGES, RunConfig, evaluate, load_model,
                          run_ablation, train_loop)

EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; we reserve 2 for config."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="bevseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("gen", help="write a synthetic scene dataset")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--preset", choices=("clear", "rain", "night"), default="rain")
    g.add_argument("--train", type=int, default=8, help="train scene count")
    g.add_argument("--val", type=int, default=4, help="val scene count")
    g.add_argument("--grid-cells", type=int, default=50)
    g.add_argument("--resolution", type=float, default=2.0, help="meters per cell")
    g.add_argument("--input-side", type=int, default=32, help="feature raster side")

    t = sub.add_parser("train", help="run a training config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")

    e = sub.add_parser("eval", help="mIoU and distance profile on a split")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default=None)
    e.add_argument("--out", default=None, help="directory for CSV/JSON reports")

    c = sub.add_parser("gradcheck", help="finite-difference suite over all ops and losses")
    c.add_argument("--instances", type=int, default=5)
    c.add_argument("--tol", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", help="forward-latency protocol on both heads")
    b.add_argument("--base-channels", type=int, default=16, help="U-Net width; vanilla gets 4x")
    b.add_argument("--in-channels", type=int, default=9)
    b.add_argument("--input-side", type=int, default=32)
    b.add_argument("--output-side", type=int, default=50)
    b.add_argument("--warmup", type=int, default=100)
    b.add_argument("--iters", type=int, default=900)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None, help="directory for bench.csv")

    a = sub.add_parser("ablate", help="head or loss ablation over seeds")
    a.add_argument("--kind", choices=("head", "loss"), required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--out", default=None)
    return p


def _cmd_gen(args) -> int:
    grid = GridSpec(cells_per_side=args.grid_cells, resolution=args.resolution)
    preset = CorruptionPreset.by_name(args.preset)
    specs = [SceneSpec(seed=2 * (args.seed + i), grid=grid, corruption=preset)
             for i in range(args.train)]
    specs += [SceneSpec(seed=2 * (args.seed + i) + 1, grid=grid, corruption=preset)
              for i in range(args.val)]
    manifest = write_dataset(specs, args.out, input_side=args.input_side)
    print(f"wrote {len(manifest['scenes'])} scenes ({args.train} train / {args.val} val, "
          f"preset {args.preset}) to {args.out}")
    return 0


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    result = train_loop(cfg, resume_from=args.resume)
    drops = sum(1 for r in result.log if r["kind"] == "lr_drop")
    print(f"trained {cfg.epochs} epochs; best val mIoU {result.best_val_miou:.4f} "
          f"at epoch {result.best_epoch}; lr drops seen: {drops}")
    if result.checkpoint_dir:
        print(f"checkpoints in {result.checkpoint_dir}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    split = args.split or cfg.val_split
    model = load_model(cfg, args.checkpoint)
    from bevseg.scenes import SceneDataset
    ds = SceneDataset(cfg.dataset_root)
    res = evaluate(model, ds, split, threshold=cfg.threshold,
                   band_edges=DEFAULT_BAND_EDGES)
    per_class = metrics.iou(res.accumulator)
    names = ds.grid_spec.class_names
    print(f"split {split!r}: mIoU {res.miou:.4f}")
    for n, v in zip(names, per_class):
        print(f"  {n:22s} {'--' if np.isnan(v) else f'{v:.4f}'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_per_class_iou_csv(out / "per_class_iou.csv", res.accumulator)
        metrics.write_distance_profile_csv(out / "distance_profile.csv", res.profile)
        summary = {"split": split, "miou": res.miou,
                   "per_class_iou": {n: None if np.isnan(v) else float(v)
                                     for n, v in zip(names, per_class)},
                   "distance_profile": [
                       {**r, "iou": {k: None if np.isnan(v) else float(v)
                                     for k, v in r["iou"].items()}}
                       for r in res.profile]}
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        print(f"reports written to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_suite(instances=args.instances, tol=args.tol, seed=args.seed,
                        report=print)
    if not suite_passed(results):
        bad = [r.name for r in results if not r.ok]
        raise NumericError(f"gradient checks failed: {', '.join(bad)}")
    print(f"all {len(results)} checks passed (tol {args.tol:g})")
    return 0


def _cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    common = dict(in_channels=args.in_channels, num_classes=7,
                  input_side=args.input_side, output_side=args.output_side)
    variants = {
        "vanilla": HeadConfig(variant="vanilla", base_channels=4 * args.base_channels, **common),
        "unet": HeadConfig(variant="unet", base_channels=args.base_channels, **common),
    }
    shape = (1, args.in_channels, args.input_side, args.input_side)
    reports = {}
    for name, hc in variants.items():
        model = build_head(hc, rng)
        reports[name] = metrics.benchmark_forward(model, shape, warmup=args.warmup,
                                                  iters=args.iters, seed=args.seed)
        r = reports[name]
        print(f"{name:8s} {r.mean_ms:8.3f} ms +/- {r.std_ms:.3f}  ({r.fps:.1f} fps)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_bench_csv(out / "bench.csv", reports)
        print(f"bench.csv written to {out}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = RunConfig.load(args.config)
    report = run_ablation(args.kind, cfg, args.seeds, out_dir=args.out)
    print(f"{args.kind} ablation over seeds {list(report.seeds)}:")
    for name, vals in report.miou.items():
        print(f"  {name:28s} mean {report.mean_miou[name]:.4f}  "
              f"({', '.join(f'{v:.4f}' for v in vals)})")
    for o in report.orderings:
        status = {True: "holds", False: "VIOLATED", None: o["note"]}[o["holds"]]
        tag = "gate" if o["gate"] else "info"
        print(f"  [{tag}] {o['relation']}: {status}")
    return 0


_COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval,
             "gradcheck": _cmd_gradcheck, "bench": _cmd_bench, "ablate": _cmd_ablate}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
