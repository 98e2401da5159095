"""Training loop, evaluation, and the head/loss ablation harness.

Runs are deterministic given the config seed: parameter init, the per-epoch
shuffle, and the numpy-only forward/backward make a rerun of the same
RunConfig reproduce the training log bit-for-bit in double precision.

The learning rate drops by ``lr_drop_factor`` at two scheduled epochs
(by default the fifth-from-last and the last), each drop emitted as its own
log record.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bevseg import metrics
from bevseg.autodiff import AdamW, Tape, Tensor, backward, ops
from bevseg.autodiff.modules import Module
from bevseg.errors import ConfigError, DataError, NumericError
from bevseg.grid import DistanceMap, distance_band_masks
from bevseg.heads import FusedModel, HeadConfig, MdcaConfig, build_head
from bevseg.losses import LossConfig, total_loss
from bevseg.scenes import SceneDataset

DEFAULT_BAND_EDGES = (10.0, 20.0, 30.0, 40.0, 50.0)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Everything a training run needs, round-trippable through JSON."""

    dataset_root: str
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mdca: MdcaConfig | None = None
    epochs: int = 10
    lr: float = 2e-4
    lr_drop_factor: float = 0.1
    # two 1-indexed epochs; None derives (epochs - 4, epochs), clamped at 1
    lr_drop_points: tuple | None = None
    batch_size: int = 1
    seed: int = 0
    precision: str = "float32"
    out_dir: str | None = None
    weight_decay: float = 0.01
    threshold: float = 0.5
    train_split: str = "train"
    val_split: str = "val"
    # evaluate every N epochs (the final epoch always evaluates)
    val_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 < self.lr_drop_factor <= 1.0:
            raise ConfigError("lr_drop_factor must lie in (0, 1]")
        if self.batch_size < 1 or self.val_every < 1:
            raise ConfigError("batch_size and val_every must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.lr_drop_points is None:
            self.lr_drop_points = (max(1, self.epochs - 4), self.epochs)
        self.lr_drop_points = tuple(int(p) for p in self.lr_drop_points)
        if len(self.lr_drop_points) != 2:
            raise ConfigError("lr_drop_points must name exactly two epochs")
        if any(not 1 <= p <= self.epochs for p in self.lr_drop_points):
            raise ConfigError(f"lr_drop_points {self.lr_drop_points} outside 1..{self.epochs}")
        if self.head.dtype != self.precision:
            self.head = dataclasses.replace(self.head, dtype=self.precision)
        if self.mdca is not None and self.head.in_channels != self.mdca.model_dim:
            raise ConfigError("with fusion enabled, head in_channels must equal the "
                              "attention model_dim")

    def to_dict(self) -> dict:
        return {
            "dataset_root": self.dataset_root,
            "head": self.head.to_dict(),
            "loss": self.loss.to_dict(),
            "mdca": self.mdca.to_dict() if self.mdca is not None else None,
            "epochs": self.epochs, "lr": self.lr,
            "lr_drop_factor": self.lr_drop_factor,
            "lr_drop_points": list(self.lr_drop_points),
            "batch_size": self.batch_size, "seed": self.seed,
            "precision": self.precision, "out_dir": self.out_dir,
            "weight_decay": self.weight_decay, "threshold": self.threshold,
            "train_split": self.train_split, "val_split": self.val_split,
            "val_every": self.val_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        if "dataset_root" not in d:
            raise ConfigError("run config needs a dataset_root")
        if isinstance(d.get("head"), dict):
            d["head"] = HeadConfig.from_dict(d["head"])
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossConfig.from_dict(d["loss"])
        if isinstance(d.get("mdca"), dict):
            d["mdca"] = MdcaConfig.from_dict(d["mdca"])
        if d.get("lr_drop_points") is not None:
            d["lr_drop_points"] = tuple(d["lr_drop_points"])
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"no run config at {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"run config is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        return cls.from_dict(d)


# ---------------------------------------------------------------------------
# model assembly


class SceneModel(Module):
    """Head over concatenated modality rasters, or the fused attention path."""

    def __init__(self, cfg: RunConfig, modality_channels: tuple, *, rng: np.random.Generator):
        self.fused = None
        if cfg.mdca is not None:
            self.fused = FusedModel(cfg.mdca, cfg.head, list(modality_channels), rng=rng)
        else:
            if cfg.head.in_channels != sum(modality_channels):
                raise ConfigError(
                    f"head expects {cfg.head.in_channels} input channels but the scenes "
                    f"provide {sum(modality_channels)} (camera + radar)")
            self.head = build_head(cfg.head, rng)
        self._dtype = cfg.head.np_dtype

    def forward(self, sample: dict, training: bool = False) -> Tensor:
        cam = sample["features"].astype(self._dtype, copy=False)
        radar = sample["radar"].astype(self._dtype, copy=False)
        if self.fused is not None:
            return self.fused([Tensor(cam), Tensor(radar)], training)
        x = Tensor(np.concatenate([cam, radar], axis=0)[None])
        return self.head(x, training)


def _scene_probs(model: SceneModel, sample: dict, training: bool) -> Tensor:
    logits = model(sample, training=training)
    c = logits.shape[1]
    side = logits.shape[2]
    return ops.reshape(ops.sigmoid(logits), (c, side, logits.shape[3]))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Module, opt: AdamW, *, epoch: int, best_miou: float,
                    cfg: RunConfig) -> None:
    arrays = {}
    for name, p in model.named_parameters():
        arrays[f"param:{name}"] = p.data
    for name, a in model.named_state():
        arrays[f"state:{name}"] = a
    for key, a in opt.state_arrays().items():
        arrays[f"optim:{key}"] = a
    meta = {"epoch": epoch, "best_miou": best_miou, "optim": opt.state_meta(),
            "config": cfg.to_dict()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, __meta__=json.dumps(meta), **arrays)


def load_checkpoint(path, model: Module, opt: AdamW | None = None) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no checkpoint at {p}")
    with np.load(p) as zf:
        meta = json.loads(str(zf["__meta__"][()]))
        params = dict(model.named_parameters())
        want = {f"param:{n}" for n in params}
        have = {k for k in zf.files if k.startswith("param:")}
        if want != have:
            raise DataError("checkpoint parameters do not match the model "
                            f"(missing {sorted(want - have)[:3]}, extra {sorted(have - want)[:3]})")
        for name, t in params.items():
            arr = zf[f"param:{name}"]
            if arr.shape != t.data.shape:
                raise DataError(f"checkpoint shape mismatch for {name}")
            t.data = arr.astype(t.data.dtype)
        for name, a in model.named_state():
            a[...] = zf[f"state:{name}"]
        if opt is not None:
            opt.load_state({k.split(":", 1)[1]: zf[k] for k in zf.files
                            if k.startswith("optim:")}, meta["optim"])
    return meta


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    miou: float
    accumulator: metrics.ConfusionAccumulator
    profile: list | None = None


def evaluate(model: SceneModel, ds: SceneDataset, split: str, threshold: float = 0.5,
             band_edges: tuple | None = None, band_mode: str = "annulus") -> EvalResult:
    """mIoU (and optionally a distance profile) of ``model`` over one split."""
    ids = ds.scene_ids(split)
    if not ids:
        raise DataError(f"dataset has no scenes in split {split!r}")
    bands = None
    if band_edges is not None:
        bands = distance_band_masks(ds.grid_spec, band_edges, mode=band_mode)
    acc = metrics.ConfusionAccumulator(ds.grid_spec.num_classes, threshold=threshold,
                                       class_names=ds.grid_spec.class_names, band_masks=bands)
    for sid in ids:
        sample = ds.load(sid)
        probs = _scene_probs(model, sample, training=False)
        acc.update(probs.data, sample["gt"])
    profile = metrics.distance_profile(acc, band_edges, band_mode) if band_edges else None
    return EvalResult(miou=metrics.miou(acc), accumulator=acc, profile=profile)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    log: list
    best_val_miou: float
    best_epoch: int
    checkpoint_dir: str | None

    def val_mious(self) -> list[float]:
        return [r["val_miou"] for r in self.log if r["kind"] == "epoch"]

    def step_totals(self) -> list[float]:
        return [r["total"] for r in self.log if r["kind"] == "step"]


def _chunks(seq: list, size: int):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def train_loop(cfg: RunConfig, resume_from=None, stop_after_epoch: int | None = None) -> TrainResult:
    """Run the configured training, returning the log and best-val summary.

    Writes ``train_log.jsonl`` plus ``checkpoints/{best,last}.npz`` under
    ``cfg.out_dir`` when set.  ``resume_from`` restarts after the checkpoint's
    epoch with optimizer moments and schedule state restored;
    ``stop_after_epoch`` ends the run early (the schedule itself is unchanged),
    simulating an interruption.
    """
    if not Path(cfg.dataset_root).exists():
        raise DataError(f"dataset root {cfg.dataset_root} does not exist")
    ds = SceneDataset(cfg.dataset_root)
    train_ids = ds.scene_ids(cfg.train_split)
    if not train_ids:
        raise DataError(f"dataset has no scenes in split {cfg.train_split!r}")
    val_ids = ds.scene_ids(cfg.val_split)

    if cfg.head.output_side != ds.grid_spec.cells_per_side:
        raise ConfigError(f"head output side {cfg.head.output_side} does not match the "
                          f"dataset grid ({ds.grid_spec.cells_per_side} cells)")
    if cfg.head.input_side != ds.input_side:
        raise ConfigError(f"head input side {cfg.head.input_side} does not match the "
                          f"dataset features ({ds.input_side} px)")
    if cfg.mdca is not None:
        want = (ds.input_side, ds.input_side)
        if any(tuple(e) != want for e in cfg.mdca.feature_extents):
            raise ConfigError(f"fusion feature_extents must all be {want} for this dataset")

    probe = ds.load(train_ids[0])
    channels = (probe["features"].shape[0], probe["radar"].shape[0])
    rng = np.random.default_rng(cfg.seed)
    model = SceneModel(cfg, channels, rng=rng)
    params = [p for _, p in model.named_parameters()]
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    start_epoch = 1
    best = -math.inf
    best_epoch = 0
    if resume_from is not None:
        meta = load_checkpoint(resume_from, model, opt)
        start_epoch = meta["epoch"] + 1
        best = meta["best_miou"]

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / "run_config.json")
        mode = "a" if resume_from is not None else "w"
        log_fh = open(out_dir / "train_log.jsonl", mode)

    log: list[dict] = []

    def emit(rec: dict) -> None:
        log.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

    dmap_cache: dict[str, DistanceMap] = {}
    needs_dmap = cfg.loss.enable_boundary

    def dmap_for(sample: dict) -> DistanceMap | None:
        if not needs_dmap:
            return None
        sid = sample["id"]
        if sid not in dmap_cache:
            dmap_cache[sid] = DistanceMap.from_masks(
                sample["gt"], alpha=cfg.loss.boundary_alpha, m_alpha=cfg.loss.boundary_m_alpha)
        return dmap_cache[sid]

    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    step = opt.t
    try:
        for epoch in range(start_epoch, last_epoch + 1):
            for _ in range(cfg.lr_drop_points.count(epoch)):
                opt.lr *= cfg.lr_drop_factor
                emit({"kind": "lr_drop", "epoch": epoch, "lr": opt.lr})
            order = list(train_ids)
            np.random.default_rng((cfg.seed, epoch)).shuffle(order)
            for batch in _chunks(order, cfg.batch_size):
                step += 1
                breakdowns = []
                with Tape() as tape:
                    loss_t = None
                    for sid in batch:
                        sample = ds.load(sid)
                        probs = _scene_probs(model, sample, training=True)
                        bd = total_loss(probs, sample["gt"], cfg.loss, dmap_for(sample))
                        breakdowns.append(bd)
                        loss_t = bd.tensor if loss_t is None else ops.add(loss_t, bd.tensor)
                    if len(batch) > 1:
                        loss_t = ops.mul(loss_t, 1.0 / len(batch))
                    total = float(loss_t.data.reshape(()))
                    if not np.isfinite(total):
                        bad = next((b.worst_term() for b in breakdowns if b.worst_term()), None)
                        raise NumericError(
                            f"non-finite loss at step {step}: term {bad or 'total'!r}")
                    model.zero_grad()
                    backward(tape, loss_t)
                opt.step()
                terms = {k: float(np.mean([b.weighted[k] for b in breakdowns]))
                         for k in breakdowns[0].weighted}
                emit({"kind": "step", "step": step, "epoch": epoch, "total": total,
                      "terms": terms, "lr": opt.lr})
            if val_ids and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
                res = evaluate(model, ds, cfg.val_split, threshold=cfg.threshold)
                emit({"kind": "epoch", "epoch": epoch, "val_miou": res.miou, "lr": opt.lr})
                if res.miou > best:
                    best = res.miou
                    best_epoch = epoch
                    if out_dir is not None:
                        save_checkpoint(out_dir / "checkpoints" / "best.npz", model, opt,
                                        epoch=epoch, best_miou=best, cfg=cfg)
            if out_dir is not None:
                save_checkpoint(out_dir / "checkpoints" / "last.npz", model, opt,
                                epoch=epoch, best_miou=best, cfg=cfg)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(log=log, best_val_miou=best, best_epoch=best_epoch,
                       checkpoint_dir=str(out_dir / "checkpoints") if out_dir else None)


def load_model(cfg: RunConfig, checkpoint) -> SceneModel:
    """Rebuild a SceneModel and restore parameters from a checkpoint."""
    ds = SceneDataset(cfg.dataset_root)
    some = ds.scene_ids(cfg.train_split) or ds.scene_ids(cfg.val_split)
    if not some:
        raise DataError("dataset has no scenes to size the model from")
    probe = ds.load(some[0])
    model = SceneModel(cfg, (probe["features"].shape[0], probe["radar"].shape[0]),
                       rng=np.random.default_rng(cfg.seed))
    load_checkpoint(checkpoint, model)
    return model


# ---------------------------------------------------------------------------
# ablations


_LOSS_RUNGS = (
    ("focal", dict(enable_dice=False, enable_lovasz=False, enable_sem=False,
                   enable_geo=False, enable_boundary=False)),
    ("focal+dice", dict(enable_lovasz=False, enable_sem=False, enable_geo=False,
                        enable_boundary=False)),
    ("focal+dice+lovasz", dict(enable_sem=False, enable_geo=False, enable_boundary=False)),
    ("focal+dice+lovasz+affinity", dict(enable_boundary=False)),
    ("all6_raw_boundary", dict(normalized_boundary=False)),
    ("all6_normalized_boundary", dict(normalized_boundary=True)),
)


@dataclass
class AblationReport:
    kind: str
    seeds: tuple
    miou: dict            # config name -> per-seed best val mIoU, seed order
    mean_miou: dict       # config name -> mean over seeds
    orderings: list       # {"relation", "gate", "holds", "note"}
    manifest_sha256: str

    @property
    def sufficient_seeds(self) -> bool:
        return len(self.seeds) >= 3

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seeds": list(self.seeds), "miou": self.miou,
                "mean_miou": self.mean_miou, "orderings": self.orderings,
                "manifest_sha256": self.manifest_sha256,
                "sufficient_seeds": self.sufficient_seeds}


def _manifest_sha256(dataset_root) -> str:
    p = Path(dataset_root) / "manifest.json"
    if not p.exists():
        raise DataError(f"no manifest at {p}")
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _ordering(mean: dict, lo: str, hi: str, gate: bool, enough: bool) -> dict:
    rec = {"relation": f"{lo} < {hi}", "gate": gate}
    if not enough:
        rec.update(holds=None, note="insufficient seeds")
    else:
        rec.update(holds=bool(mean[lo] < mean[hi]), note="")
    return rec


def head_ablation_configs(base: RunConfig) -> list[tuple[str, RunConfig]]:
    """The {vanilla, unet} pair, widths paired 4:1 as in the full-size presets."""
    h = base.head
    unet_base = h.base_channels if h.variant == "unet" else max(1, h.base_channels // 4)
    unet = dataclasses.replace(h, variant="unet", base_channels=unet_base, channel_schedule=None)
    vanilla = dataclasses.replace(h, variant="vanilla", base_channels=4 * unet_base,
                                  channel_schedule=None)
    return [("vanilla", dataclasses.replace(base, head=vanilla)),
            ("unet", dataclasses.replace(base, head=unet))]


def loss_ablation_configs(base: RunConfig) -> list[tuple[str, RunConfig]]:
    out = []
    for name, flags in _LOSS_RUNGS:
        merged = dict(enable_dice=True, enable_lovasz=True, enable_sem=True,
                      enable_geo=True, enable_boundary=True)
        merged.update(flags)
        out.append((name, dataclasses.replace(
            base, loss=dataclasses.replace(base.loss, **merged))))
    return out


def run_ablation(kind: str, base: RunConfig, seeds, out_dir=None) -> AblationReport:
    """Train every configuration of one ablation over ``seeds``; report orderings.

    Every run consumes the same dataset (manifest hashes are checked equal)
    and the same seed list, so configuration is the only varying factor.
    """
    if kind == "head":
        configs = head_ablation_configs(base)
    elif kind == "loss":
        configs = loss_ablation_configs(base)
    else:
        raise ConfigError(f"unknown ablation kind {kind!r}")
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ConfigError("ablation needs at least one seed")

    reference_hash = None
    miou: dict[str, list[float]] = {}
    for name, cfg in configs:
        miou[name] = []
        for s in seeds:
            run_out = str(Path(out_dir) / f"{name}_seed{s}") if out_dir else None
            run_cfg = dataclasses.replace(cfg, seed=s, out_dir=run_out)
            h = _manifest_sha256(run_cfg.dataset_root)
            if reference_hash is None:
                reference_hash = h
            elif h != reference_hash:
                raise DataError("ablation runs saw different dataset manifests")
            result = train_loop(run_cfg)
            miou[name].append(result.best_val_miou)
    mean = {k: float(np.mean(v)) for k, v in miou.items()}

    enough = len(seeds) >= 3
    if kind == "head":
        orderings = [_ordering(mean, "vanilla", "unet", gate=True, enough=enough)]
    else:
        orderings = [
            _ordering(mean, "focal", "all6_raw_boundary", gate=True, enough=enough),
            _ordering(mean, "all6_raw_boundary", "all6_normalized_boundary",
                      gate=True, enough=enough),
        ]
        names = [n for n, _ in _LOSS_RUNGS]
        for lo, hi in zip(names, names[1:]):
            orderings.append(_ordering(mean, lo, hi, gate=False, enough=enough))

    report = AblationReport(kind=kind, seeds=seeds, miou=miou, mean_miou=mean,
                            orderings=orderings, manifest_sha256=reference_hash)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation_report.json").write_text(
            json.dumps(report.to_dict(), indent=2) + "\n")
    return report
