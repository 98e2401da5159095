"""Synthetic BEV scenes: procedural ground truth plus corrupted sensor features.

Scenes are built from analytic road bands.  Each road is a (possibly
sinusoidally curved) strip parameterized by an axis coordinate ``u`` and a
lateral coordinate ``lat``; every class mask is a condition on (u, lat), so
thin structures stay exactly as thin as configured and the containment
invariants hold by construction:

* dividers and stop lines are 1-2 cells thick,
* lane/road dividers lie on drivable surface,
* crossings are striped drivable rectangles with a stop line abutting them,
* sidewalks flank roads, carparks sit beyond the sidewalk band.

Corruption mimics sensor degradation: camera-like features are blurred,
dropped out, noised with range-growing sigma, and have whole angular sectors
zeroed; radar-like features are sparse jittered occupancy hits plus a range
channel.  Everything is deterministic in the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from bevseg.autodiff.ops import bilinear_resize_array
from bevseg.errors import ConfigError, DataError
from bevseg.grid import CANONICAL_CLASSES, BevGrid, GridSpec, read_bevt, write_bevt


@dataclass(frozen=True)
class CorruptionPreset:
    name: str
    blur_radius: float
    dropout_rate: float
    noise_sigma_base: float
    noise_sigma_per_meter: float
    occlusion_sector_count: int
    radar_sample_rate: float
    radar_jitter_cells: float

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.blur_radius < 0 or self.noise_sigma_base < 0 or self.noise_sigma_per_meter < 0:
            raise ConfigError("corruption magnitudes must be non-negative")
        if self.occlusion_sector_count < 0:
            raise ConfigError("occlusion_sector_count must be non-negative")
        if not 0.0 <= self.radar_sample_rate <= 1.0:
            raise ConfigError("radar_sample_rate must lie in [0, 1]")
        if self.radar_jitter_cells < 0:
            raise ConfigError("radar_jitter_cells must be non-negative")

    @classmethod
    def clear(cls) -> "CorruptionPreset":
        return cls("clear", blur_radius=0.5, dropout_rate=0.05, noise_sigma_base=0.04,
                   noise_sigma_per_meter=0.002, occlusion_sector_count=0,
                   radar_sample_rate=0.25, radar_jitter_cells=0.5)

    @classmethod
    def rain(cls) -> "CorruptionPreset":
        return cls("rain", blur_radius=1.0, dropout_rate=0.18, noise_sigma_base=0.10,
                   noise_sigma_per_meter=0.012, occlusion_sector_count=2,
                   radar_sample_rate=0.20, radar_jitter_cells=1.0)

    @classmethod
    def night(cls) -> "CorruptionPreset":
        return cls("night", blur_radius=1.4, dropout_rate=0.30, noise_sigma_base=0.16,
                   noise_sigma_per_meter=0.022, occlusion_sector_count=3,
                   radar_sample_rate=0.15, radar_jitter_cells=1.5)

    @classmethod
    def by_name(cls, name: str) -> "CorruptionPreset":
        try:
            return {"clear": cls.clear, "rain": cls.rain, "night": cls.night}[name]()
        except KeyError:
            raise ConfigError(f"unknown corruption preset {name!r}") from None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionPreset":
        return cls(**d)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    grid: GridSpec = field(default_factory=GridSpec)
    road_count: int = 2
    road_width_range: tuple = None  # cells; default scales with the grid
    divider_thickness: float = 1.0  # cells
    crossing_probability: float = 0.7
    carpark_probability: float = 0.5
    corruption: CorruptionPreset = field(default_factory=CorruptionPreset.rain)

    def __post_init__(self):
        n = self.grid.cells_per_side
        if n < 8:
            raise ConfigError(f"grid of {n} cells is too small to place a road")
        if self.road_count < 1:
            raise ConfigError("road_count must be >= 1")
        if self.road_width_range is None:
            object.__setattr__(self, "road_width_range", (0.08 * n, 0.15 * n))
        lo, hi = self.road_width_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid road_width_range {self.road_width_range}")
        if not 0.5 <= self.divider_thickness <= 2.0:
            raise ConfigError("divider_thickness must keep dividers 1-2 cells thick")
        for p in (self.crossing_probability, self.carpark_probability):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("probabilities must lie in [0, 1]")


def generate_scene(spec: SceneSpec) -> BevGrid:
    """Procedural ground truth for one scene, deterministic in ``spec.seed``."""
    g = spec.grid
    if set(g.class_names) != set(CANONICAL_CLASSES):
        raise ConfigError("scene generation needs the canonical class set")
    n = g.cells_per_side
    rng = np.random.default_rng(spec.seed)
    ii, jj = np.mgrid[0:n, 0:n]
    py = ii + 0.5
    px = jj + 0.5

    cls = {name: np.zeros((n, n), dtype=bool) for name in CANONICAL_CLASSES}
    half_th = spec.divider_thickness / 2.0

    for _ in range(spec.road_count):
        cy, cx = rng.uniform(0.25 * n, 0.75 * n, 2)
        theta = rng.uniform(0.0, np.pi)
        dy, dx = np.sin(theta), np.cos(theta)
        u = (py - cy) * dy + (px - cx) * dx
        v = -(py - cy) * dx + (px - cx) * dy
        if rng.random() < 0.5:
            amp = rng.uniform(2.0, 0.06 * n)
            period = rng.uniform(0.8 * n, 2.0 * n)
            phase = rng.uniform(0.0, 2 * np.pi)
            lat = v - amp * np.sin(2 * np.pi * u / period + phase)
        else:
            lat = v
        width = rng.uniform(*spec.road_width_range)
        half = width / 2.0
        walk = rng.uniform(0.025 * n, 0.055 * n)

        drivable = np.abs(lat) <= half
        cls["drivable_surface"] |= drivable
        cls["sidewalk"] |= (np.abs(lat) > half) & (np.abs(lat) <= half + walk)
        cls["road_divider"] |= drivable & (np.abs(lat) <= half_th)
        if rng.random() < 0.7:  # only multi-lane roads carry lane markings
            cls["lane_divider"] |= drivable & (np.abs(np.abs(lat) - half / 2.0) <= half_th)

        if rng.random() < spec.crossing_probability:
            u0 = rng.uniform(-0.3 * n, 0.3 * n)
            cw = rng.uniform(0.035 * n, 0.06 * n)
            stripe = max(2.0, round(0.012 * n))
            in_band = np.abs(u - u0) <= cw / 2.0
            striped = (np.floor((lat + half) / stripe).astype(np.int64) % 2) == 0
            cls["pedestrian_crossing"] |= drivable & in_band & striped
            stop_th = min(2.0, max(1.0, round(0.008 * n)))
            before = (u < u0 - cw / 2.0) & (u >= u0 - cw / 2.0 - stop_th)
            cls["stop_line"] |= drivable & before

        if rng.random() < spec.carpark_probability:
            side = 1.0 if rng.random() < 0.5 else -1.0
            u1 = rng.uniform(-0.4 * n, 0.1 * n)
            clen = rng.uniform(0.08 * n, 0.16 * n)
            cdepth = rng.uniform(0.05 * n, 0.10 * n)
            band = (side * lat > half + walk) & (side * lat <= half + walk + cdepth)
            cls["carpark"] |= band & (u >= u1) & (u <= u1 + clen)

    # cross-road cleanup: overlay precedence keeps the invariants global
    cls["sidewalk"] &= ~cls["drivable_surface"]
    cls["carpark"] &= ~cls["drivable_surface"] & ~cls["sidewalk"]
    cls["pedestrian_crossing"] &= cls["drivable_surface"]
    cls["stop_line"] &= cls["drivable_surface"] & ~cls["pedestrian_crossing"]
    cls["road_divider"] &= cls["drivable_surface"]
    cls["lane_divider"] &= cls["drivable_surface"] & ~cls["road_divider"]

    masks = np.stack([cls[name] for name in g.class_names]).astype(np.uint8)
    return BevGrid(spec=g, masks=masks)


def _feature_ranges(extent: float, side: int) -> np.ndarray:
    centers = (np.arange(side) + 0.5) * (extent / side) - extent / 2.0
    return np.hypot(centers[:, None], centers[None, :])


def corrupt_features(gt: BevGrid, preset: CorruptionPreset, seed: int,
                     input_side: int = 128):
    """Derive (camera_like, radar_like) input features from ground truth.

    camera_like: (C, F, F) float32 — per-class masks resized to the feature
    grid, Gaussian-blurred, cell-dropped, noised with sigma growing linearly
    in range, then zeroed inside random angular occlusion sectors.
    radar_like: (2, F, F) float32 — jittered sparse occupancy hits over the
    drivable/divider union, plus a normalized range channel.
    """
    rng = np.random.default_rng(seed)
    f = int(input_side)
    if f < 4:
        raise ConfigError("input_side must be >= 4")
    spec = gt.spec
    base = gt.masks.astype(np.float64)
    cam = bilinear_resize_array(base, f, f)
    if preset.blur_radius > 0:
        cam = gaussian_filter(cam, sigma=(0.0, preset.blur_radius, preset.blur_radius))
    if preset.dropout_rate > 0:
        keep = rng.random((f, f)) >= preset.dropout_rate
        cam = cam * keep
    ranges = _feature_ranges(spec.extent, f)
    sigma = preset.noise_sigma_base + preset.noise_sigma_per_meter * ranges
    cam = cam + rng.normal(size=cam.shape) * sigma
    if preset.occlusion_sector_count > 0:
        centers = (np.arange(f) + 0.5) * (spec.extent / f) - spec.extent / 2.0
        ang = np.arctan2(centers[:, None], centers[None, :])
        for _ in range(preset.occlusion_sector_count):
            start = rng.uniform(-np.pi, np.pi)
            width = rng.uniform(0.3, 0.8)
            rel = np.mod(ang - start, 2 * np.pi)
            cam[:, rel < width] = 0.0

    union = (gt.mask("drivable_surface") | gt.mask("road_divider") | gt.mask("lane_divider"))
    occ = bilinear_resize_array(union.astype(np.float64), f, f) >= 0.3
    sampled = occ & (rng.random((f, f)) < preset.radar_sample_rate)
    hits = np.zeros((f, f), dtype=np.float64)
    ys, xs = np.nonzero(sampled)
    if len(ys):
        jy = np.clip(np.rint(ys + rng.normal(0, preset.radar_jitter_cells, len(ys))), 0, f - 1)
        jx = np.clip(np.rint(xs + rng.normal(0, preset.radar_jitter_cells, len(xs))), 0, f - 1)
        hits[jy.astype(np.intp), jx.astype(np.intp)] = 1.0
    radar = np.stack([hits, ranges / spec.extent])
    return cam.astype(np.float32), radar.astype(np.float32)


# ---------------------------------------------------------------------------
# dataset on disk


def default_split(seed: int) -> str:
    return "train" if seed % 2 == 0 else "val"


def scene_id(seed: int) -> str:
    return f"scene_{seed:06d}"


def write_dataset(specs: list[SceneSpec], root, input_side: int = 128,
                  split_fn=default_split) -> dict:
    """Generate and persist a dataset; returns (and writes) the manifest.

    Layout: ``root/manifest.json`` plus per-scene directories
    ``root/scenes/<id>/{features,radar,gt}.bevt`` and ``meta.json``.
    """
    if not specs:
        raise ConfigError("no scene specs given")
    g0 = specs[0].grid
    seen = set()
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in specs:
        if spec.grid != g0:
            raise ConfigError("all scenes in a dataset must share one grid spec")
        if spec.seed in seen:
            raise ConfigError(f"duplicate scene seed {spec.seed}")
        seen.add(spec.seed)
        sid = scene_id(spec.seed)
        sdir = root / "scenes" / sid
        sdir.mkdir(exist_ok=True)
        gt = generate_scene(spec)
        cam, radar = corrupt_features(gt, spec.corruption, seed=spec.seed, input_side=input_side)
        write_bevt(sdir / "gt.bevt", gt.masks)
        write_bevt(sdir / "features.bevt", cam)
        write_bevt(sdir / "radar.bevt", radar)
        meta = {"seed": spec.seed, "preset": spec.corruption.to_dict(),
                "classes": list(g0.class_names)}
        (sdir / "meta.json").write_text(json.dumps(meta, indent=1))
        entries.append({"id": sid, "seed": spec.seed, "split": split_fn(spec.seed),
                        "preset": spec.corruption.name})
    manifest = {
        "format_version": 1,
        "grid": {"cells_per_side": g0.cells_per_side, "resolution": g0.resolution,
                 "class_names": list(g0.class_names)},
        "input_side": input_side,
        "scenes": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


class SceneDataset:
    """Reader for a dataset written by :func:`write_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise DataError(f"no manifest at {mpath}")
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"manifest is not valid JSON: {e}") from None
        for key in ("grid", "input_side", "scenes"):
            if key not in manifest:
                raise DataError(f"manifest missing key {key!r}")
        gd = manifest["grid"]
        self.grid_spec = GridSpec(cells_per_side=gd["cells_per_side"], resolution=gd["resolution"],
                                  class_names=tuple(gd["class_names"]))
        self.input_side = int(manifest["input_side"])
        self.manifest = manifest
        self._by_split: dict[str, list[str]] = {}
        for e in manifest["scenes"]:
            self._by_split.setdefault(e["split"], []).append(e["id"])

    def scene_ids(self, split: str) -> list[str]:
        return list(self._by_split.get(split, []))

    def splits(self) -> list[str]:
        return sorted(self._by_split)

    def load(self, sid: str) -> dict:
        sdir = self.root / "scenes" / sid
        if not sdir.is_dir():
            raise DataError(f"scene {sid!r} not found under {self.root}")
        gt = read_bevt(sdir / "gt.bevt")
        cam = read_bevt(sdir / "features.bevt")
        radar = read_bevt(sdir / "radar.bevt")
        c = self.grid_spec.num_classes
        n = self.grid_spec.cells_per_side
        if gt.shape != (c, n, n):
            raise DataError(f"scene {sid}: gt shape {gt.shape} does not match the manifest grid")
        if cam.shape != (c, self.input_side, self.input_side):
            raise DataError(f"scene {sid}: features shape {cam.shape} inconsistent with manifest")
        if radar.shape != (2, self.input_side, self.input_side):
            raise DataError(f"scene {sid}: radar shape {radar.shape} inconsistent with manifest")
        return {"id": sid, "gt": gt, "features": cam, "radar": radar}
