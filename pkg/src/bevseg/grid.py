"""BEV grid containers, exact signed distance transforms, and tensor file IO.

The grid is square, metric, and ego-centered: cell (i, j) covers a
``resolution``-sized patch whose center sits at
``((i + 0.5) * res - extent / 2, (j + 0.5) * res - extent / 2)`` relative to
the grid center.  Class occupancy is a binary (C, H, W) stack; classes are
non-exclusive (a crossing cell is also drivable surface).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np

from bevseg.errors import ConfigError, DataError

CANONICAL_CLASSES = (
    "drivable_surface",
    "pedestrian_crossing",
    "sidewalk",
    "stop_line",
    "carpark",
    "road_divider",
    "lane_divider",
)

_EDT_INF = 1e20  # absorbs the quadratic offsets in float64, keeping the envelope finite


@dataclass(frozen=True)
class GridSpec:
    """Geometry and labeling of a square BEV grid."""

    cells_per_side: int = 200
    resolution: float = 0.5  # meters per cell
    class_names: tuple = CANONICAL_CLASSES

    def __post_init__(self):
        if self.cells_per_side < 1:
            raise ConfigError(f"cells_per_side must be positive, got {self.cells_per_side}")
        if self.resolution <= 0:
            raise ConfigError(f"resolution must be positive, got {self.resolution}")
        if len(self.class_names) == 0:
            raise ConfigError("class_names must be non-empty")
        if len(set(self.class_names)) != len(self.class_names):
            raise ConfigError("class_names must be unique")

    @property
    def extent(self) -> float:
        """Side length in meters."""
        return self.cells_per_side * self.resolution

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def cell_ranges(self) -> np.ndarray:
        """(H, W) distances in meters from each cell center to the grid center."""
        return _cell_ranges(self.cells_per_side, self.resolution)

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise ConfigError(f"unknown class {name!r}") from None


@lru_cache(maxsize=16)
def _cell_ranges(n: int, res: float) -> np.ndarray:
    centers = (np.arange(n) + 0.5) * res - (n * res) / 2.0
    return np.hypot(centers[:, None], centers[None, :])


@dataclass
class BevGrid:
    """Binary class-occupancy stack on a :class:`GridSpec`."""

    spec: GridSpec
    masks: np.ndarray  # (C, H, W) uint8 in {0, 1}

    def __post_init__(self):
        m = np.asarray(self.masks)
        n, c = self.spec.cells_per_side, self.spec.num_classes
        if m.shape != (c, n, n):
            raise DataError(f"mask stack shape {m.shape} does not match spec ({c}, {n}, {n})")
        if m.dtype != np.uint8:
            if not np.isin(m, (0, 1)).all():
                raise DataError("masks must be binary")
            m = m.astype(np.uint8)
        elif m.max(initial=0) > 1:
            raise DataError("masks must be binary")
        self.masks = m

    def mask(self, name: str) -> np.ndarray:
        return self.masks[self.spec.class_index(name)]


# ---------------------------------------------------------------------------
# exact Euclidean distance transform (two-pass, separable in squared distance)


@numba.njit(cache=True)
def _edt_pass2(d2: np.ndarray) -> np.ndarray:
    """Row-wise lower envelope of parabolas: out[b, j] = min_k d2[b, k] + (j - k)^2."""
    b, n = d2.shape
    out = np.empty_like(d2)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    for r in range(b):
        f = d2[r]
        k = 0
        v[0] = 0
        z[0] = -_EDT_INF
        z[1] = _EDT_INF
        for q in range(1, n):
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
            while s <= z[k]:
                k -= 1
                s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = _EDT_INF
        k = 0
        for j in range(n):
            while z[k + 1] < j:
                k += 1
            out[r, j] = (j - v[k]) * (j - v[k]) + f[v[k]]
    return out


def _column_pass(mask: np.ndarray) -> np.ndarray:
    """Squared distance along each column to the nearest set cell of ``mask``."""
    h, w = mask.shape
    rows = np.arange(h, dtype=np.int64)[:, None]
    big = np.int64(1 << 40)
    up = np.where(mask, rows, -big)
    np.maximum.accumulate(up, axis=0, out=up)
    down = np.where(mask, rows, big)
    np.minimum.accumulate(down[::-1], axis=0, out=down[::-1])
    d = np.minimum(rows - up, down - rows).astype(np.float64)
    d2 = np.square(d)
    d2[d > float(1 << 20)] = _EDT_INF  # column had no set cell
    return d2


def _edt(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance (cells) from every cell to the nearest set cell.

    ``mask`` must contain at least one set cell.
    """
    d2 = _column_pass(mask)
    d2 = _edt_pass2(np.ascontiguousarray(d2))
    return np.sqrt(d2)


def signed_distance_map(mask: np.ndarray) -> np.ndarray:
    """Signed distance field of a binary mask, in cell units.

    Outside the region the value is the exact Euclidean distance to the
    nearest foreground cell (boundary-adjacent background is +1).  Inside it
    is ``-(distance_to_background - 1)``, so foreground cells touching the
    boundary sit exactly at 0 and the value decreases going inward.  A mask
    that is all foreground (or all background) has no boundary; it gets the
    constant cap ``-hypot(H, W)`` (or ``+hypot(H, W)``).
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DataError(f"signed_distance_map expects a 2-D mask, got shape {m.shape}")
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise DataError("mask must be binary")
        m = m.astype(bool)
    h, w = m.shape
    cap = float(np.hypot(h, w))
    if not m.any():
        return np.full((h, w), cap, dtype=np.float64)
    if m.all():
        return np.full((h, w), -cap, dtype=np.float64)
    dist_fg = _edt(m)
    dist_bg = _edt(~m)
    return np.where(m, -(dist_bg - 1.0), dist_fg)


def normalize_distance(d: np.ndarray, alpha: float = 0.1, m_alpha: float = 1.0) -> np.ndarray:
    """Asymmetric rescaling of a signed distance field.

    Positive (outside) values shrink by ``alpha``; non-positive (inside)
    values scale by ``m_alpha``.  This keeps the inside pull intact while
    damping the otherwise enormous far-field penalties.
    """
    if alpha < 0 or m_alpha < 0:
        raise ConfigError("distance scaling factors must be non-negative")
    return np.where(d > 0, alpha * d, m_alpha * d)


@dataclass
class DistanceMap:
    """Per-class signed distance fields of a grid, plus scaling parameters."""

    values: np.ndarray  # (C, H, W) float64, raw signed cell distances
    alpha: float = 0.1
    m_alpha: float = 1.0

    def normalized(self) -> np.ndarray:
        return normalize_distance(self.values, self.alpha, self.m_alpha)

    @classmethod
    def from_grid(cls, grid: BevGrid, alpha: float = 0.1, m_alpha: float = 1.0) -> "DistanceMap":
        return cls.from_masks(grid.masks, alpha=alpha, m_alpha=m_alpha)

    @classmethod
    def from_masks(cls, masks: np.ndarray, alpha: float = 0.1, m_alpha: float = 1.0) -> "DistanceMap":
        vals = np.stack([signed_distance_map(m) for m in masks])
        return cls(values=vals, alpha=alpha, m_alpha=m_alpha)


# ---------------------------------------------------------------------------
# distance bands


def distance_band_masks(spec: GridSpec, edges, mode: str = "annulus") -> list[np.ndarray]:
    """Boolean cell masks for range bands around the grid center.

    ``edges`` are increasing outer radii in meters.  ``annulus`` yields
    ``[0, e0), [e0, e1), ...``; ``cumulative`` yields ``[0, e0), [0, e1), ...``.
    """
    edges = [float(e) for e in edges]
    if len(edges) == 0:
        raise ConfigError("band edges must be non-empty")
    if any(e <= 0 for e in edges) or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ConfigError(f"band edges must be positive and strictly increasing, got {edges}")
    if mode not in ("annulus", "cumulative"):
        raise ConfigError(f"unknown band mode {mode!r}")
    r = spec.cell_ranges()
    masks = []
    lo = 0.0
    for e in edges:
        if mode == "annulus":
            masks.append((r >= lo) & (r < e))
            lo = e
        else:
            masks.append(r < e)
    return masks


# ---------------------------------------------------------------------------
# BEVT tensor file format


class BevtError(DataError):
    """Malformed BEVT tensor file."""


class BevtMagicError(BevtError):
    pass


class BevtVersionError(BevtError):
    pass


class BevtDtypeError(BevtError):
    pass


class BevtTruncatedError(BevtError):
    pass


_BEVT_MAGIC = b"BEVT"
_BEVT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_bevt(path, arr: np.ndarray) -> None:
    """Write an array as a BEVT file (little-endian, row-major payload)."""
    arr = np.ascontiguousarray(arr)
    if arr.ndim < 1 or arr.ndim > 4:
        raise BevtError(f"BEVT stores rank 1..4 tensors, got rank {arr.ndim}")
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise BevtDtypeError(f"BEVT supports float32/float64/uint8, got {arr.dtype}")
    header = _BEVT_MAGIC + struct.pack("<II", _BEVT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<I", code)
    with open(path, "wb") as fh:
        fh.write(header)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        fh.write(arr.tobytes())


def read_bevt(path) -> np.ndarray:
    """Read a BEVT file, validating magic, version, dtype code, and payload size."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise BevtTruncatedError(f"{path}: file shorter than the fixed header")
    if raw[:4] != _BEVT_MAGIC:
        raise BevtMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != _BEVT_VERSION:
        raise BevtVersionError(f"{path}: unsupported version {version}")
    if not 1 <= rank <= 4:
        raise BevtError(f"{path}: rank {rank} out of range")
    need = 12 + 4 * rank + 4
    if len(raw) < need:
        raise BevtTruncatedError(f"{path}: header truncated")
    shape = struct.unpack_from(f"<{rank}I", raw, 12)
    (code,) = struct.unpack_from("<I", raw, 12 + 4 * rank)
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise BevtDtypeError(f"{path}: unknown dtype code {code}")
    count = int(np.prod(shape, dtype=np.int64))
    payload = raw[need:]
    expected = count * dtype.itemsize
    if len(payload) < expected:
        raise BevtTruncatedError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise BevtError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<"), count=count)
    return arr.reshape(shape).astype(dtype, copy=True)
