#!/usr/bin/env python3
"""
Gridded data layer: grid geometry, multi-variable cubes, quality control,
resampling, normalization, patch extraction, stations and the STC format.

STC directory layout:
    manifest.json  {grid, schema, times, dtype, order}
    data.bin       IEEE-754 little-endian values, T,H,W,C row-major
    mask.bin       one byte (0/1) per value, same order
"""

import math
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import distance_transform_edt, map_coordinates

from core.stdown_core import (
    FREEZE_KELVIN, MAX_WATER_FRACTION, MIN_VALID_SM, STD_EPS, STEP_SECONDS,
    STC_DATA, STC_DTYPES, STC_MANIFEST, STC_MASK, STC_ORDER,
    FormatError, InsufficientDataError, MaskedChannelError,
    SchemaMismatchError, ShapeMismatchError, StdownError,
    read_json, write_json,
)

logger = logging.getLogger(__name__)

CHANNEL_KINDS = ("dynamic", "static", "context")
CONTEXT_NAMES = ("HOY", "longitude", "latitude")
GOOD_QUALITY = "G"
FILL_VALUE = -9999.0
AUGMENT_OPS = ("flip_h", "flip_v", "transpose")

# the eight elements of the square's symmetry group, as op sequences
DIHEDRAL_SEQUENCES: Tuple[Tuple[str, ...], ...] = (
    (),
    ("flip_h",),
    ("flip_v",),
    ("flip_h", "flip_v"),
    ("transpose",),
    ("transpose", "flip_h"),
    ("transpose", "flip_v"),
    ("transpose", "flip_h", "flip_v"),
)


def _readonly(array: np.ndarray) -> np.ndarray:
    view = array.view()
    view.flags.writeable = False
    return view


# ============================================================================
# GRID GEOMETRY
# ============================================================================

@dataclass(frozen=True)
class GeoGrid:
    """Regular latitude-longitude raster; (lat0, lon0) is the first cell center."""
    lat0: float
    lon0: float
    dlat: float
    dlon: float
    nlat: int
    nlon: int

    def __post_init__(self):
        if not (self.dlat > 0 and self.dlon > 0):
            raise ShapeMismatchError("Grid spacing must be positive",
                                     {"dlat": self.dlat, "dlon": self.dlon})
        if int(self.nlat) < 1 or int(self.nlon) < 1:
            raise ShapeMismatchError("Grid must have at least one cell per axis",
                                     {"nlat": self.nlat, "nlon": self.nlon})
        object.__setattr__(self, "nlat", int(self.nlat))
        object.__setattr__(self, "nlon", int(self.nlon))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.nlat, self.nlon

    def lats(self) -> np.ndarray:
        return self.lat0 + np.arange(self.nlat) * self.dlat

    def lons(self) -> np.ndarray:
        return self.lon0 + np.arange(self.nlon) * self.dlon

    def lat_edges(self) -> Tuple[np.ndarray, np.ndarray]:
        centers = self.lats()
        return centers - self.dlat / 2.0, centers + self.dlat / 2.0

    def lon_edges(self) -> Tuple[np.ndarray, np.ndarray]:
        centers = self.lons()
        return centers - self.dlon / 2.0, centers + self.dlon / 2.0

    def contains(self, lat: float, lon: float) -> bool:
        lat_lo, lat_hi = self.lat0 - self.dlat / 2, self.lat0 + (self.nlat - 0.5) * self.dlat
        lon_lo, lon_hi = self.lon0 - self.dlon / 2, self.lon0 + (self.nlon - 0.5) * self.dlon
        return lat_lo <= lat <= lat_hi and lon_lo <= lon <= lon_hi

    def to_dict(self) -> Dict[str, Any]:
        return {"lat0": self.lat0, "lon0": self.lon0, "dlat": self.dlat,
                "dlon": self.dlon, "nlat": self.nlat, "nlon": self.nlon}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GeoGrid":
        try:
            return cls(float(data["lat0"]), float(data["lon0"]), float(data["dlat"]),
                       float(data["dlon"]), int(data["nlat"]), int(data["nlon"]))
        except KeyError as e:
            raise FormatError(f"Grid definition missing field {e}")


@dataclass(frozen=True)
class DomainBounds:
    """Cell-edge extent used to normalize latitude/longitude context channels."""
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    @classmethod
    def from_grid(cls, grid: GeoGrid) -> "DomainBounds":
        return cls(lat_min=grid.lat0 - grid.dlat / 2,
                   lat_max=grid.lat0 + (grid.nlat - 0.5) * grid.dlat,
                   lon_min=grid.lon0 - grid.dlon / 2,
                   lon_max=grid.lon0 + (grid.nlon - 0.5) * grid.dlon)

    def to_dict(self) -> Dict[str, float]:
        return {"lat_min": self.lat_min, "lat_max": self.lat_max,
                "lon_min": self.lon_min, "lon_max": self.lon_max}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DomainBounds":
        return cls(**{k: float(data[k]) for k in ("lat_min", "lat_max", "lon_min", "lon_max")})


# ============================================================================
# SCHEMA
# ============================================================================

@dataclass(frozen=True)
class Channel:
    name: str
    kind: str
    units: str = ""


@dataclass(frozen=True)
class VarSchema:
    """Ordered channel list; channel index is list position."""
    channels: Tuple[Channel, ...]

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise SchemaMismatchError("Channel names must be unique", {"names": names})
        for c in self.channels:
            if c.kind not in CHANNEL_KINDS:
                raise SchemaMismatchError(f"Unknown channel kind '{c.kind}' for {c.name}")
        context = {c.name for c in self.channels if c.kind == "context"}
        if context and context != set(CONTEXT_NAMES):
            raise SchemaMismatchError(
                "Context channels must be exactly HOY, longitude, latitude",
                {"context": sorted(context)}
            )

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(c.name for c in self.channels)

    @property
    def has_context(self) -> bool:
        return any(c.kind == "context" for c in self.channels)

    def __len__(self) -> int:
        return len(self.channels)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaMismatchError(f"Channel '{name}' not in schema", {"names": list(self.names)})

    def indices(self, kind: str) -> List[int]:
        return [i for i, c in enumerate(self.channels) if c.kind == kind]

    def base(self) -> "VarSchema":
        """Schema without context channels."""
        return VarSchema(tuple(c for c in self.channels if c.kind != "context"))

    def with_context(self) -> "VarSchema":
        return VarSchema(self.channels + (Channel("HOY", "context", "1"),
                                          Channel("longitude", "context", "1"),
                                          Channel("latitude", "context", "1")))

    def to_list(self) -> List[Dict[str, str]]:
        return [{"name": c.name, "kind": c.kind, "units": c.units} for c in self.channels]

    @classmethod
    def from_list(cls, items: Sequence[Dict[str, Any]]) -> "VarSchema":
        try:
            return cls(tuple(Channel(str(i["name"]), str(i["kind"]), str(i.get("units", "")))
                             for i in items))
        except KeyError as e:
            raise FormatError(f"Schema entry missing field {e}")


# ============================================================================
# CUBES & FIELDS
# ============================================================================

def _check_times(times: np.ndarray, require_uniform: bool) -> None:
    if times.ndim != 1:
        raise ShapeMismatchError("Time axis must be 1-D", {"shape": list(times.shape)})
    if times.size >= 2:
        steps = np.diff(times)
        if np.any(steps <= 0):
            raise ShapeMismatchError("Times must be strictly increasing")
        if require_uniform and np.any(steps != STEP_SECONDS):
            raise ShapeMismatchError(
                f"Cube times must use a constant {STEP_SECONDS} s step",
                {"steps": sorted(set(int(s) for s in steps))[:5]}
            )


@dataclass(frozen=True)
class DataCube:
    """T x H x W x C multi-variable field with validity mask and 3-hour time axis."""
    grid: GeoGrid
    schema: VarSchema
    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64)
        values = np.asarray(self.values)
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        _check_times(times, require_uniform=True)
        expected = (times.size, self.grid.nlat, self.grid.nlon, len(self.schema))
        if values.shape != expected or mask.shape != expected:
            raise ShapeMismatchError(
                "Cube arrays do not match grid/schema/times",
                {"expected": list(expected), "values": list(values.shape),
                 "mask": list(mask.shape)}
            )
        for c in self.schema.indices("static"):
            frozen = np.broadcast_to(values[:1, ..., c], values[..., c].shape)
            if not np.array_equal(values[..., c], frozen, equal_nan=True):
                raise ShapeMismatchError(
                    f"Static channel '{self.schema.channels[c].name}' varies in time"
                )
        object.__setattr__(self, "times", _readonly(times))
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "mask", _readonly(mask))

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.values.shape)

    def channel(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        i = self.schema.index(name)
        return self.values[..., i], self.mask[..., i]

    def time_index(self, t: int) -> int:
        idx = int(np.searchsorted(self.times, t))
        if idx >= self.times.size or self.times[idx] != t:
            raise ShapeMismatchError(f"Timestamp {t} not on the cube time axis")
        return idx

    def replace(self, **changes) -> "DataCube":
        return replace(self, **changes)


@dataclass(frozen=True)
class TargetField:
    """T x H x W soil-moisture field (m3/m3) with validity mask."""
    grid: GeoGrid
    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64)
        values = np.asarray(self.values)
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        _check_times(times, require_uniform=False)
        expected = (times.size, self.grid.nlat, self.grid.nlon)
        if values.shape != expected or mask.shape != expected:
            raise ShapeMismatchError(
                "Target arrays do not match grid/times",
                {"expected": list(expected), "values": list(values.shape),
                 "mask": list(mask.shape)}
            )
        mask = mask & np.isfinite(values) & (values != FILL_VALUE)
        bad = mask & ((values < 0.0) | (values > 1.0))
        if bad.any():
            raise ShapeMismatchError(
                "Valid soil-moisture values must lie in [0, 1] m3/m3",
                {"out_of_range": int(bad.sum())}
            )
        object.__setattr__(self, "times", _readonly(times))
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "mask", _readonly(mask))

    def replace(self, **changes) -> "TargetField":
        return replace(self, **changes)

    def time_index(self, t: int) -> Optional[int]:
        idx = int(np.searchsorted(self.times, t))
        if idx < self.times.size and self.times[idx] == t:
            return idx
        return None


@dataclass(frozen=True)
class StationRecord:
    """In-situ soil-moisture series at one site."""
    id: str
    lat: float
    lon: float
    depth_cm: float
    times: np.ndarray
    sm: np.ndarray
    quality: np.ndarray
    network: str = "all"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64)
        sm = np.asarray(self.sm, dtype=np.float64)
        quality = np.asarray(self.quality).astype(str)
        if not (times.shape == sm.shape == quality.shape):
            raise ShapeMismatchError(f"Station {self.id}: series columns differ in length")
        order = np.argsort(times, kind="stable")
        times, sm, quality = times[order], sm[order], quality[order]
        good = quality == GOOD_QUALITY
        if np.any(good & ~((sm >= 0.0) & (sm <= 1.0))):
            raise ShapeMismatchError(f"Station {self.id}: good-quality values outside [0, 1]")
        object.__setattr__(self, "times", _readonly(times))
        object.__setattr__(self, "sm", _readonly(sm))
        object.__setattr__(self, "quality", _readonly(quality))

    @property
    def good(self) -> np.ndarray:
        return self.quality == GOOD_QUALITY


@dataclass(frozen=True)
class NormStats:
    """Per-channel Z-score statistics."""
    names: Tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_EPS)
        if mean.shape != (len(self.names),) or std.shape != mean.shape:
            raise SchemaMismatchError("NormStats needs one mean/std per channel")
        object.__setattr__(self, "mean", _readonly(mean))
        object.__setattr__(self, "std", _readonly(std))

    def to_dict(self) -> Dict[str, Any]:
        return {"names": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormStats":
        return cls(tuple(data["names"]), np.array(data["mean"]), np.array(data["std"]))


# ============================================================================
# QUALITY CONTROL
# ============================================================================

def qc_filter_sm(target: TargetField, surface_temp: np.ndarray, water_frac: np.ndarray) -> TargetField:
    """
    Mask retrievals over frozen ground, open water or below the valid floor.

    surface_temp is T x H x W in kelvin; water_frac is T x H x W or a static
    H x W ratio. Values are left untouched.
    """
    surface_temp = np.asarray(surface_temp, dtype=np.float64)
    water_frac = np.asarray(water_frac, dtype=np.float64)
    expected = target.values.shape
    if surface_temp.shape != expected or water_frac.shape not in (expected, expected[1:]):
        raise ShapeMismatchError(
            "QC fields must share the target's grid and times",
            {"target": list(expected), "surface_temp": list(surface_temp.shape),
             "water_frac": list(water_frac.shape)}
        )
    water = np.broadcast_to(water_frac, expected)
    frozen = ~(surface_temp >= FREEZE_KELVIN)
    flooded = ~(water <= MAX_WATER_FRACTION)
    too_dry = target.values < MIN_VALID_SM
    keep = target.mask & ~frozen & ~flooded & ~too_dry
    logger.debug("QC masked %d frozen, %d water, %d below floor",
                 int((target.mask & frozen).sum()), int((target.mask & flooded).sum()),
                 int((target.mask & too_dry).sum()))
    return target.replace(mask=keep)


# ============================================================================
# NORMALIZATION
# ============================================================================

def _channel_stats(name: str, values: np.ndarray, valid: np.ndarray) -> Tuple[float, float]:
    n = int(valid.sum())
    if n < 2:
        raise MaskedChannelError(
            f"Channel '{name}' has {n} valid cells; at least 2 are required",
            {"channel": name, "valid_cells": n}
        )
    v = values[valid].astype(np.float64)
    mean = float(np.mean(v))
    std = float(np.sqrt(np.mean((v - mean) ** 2)))
    return mean, max(std, STD_EPS)


def zscore_fit(cube: DataCube) -> NormStats:
    """Population mean/std per non-context channel over valid cells."""
    names, means, stds = [], [], []
    for i, ch in enumerate(cube.schema.channels):
        if ch.kind == "context":
            continue
        mean, std = _channel_stats(ch.name, cube.values[..., i], cube.mask[..., i])
        names.append(ch.name)
        means.append(mean)
        stds.append(std)
    return NormStats(tuple(names), np.array(means), np.array(stds))


def zscore_apply(cube: DataCube, stats: NormStats) -> DataCube:
    """Standardize every non-context channel; context channels pass through."""
    base = cube.schema.base().names
    if base != stats.names:
        raise SchemaMismatchError(
            "Normalization stats do not match the cube schema",
            {"cube": list(base), "stats": list(stats.names)}
        )
    values = np.array(cube.values, copy=True)
    for k, name in enumerate(stats.names):
        i = cube.schema.index(name)
        values[..., i] = (values[..., i] - stats.mean[k]) / stats.std[k]
    return cube.replace(values=values)


def zscore_fit_target(target: TargetField) -> NormStats:
    mean, std = _channel_stats("sm", target.values, target.mask)
    return NormStats(("sm",), np.array([mean]), np.array([std]))


# ============================================================================
# RESAMPLING
# ============================================================================

def _fractional_index(centers: np.ndarray, origin: float, step: float, n: int) -> np.ndarray:
    return np.clip((centers - origin) / step, 0.0, n - 1.0)


def bilinear_resample(
    values: np.ndarray,
    mask: np.ndarray,
    src: GeoGrid,
    dst: GeoGrid,
    fill_gaps: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Bilinear interpolation of an H x W field from src to dst cell centers.

    Weights are renormalized over valid neighbors; a dst cell is masked when
    none of its contributing neighbors is valid. Centers outside the src
    hull clamp to the nearest edge. With fill_gaps, src gaps are first filled
    from the nearest valid cell.
    """
    values = np.asarray(values, dtype=np.float64)
    valid = np.asarray(mask, dtype=bool) & np.isfinite(values)
    if values.size == 0 or values.shape != src.shape or valid.shape != src.shape:
        raise ShapeMismatchError("Field does not match source grid",
                                 {"field": list(values.shape), "grid": list(src.shape)})
    if fill_gaps and valid.any() and not valid.all():
        nearest = distance_transform_edt(~valid, return_distances=False, return_indices=True)
        values = values[tuple(nearest)]
        valid = np.ones_like(valid)

    rows = _fractional_index(dst.lats(), src.lat0, src.dlat, src.nlat)
    cols = _fractional_index(dst.lons(), src.lon0, src.dlon, src.nlon)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    coords = np.stack([rr, cc])

    weights = valid.astype(np.float64)
    num = map_coordinates(np.where(valid, values, 0.0), coords, order=1, mode="nearest")
    den = map_coordinates(weights, coords, order=1, mode="nearest")
    out_mask = den > 0.0
    out = np.zeros(dst.shape, dtype=np.float64)
    out[out_mask] = num[out_mask] / den[out_mask]
    return out, out_mask


def temporal_interp(
    values: np.ndarray,
    mask: np.ndarray,
    src_times: Sequence[int],
    dst_times: Sequence[int],
    max_gap_seconds: float = 48 * 3600
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Linear interpolation along axis 0 between valid samples of each cell.

    No extrapolation; a dst time whose bracketing valid samples are further
    apart than max_gap_seconds stays masked unless it hits a sample exactly.
    """
    src_times = np.asarray(src_times, dtype=np.int64)
    dst_times = np.asarray(dst_times, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool) & np.isfinite(values)
    if values.shape[0] != src_times.size or mask.shape != values.shape:
        raise ShapeMismatchError("Series length does not match source times",
                                 {"values": list(values.shape), "times": int(src_times.size)})
    if src_times.size > 1 and np.any(np.diff(src_times) <= 0):
        raise ShapeMismatchError("Source times must be sorted and unique")

    cell_shape = values.shape[1:]
    flat_v = values.reshape(values.shape[0], -1)
    flat_m = mask.reshape(mask.shape[0], -1)
    out = np.zeros((dst_times.size, flat_v.shape[1]), dtype=np.float64)
    out_mask = np.zeros(out.shape, dtype=bool)
    dst_f = dst_times.astype(np.float64)

    for n in range(flat_v.shape[1]):
        ok = flat_m[:, n]
        ts = src_times[ok]
        if ts.size == 0:
            continue
        vs = flat_v[ok, n]
        if ts.size == 1:
            hit = dst_times == ts[0]
            out[hit, n] = vs[0]
            out_mask[hit, n] = True
            continue
        pos = np.searchsorted(ts, dst_times, side="left")
        exact = (pos < ts.size) & (ts[np.minimum(pos, ts.size - 1)] == dst_times)
        inside = (dst_times >= ts[0]) & (dst_times <= ts[-1])
        right = np.clip(pos, 1, ts.size - 1)
        gap = ts[right] - ts[right - 1]
        usable = inside & (exact | (gap <= max_gap_seconds))
        interp = np.interp(dst_f, ts.astype(np.float64), vs)
        interp[exact] = vs[np.minimum(pos, ts.size - 1)][exact]
        out[usable, n] = interp[usable]
        out_mask[usable, n] = True

    return out.reshape((dst_times.size,) + cell_shape), out_mask.reshape((dst_times.size,) + cell_shape)


def _overlap_matrix(dst_lo, dst_hi, src_lo, src_hi) -> np.ndarray:
    hi = np.minimum(dst_hi[:, None], src_hi[None, :])
    lo = np.maximum(dst_lo[:, None], src_lo[None, :])
    return np.clip(hi - lo, 0.0, None)


def aggregate_to_coarse(
    values: np.ndarray,
    mask: np.ndarray,
    fine_grid: GeoGrid,
    coarse_grid: GeoGrid,
    min_valid_fraction: float = 0.5
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Area-weighted mean of valid fine cells overlapping each coarse cell.

    Works on H x W fields or stacks (..., H, W); every 2-D slice is reduced
    with the same operation so stacked and single calls agree exactly. A
    coarse cell is masked when its valid weight is less than
    min_valid_fraction of the weight the fine grid overlaps it with, so
    partly covered cells still aggregate.
    """
    values = np.asarray(values, dtype=np.float64)
    valid = np.asarray(mask, dtype=bool) & np.isfinite(values)
    if values.shape[-2:] != fine_grid.shape or valid.shape != values.shape:
        raise ShapeMismatchError("Field does not match fine grid",
                                 {"field": list(values.shape), "grid": list(fine_grid.shape)})

    lat_w = _overlap_matrix(*coarse_grid.lat_edges(), *fine_grid.lat_edges())
    lat_w = lat_w * np.cos(np.deg2rad(fine_grid.lats()))[None, :]
    lon_w = _overlap_matrix(*coarse_grid.lon_edges(), *fine_grid.lon_edges())
    overlap = lat_w @ np.ones(fine_grid.shape) @ lon_w.T

    lead = values.shape[:-2]
    flat_v = values.reshape((-1,) + fine_grid.shape)
    flat_m = valid.reshape((-1,) + fine_grid.shape)
    out = np.zeros((flat_v.shape[0],) + coarse_grid.shape, dtype=np.float64)
    out_mask = np.zeros(out.shape, dtype=bool)
    for k in range(flat_v.shape[0]):
        w = flat_m[k].astype(np.float64)
        num = lat_w @ np.where(flat_m[k], flat_v[k], 0.0) @ lon_w.T
        den = lat_w @ w @ lon_w.T
        ok = (den > 0.0) & (den >= min_valid_fraction * overlap)
        out[k][ok] = num[ok] / den[ok]
        out_mask[k] = ok
    return out.reshape(lead + coarse_grid.shape), out_mask.reshape(lead + coarse_grid.shape)


def aggregate_cube(cube: DataCube, coarse_grid: GeoGrid) -> DataCube:
    """Aggregate every channel and timestep of a cube onto a coarser grid."""
    values = np.zeros((cube.values.shape[0],) + coarse_grid.shape + (cube.values.shape[3],))
    mask = np.zeros(values.shape, dtype=bool)
    for c in range(cube.values.shape[3]):
        v, m = aggregate_to_coarse(cube.values[..., c], cube.mask[..., c], cube.grid, coarse_grid)
        values[..., c], mask[..., c] = v, m
    return DataCube(coarse_grid, cube.schema, cube.times, values.astype(cube.values.dtype), mask)


def aggregate_target(target: TargetField, coarse_grid: GeoGrid) -> TargetField:
    values, mask = aggregate_to_coarse(target.values, target.mask, target.grid, coarse_grid)
    return TargetField(coarse_grid, target.times, values, mask)


# ============================================================================
# PATCHES
# ============================================================================

@dataclass(frozen=True)
class Patch:
    """Training sample: input window ending at a target observation time."""
    patch_id: int
    window: np.ndarray          # t_len x S x S x C
    window_mask: np.ndarray     # t_len x S x S x C
    label: np.ndarray           # S x S
    label_mask: np.ndarray      # S x S
    anchor: Tuple[int, int, int]  # (cube time index, row, col)
    anchor_time: int


def spatial_anchors(n: int, size: int, stride: int) -> List[int]:
    if n < size:
        return []
    return list(range(0, n - size + 1, stride))


def extract_patches(
    cube: DataCube,
    target: TargetField,
    size: int = 32,
    t_len: int = 5,
    stride: int = 10
) -> List[Patch]:
    """
    Cut size x size x t_len windows whose LAST timestep is a target time.

    Patches whose label is entirely masked are dropped. Windows are views
    into the cube arrays.
    """
    if cube.grid != target.grid:
        raise ShapeMismatchError("Cube and target grids differ",
                                 {"cube": cube.grid.to_dict(), "target": target.grid.to_dict()})
    if size < 1 or t_len < 1 or stride < 1:
        raise ShapeMismatchError("Patch size, length and stride must be >= 1")
    rows = spatial_anchors(cube.grid.nlat, size, stride)
    cols = spatial_anchors(cube.grid.nlon, size, stride)
    patches: List[Patch] = []
    if not rows or not cols or t_len > cube.times.size:
        return patches

    cube_index = {int(t): i for i, t in enumerate(cube.times)}
    for ti, t in enumerate(target.times):
        k = cube_index.get(int(t))
        if k is None or k < t_len - 1:
            continue
        if not target.mask[ti].any():
            continue
        for r in rows:
            for c in cols:
                label_mask = target.mask[ti, r:r + size, c:c + size]
                if not label_mask.any():
                    continue
                patches.append(Patch(
                    patch_id=len(patches),
                    window=cube.values[k - t_len + 1:k + 1, r:r + size, c:c + size],
                    window_mask=cube.mask[k - t_len + 1:k + 1, r:r + size, c:c + size],
                    label=target.values[ti, r:r + size, c:c + size],
                    label_mask=label_mask,
                    anchor=(k, r, c),
                    anchor_time=int(t),
                ))
    logger.info("Extracted %d patches (%dx%d, T=%d, stride %d)", len(patches), size, size, t_len, stride)
    return patches


def _augment_array(array: np.ndarray, op: str, row_axis: int) -> np.ndarray:
    col_axis = row_axis + 1
    if op == "flip_h":
        return np.flip(array, axis=col_axis)
    if op == "flip_v":
        return np.flip(array, axis=row_axis)
    if op == "transpose":
        if array.shape[row_axis] != array.shape[col_axis]:
            raise ShapeMismatchError("Transpose needs a square patch",
                                     {"shape": list(array.shape)})
        return np.swapaxes(array, row_axis, col_axis)
    raise ValueError(f"Unknown augmentation: {op}. Available: {list(AUGMENT_OPS)}")


def augment(patch: Patch, op: str) -> Patch:
    """Apply one spatial symmetry to every channel, timestep, label and mask."""
    return replace(
        patch,
        window=_augment_array(patch.window, op, 1),
        window_mask=_augment_array(patch.window_mask, op, 1),
        label=_augment_array(patch.label, op, 0),
        label_mask=_augment_array(patch.label_mask, op, 0),
    )


def augment_sequence(patch: Patch, ops: Iterable[str]) -> Patch:
    for op in ops:
        patch = augment(patch, op)
    return patch


@dataclass
class PatchSplit:
    train: List[Patch]
    val: List[Patch]
    test: List[Patch]
    seed: int
    augment_train: bool = True

    def counts(self) -> Dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}

    def ids(self) -> Dict[str, List[int]]:
        return {k: [p.patch_id for p in getattr(self, k)] for k in ("train", "val", "test")}


def split_patches(
    patches: Sequence[Patch],
    seed: int,
    fractions: Tuple[float, float] = (0.15, 0.15)
) -> PatchSplit:
    """
    Deterministic 70/15/15 split; val and test get floor shares, train the rest.

    Augmentation is flagged for the train split only and applied by the
    trainer when batches are drawn.
    """
    n = len(patches)
    if n < 10:
        raise InsufficientDataError(f"Need at least 10 patches to split, got {n}",
                                    {"patches": n})
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(fractions[0] * n))
    n_test = int(math.floor(fractions[1] * n))
    val_idx = order[:n_val]
    test_idx = order[n_val:n_val + n_test]
    train_idx = order[n_val + n_test:]
    pick = lambda idx: [patches[i] for i in sorted(idx)]
    return PatchSplit(pick(train_idx), pick(val_idx), pick(test_idx), seed)


# ============================================================================
# STATIONS
# ============================================================================

@dataclass(frozen=True)
class SeasonWindow:
    """Month/day window [start, end) applied to UTC timestamps."""
    start: Tuple[int, int] = (4, 1)
    end: Tuple[int, int] = (11, 1)

    def contains(self, times: np.ndarray) -> np.ndarray:
        stamps = pd.to_datetime(np.asarray(times, dtype=np.int64), unit="s", utc=True)
        key = stamps.month * 100 + stamps.day
        lo = self.start[0] * 100 + self.start[1]
        hi = self.end[0] * 100 + self.end[1]
        if lo <= hi:
            return np.asarray((key >= lo) & (key < hi))
        return np.asarray((key >= lo) | (key < hi))

    @classmethod
    def parse(cls, text: Optional[str]) -> Optional["SeasonWindow"]:
        """Parse 'MM-DD:MM-DD'; None or 'all' disables the filter."""
        if text is None or text.lower() in ("all", "none", ""):
            return None
        try:
            a, b = text.split(":")
            sm, sd = (int(x) for x in a.split("-"))
            em, ed = (int(x) for x in b.split("-"))
        except ValueError:
            raise FormatError(f"Season must look like 04-01:11-01, got '{text}'")
        return cls((sm, sd), (em, ed))


def aggregate_station_to_bins(station: StationRecord, grid_times: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Mean of good samples within [t - 1.5 h, t + 1.5 h) of each grid time."""
    grid_times = np.asarray(grid_times, dtype=np.int64)
    half = STEP_SECONDS // 2
    good = station.good
    ts = station.times[good]
    vs = station.sm[good]
    lo = np.searchsorted(ts, grid_times - half, side="left")
    hi = np.searchsorted(ts, grid_times + half, side="left")
    counts = hi - lo
    csum = np.concatenate([[0.0], np.cumsum(vs)])
    sums = csum[hi] - csum[lo]
    valid = counts > 0
    out = np.zeros(grid_times.shape, dtype=np.float64)
    out[valid] = sums[valid] / counts[valid]
    return out, valid


def station_missing_rate(station: StationRecord, grid_times: Sequence[int]) -> float:
    _, valid = aggregate_station_to_bins(station, grid_times)
    return 1.0 - float(valid.mean()) if valid.size else 1.0


class StationOutsideGridError(StdownError):
    """Raised when a station lies outside the grid domain."""
    pass


def match_station_to_cell(station: StationRecord, grid: GeoGrid) -> Tuple[int, int]:
    """Nearest cell center; exact boundaries resolve to the lower index."""
    if not grid.contains(station.lat, station.lon):
        raise StationOutsideGridError(
            f"Station {station.id} lies outside the grid",
            {"station": station.id, "lat": station.lat, "lon": station.lon}
        )
    fi = (station.lat - grid.lat0) / grid.dlat
    fj = (station.lon - grid.lon0) / grid.dlon
    i = min(max(int(math.ceil(fi - 0.5)), 0), grid.nlat - 1)
    j = min(max(int(math.ceil(fj - 0.5)), 0), grid.nlon - 1)
    return i, j


@dataclass
class StationSelection:
    kept: Dict[str, Tuple[StationRecord, Tuple[int, int]]] = field(default_factory=dict)
    skipped: Dict[str, str] = field(default_factory=dict)
    missing_rates: Dict[str, float] = field(default_factory=dict)


def filter_stations(
    stations: Sequence[StationRecord],
    grid: GeoGrid,
    grid_times: Sequence[int],
    max_depth_cm: float = 5.0,
    max_missing: float = 0.95,
    season: Optional[SeasonWindow] = SeasonWindow()
) -> StationSelection:
    """
    Apply the station-processing rules and keep one station per grid cell.

    Rules: depth below max_depth_cm; good-quality samples only (enforced by
    binning); missing rate within the season window at most max_missing;
    among stations sharing a cell, the lowest missing rate wins (ties go to
    the smaller id).
    """
    grid_times = np.asarray(grid_times, dtype=np.int64)
    if season is not None:
        grid_times = grid_times[season.contains(grid_times)]
    sel = StationSelection()
    by_cell: Dict[Tuple[int, int], List[Tuple[float, str, StationRecord]]] = {}
    for st in stations:
        if not st.depth_cm < max_depth_cm:
            sel.skipped[st.id] = f"depth {st.depth_cm} cm not below {max_depth_cm} cm"
            continue
        try:
            cell = match_station_to_cell(st, grid)
        except StationOutsideGridError as e:
            sel.skipped[st.id] = e.message
            continue
        rate = station_missing_rate(st, grid_times)
        sel.missing_rates[st.id] = rate
        if rate > max_missing:
            sel.skipped[st.id] = f"missing rate {rate:.3f} exceeds {max_missing}"
            continue
        by_cell.setdefault(cell, []).append((rate, st.id, st))
    for cell, candidates in by_cell.items():
        candidates.sort(key=lambda c: (c[0], c[1]))
        rate, sid, st = candidates[0]
        sel.kept[sid] = (st, cell)
        for _, other, _ in candidates[1:]:
            sel.skipped[other] = f"cell {cell} represented by {sid}"
    for sid, reason in sel.skipped.items():
        logger.info("Station %s skipped: %s", sid, reason)
    return sel


STATION_COLUMNS = ["id", "lat", "lon", "depth_cm", "time_epoch", "sm", "quality"]


def load_stations(path: Path) -> List[StationRecord]:
    """Read stations.csv (one row per sample; optional network column)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    df = pd.read_csv(path, dtype={"id": str, "quality": str})
    missing = [c for c in STATION_COLUMNS if c not in df.columns]
    if missing:
        raise FormatError(f"stations.csv missing columns: {missing}", {"path": str(path)})
    if "network" not in df.columns:
        df["network"] = "all"
    stations = []
    for sid, g in df.groupby("id", sort=True):
        stations.append(StationRecord(
            id=str(sid), lat=float(g["lat"].iloc[0]), lon=float(g["lon"].iloc[0]),
            depth_cm=float(g["depth_cm"].iloc[0]),
            times=g["time_epoch"].to_numpy(np.int64), sm=g["sm"].to_numpy(np.float64),
            quality=g["quality"].fillna("").to_numpy(str), network=str(g["network"].iloc[0]),
        ))
    return stations


def save_stations(path: Path, stations: Sequence[StationRecord]) -> Path:
    frames = [pd.DataFrame({
        "id": st.id, "lat": st.lat, "lon": st.lon, "depth_cm": st.depth_cm,
        "time_epoch": st.times, "sm": st.sm, "quality": st.quality, "network": st.network,
    }) for st in stations]
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=STATION_COLUMNS + ["network"])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.17g")
    return path


# ============================================================================
# STC FORMAT
# ============================================================================

def _dtype_tag(values: np.ndarray, dtype: Optional[str]) -> str:
    if dtype is not None:
        if dtype not in STC_DTYPES:
            raise FormatError(f"Unsupported STC dtype '{dtype}'", {"allowed": list(STC_DTYPES)})
        return dtype
    return "f32le" if values.dtype == np.float32 else "f64le"


def save_cube(cube: DataCube, directory: Path, dtype: Optional[str] = None) -> Path:
    """Write a cube as an STC directory (float32 cubes as f32le, others f64le)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tag = _dtype_tag(cube.values, dtype)
    manifest = {
        "grid": cube.grid.to_dict(),
        "schema": cube.schema.to_list(),
        "times": [int(t) for t in cube.times],
        "dtype": tag,
        "order": STC_ORDER,
    }
    write_json(directory / STC_MANIFEST, manifest)
    np.ascontiguousarray(cube.values, dtype=STC_DTYPES[tag]).tofile(directory / STC_DATA)
    np.ascontiguousarray(cube.mask, dtype=np.uint8).tofile(directory / STC_MASK)
    return directory


def load_cube(directory: Path) -> DataCube:
    directory = Path(directory)
    manifest = read_json(directory / STC_MANIFEST)
    for key in ("grid", "schema", "times", "dtype"):
        if key not in manifest:
            raise FormatError(f"STC manifest missing '{key}'", {"path": str(directory)})
    if manifest.get("order", STC_ORDER) != STC_ORDER:
        raise FormatError(f"Unsupported STC order '{manifest['order']}'")
    tag = manifest["dtype"]
    if tag not in STC_DTYPES:
        raise FormatError(f"Unsupported STC dtype '{tag}'")
    grid = GeoGrid.from_dict(manifest["grid"])
    schema = VarSchema.from_list(manifest["schema"])
    times = np.asarray(manifest["times"], dtype=np.int64)
    shape = (times.size, grid.nlat, grid.nlon, len(schema))
    data = np.fromfile(directory / STC_DATA, dtype=STC_DTYPES[tag])
    mask = np.fromfile(directory / STC_MASK, dtype=np.uint8)
    expected = int(np.prod(shape))
    if data.size != expected or mask.size != expected:
        raise FormatError(
            "STC payload size does not match manifest",
            {"expected": expected, "data": int(data.size), "mask": int(mask.size)}
        )
    values = data.reshape(shape).astype(STC_DTYPES[tag].newbyteorder("="))
    return DataCube(grid, schema, times, values, mask.reshape(shape).astype(bool))


TARGET_SCHEMA = VarSchema((Channel("sm", "dynamic", "m3/m3"),))


def save_target(target: TargetField, directory: Path, dtype: Optional[str] = None) -> Path:
    """Write a soil-moisture field as a single-channel STC directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tag = _dtype_tag(target.values, dtype)
    manifest = {
        "grid": target.grid.to_dict(),
        "schema": TARGET_SCHEMA.to_list(),
        "times": [int(t) for t in target.times],
        "dtype": tag,
        "order": STC_ORDER,
    }
    write_json(directory / STC_MANIFEST, manifest)
    np.ascontiguousarray(target.values[..., None], dtype=STC_DTYPES[tag]).tofile(directory / STC_DATA)
    np.ascontiguousarray(target.mask[..., None], dtype=np.uint8).tofile(directory / STC_MASK)
    return directory


def load_target(directory: Path) -> TargetField:
    """Read a single-channel STC directory; its time axis need not be uniform."""
    directory = Path(directory)
    manifest = read_json(directory / STC_MANIFEST)
    tag = manifest.get("dtype")
    if tag not in STC_DTYPES:
        raise FormatError(f"Unsupported STC dtype '{tag}'")
    grid = GeoGrid.from_dict(manifest["grid"])
    schema = VarSchema.from_list(manifest["schema"])
    if len(schema) != 1:
        raise FormatError("Target STC must hold exactly one channel",
                          {"channels": list(schema.names)})
    times = np.asarray(manifest["times"], dtype=np.int64)
    shape = (times.size, grid.nlat, grid.nlon)
    data = np.fromfile(directory / STC_DATA, dtype=STC_DTYPES[tag])
    mask = np.fromfile(directory / STC_MASK, dtype=np.uint8)
    if data.size != int(np.prod(shape)) or mask.size != data.size:
        raise FormatError("STC payload size does not match manifest")
    values = data.reshape(shape).astype(STC_DTYPES[tag].newbyteorder("="))
    return TargetField(grid, times, values, mask.reshape(shape).astype(bool))


def save_field_map(directory: Path, grid: GeoGrid, name: str, units: str,
                   values: np.ndarray, mask: np.ndarray, time: int = 0) -> Path:
    """Write a single 2-D map as a one-step single-channel STC cube."""
    schema = VarSchema((Channel(name, "static", units),))
    cube = DataCube(grid, schema, np.array([time]),
                    np.asarray(values, dtype=np.float64)[None, ..., None],
                    np.asarray(mask, dtype=bool)[None, ..., None])
    return save_cube(cube, directory)


__all__ = [
    "GeoGrid", "DomainBounds", "Channel", "VarSchema", "DataCube", "TargetField",
    "StationRecord", "NormStats", "Patch", "PatchSplit", "SeasonWindow",
    "StationSelection", "StationOutsideGridError",
    "qc_filter_sm", "zscore_fit", "zscore_apply", "zscore_fit_target",
    "bilinear_resample", "temporal_interp", "aggregate_to_coarse", "aggregate_cube",
    "aggregate_target", "extract_patches", "augment", "augment_sequence",
    "split_patches", "match_station_to_cell", "filter_stations",
    "aggregate_station_to_bins", "station_missing_rate",
    "load_stations", "save_stations", "save_cube", "load_cube",
    "save_target", "load_target", "save_field_map",
    "DIHEDRAL_SEQUENCES", "AUGMENT_OPS",
]
