#!/usr/bin/env python3
"""
Deterministic synthetic scenes with a known fine-scale soil-moisture truth.

Truth mapping (every coefficient is part of the scene manifest):
    memory_k = lam * memory_{k-1} + precip_k
    z        = bias + w_memory * memory - w_temperature * anomaly
               + w_texture * (clay - sand)
    logistic: sm = 0.02 + 0.58 * sigmoid(z)
    linear:   sm = linear_center + linear_slope * z
    sm is clamped to [0.02, 0.6]

Scene directory:
    fine/ coarse/        STC input cubes
    target/              coarse target at 06/18 UTC with gaps
    truth_fine/          fine truth at every timestamp
    truth_coarse/        coarse aggregate of the truth at every timestamp
    stations.csv         noisy point series
    scene.json           scene manifest
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from core.geodata import (
    Channel, DataCube, GeoGrid, StationRecord, TargetField, VarSchema,
    aggregate_cube, aggregate_target, aggregate_to_coarse, bilinear_resample,
    qc_filter_sm, save_cube, save_stations, save_target, temporal_interp,
)
from core.stdown_core import (
    STEP_SECONDS, TRAINING_HOURS, ConfigError, FormatError, canonical_hash,
    check_unknown_keys, write_json,
)

logger = logging.getLogger(__name__)

MAPPINGS = ("logistic", "linear")
SM_FLOOR, SM_CEIL = 0.02, 0.6

SCENE_SCHEMA = VarSchema((
    Channel("precipitation", "dynamic", "mm/3h"),
    Channel("air_temperature", "dynamic", "K"),
    Channel("shortwave_radiation", "dynamic", "W/m2"),
    Channel("specific_humidity", "dynamic", "g/kg"),
    Channel("wind_speed", "dynamic", "m/s"),
    Channel("wetness_index", "dynamic", "mm"),
    Channel("sand_fraction", "static", "1"),
    Channel("clay_fraction", "static", "1"),
    Channel("elevation", "static", "m"),
))

# random stream ids; every draw uses default_rng([seed, stream, step])
_PRECIP, _TEMP, _HUMID, _WIND, _STATIC, _GAPS, _STATIONS, _NOISE = range(1, 9)


@dataclass
class SceneSpec:
    seed: int = 0
    origin_lat: float = 35.0
    origin_lon: float = -100.0
    fine_n: int = 90
    fine_step: float = 0.1
    coarse_n: int = 25
    coarse_step: float = 0.36
    start_epoch: int = 1622505600        # 2021-06-01 00:00 UTC
    days: int = 60
    spinup_steps: int = 16
    correlation_length: float = 6.0      # fine cells
    ar_coeff: float = 0.9
    precip_memory: float = 0.8
    precip_threshold: float = 1.0
    precip_scale: float = 4.0
    mapping: str = "logistic"
    bias: float = -0.5
    w_memory: float = 0.6
    w_temperature: float = 0.4
    w_texture: float = 2.0
    linear_center: float = 0.25
    linear_slope: float = 0.05
    input_noise: float = 0.0
    target_noise: float = 0.0
    station_noise: float = 0.02
    gap_fraction: float = 0.1
    water_fraction: float = 0.0
    n_stations: int = 20
    station_depth_cm: float = 2.5

    @property
    def n_steps(self) -> int:
        return self.days * 86400 // STEP_SECONDS

    def fine_grid(self) -> GeoGrid:
        return GeoGrid(self.origin_lat + self.fine_step / 2, self.origin_lon + self.fine_step / 2,
                       self.fine_step, self.fine_step, self.fine_n, self.fine_n)

    def coarse_grid(self) -> GeoGrid:
        return GeoGrid(self.origin_lat + self.coarse_step / 2, self.origin_lon + self.coarse_step / 2,
                       self.coarse_step, self.coarse_step, self.coarse_n, self.coarse_n)

    def times(self) -> np.ndarray:
        return self.start_epoch + STEP_SECONDS * np.arange(self.n_steps, dtype=np.int64)

    def validate(self) -> "SceneSpec":
        if self.fine_n < 2 or self.coarse_n < 1 or self.fine_step <= 0 or self.coarse_step <= 0:
            raise ConfigError("Degenerate scene grid",
                              {"fine_n": self.fine_n, "coarse_n": self.coarse_n})
        if not self.coarse_step > self.fine_step:
            raise ConfigError("Coarse grid must be coarser than the fine grid",
                              {"fine_step": self.fine_step, "coarse_step": self.coarse_step})
        if self.coarse_n * self.coarse_step > self.fine_n * self.fine_step * (1 + 1e-9):
            raise ConfigError("Coarse grid extends beyond the fine grid")
        if self.days < 1 or self.spinup_steps < 0:
            raise ConfigError("scene.days must be >= 1 and spinup_steps >= 0")
        if self.start_epoch % STEP_SECONDS:
            raise ConfigError("scene.start_epoch must fall on a 3-hour boundary")
        if self.mapping not in MAPPINGS:
            raise ConfigError(f"scene.mapping must be one of {list(MAPPINGS)}")
        if not 0.0 <= self.ar_coeff < 1.0 or not 0.0 <= self.precip_memory < 1.0:
            raise ConfigError("scene.ar_coeff and scene.precip_memory must lie in [0, 1)")
        if self.w_memory < 0:
            raise ConfigError("scene.w_memory must be >= 0")
        if not 0.0 <= self.gap_fraction <= 1.0 or not 0.0 <= self.water_fraction <= 1.0:
            raise ConfigError("scene gap and water fractions must lie in [0, 1]")
        if min(self.input_noise, self.target_noise, self.station_noise) < 0:
            raise ConfigError("scene noise levels must be >= 0")
        if not 0 <= self.n_stations <= self.fine_n ** 2:
            raise ConfigError("scene.n_stations must fit on the fine grid")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "SceneSpec":
        data = dict(data or {})
        check_unknown_keys("scene", data, [f.name for f in fields(cls)])
        return cls(**data).validate()


class Scene(NamedTuple):
    cube_fine: DataCube
    cube_coarse: DataCube
    truth_fine: TargetField
    target_coarse: TargetField
    stations: List[StationRecord]


# ============================================================================
# RANDOM FIELDS
# ============================================================================

def _stream(spec: SceneSpec, stream: int, step: int = 0) -> np.random.Generator:
    return np.random.default_rng([spec.seed, stream, step])


def smooth_field(rng: np.random.Generator, shape: Tuple[int, int], length: float) -> np.ndarray:
    """Unit-variance Gaussian random field with the given correlation length in cells."""
    field = gaussian_filter(rng.standard_normal(shape), sigma=length, mode="wrap")
    std = field.std()
    return (field - field.mean()) / std if std > 0 else field


def _ar1(previous: Optional[np.ndarray], innovation: np.ndarray, phi: float) -> np.ndarray:
    if previous is None:
        return innovation
    return phi * previous + math.sqrt(1.0 - phi ** 2) * innovation


def truth_mapping(spec: SceneSpec, memory: np.ndarray, anomaly: np.ndarray,
                  sand: np.ndarray, clay: np.ndarray) -> np.ndarray:
    """Soil moisture from precipitation memory, temperature anomaly and texture."""
    z = (spec.bias + spec.w_memory * memory - spec.w_temperature * anomaly
         + spec.w_texture * (clay - sand))
    if spec.mapping == "logistic":
        sm = SM_FLOOR + (SM_CEIL - SM_FLOOR) / (1.0 + np.exp(-z))
    else:
        sm = spec.linear_center + spec.linear_slope * z
    return np.clip(sm, SM_FLOOR, SM_CEIL)


def _static_fields(spec: SceneSpec, grid: GeoGrid) -> Dict[str, np.ndarray]:
    rng = _stream(spec, _STATIC)
    shape = grid.shape
    sand = np.clip(0.4 + 0.15 * smooth_field(rng, shape, spec.correlation_length), 0.05, 0.95)
    clay = np.clip(0.25 + 0.1 * smooth_field(rng, shape, spec.correlation_length), 0.02, 0.7)
    # topography is drawn on a half-resolution grid and resampled
    n_half = (spec.fine_n + 1) // 2 + 1
    half = GeoGrid(spec.origin_lat + spec.fine_step, spec.origin_lon + spec.fine_step,
                   2 * spec.fine_step, 2 * spec.fine_step, n_half, n_half)
    relief = smooth_field(rng, half.shape, spec.correlation_length / 2)
    elevation, _ = bilinear_resample(500.0 + 300.0 * relief, np.ones(half.shape, bool), half, grid)
    return {"sand_fraction": sand, "clay_fraction": clay, "elevation": elevation}


def _humidity(spec: SceneSpec, grid: GeoGrid, times: np.ndarray) -> np.ndarray:
    # drawn 6-hourly, interpolated onto the 3-hour axis
    first = times[0] - spec.spinup_steps * STEP_SECONDS
    n_src = (times[-1] - first) // (2 * STEP_SECONDS) + 2
    src_times = first + 2 * STEP_SECONDS * np.arange(n_src, dtype=np.int64)
    state = None
    draws = np.zeros((n_src,) + grid.shape)
    for j in range(n_src):
        state = _ar1(state, smooth_field(_stream(spec, _HUMID, j), grid.shape,
                                         spec.correlation_length), spec.ar_coeff)
        draws[j] = 8.0 + 2.0 * state
    values, _ = temporal_interp(draws, np.ones(draws.shape, bool), src_times, times)
    return values


# ============================================================================
# SCENE GENERATION
# ============================================================================

def gen_scene(spec: SceneSpec) -> Scene:
    """Generate the fine/coarse cubes, fine truth, coarse target and stations."""
    spec.validate()
    fine, coarse = spec.fine_grid(), spec.coarse_grid()
    times = spec.times()
    n_out, shape = times.size, fine.shape
    static = _static_fields(spec, fine)
    humidity = _humidity(spec, fine, times)

    values = np.zeros((n_out,) + shape + (len(SCENE_SCHEMA),))
    truth = np.zeros((n_out,) + shape)
    precip_state = temp_state = wind_state = None
    memory = np.zeros(shape)
    lapse = -6.5e-3 * (static["elevation"] - 500.0)

    for k in range(-spec.spinup_steps, n_out):
        step = k + spec.spinup_steps
        precip_state = _ar1(precip_state, smooth_field(_stream(spec, _PRECIP, step), shape,
                                                       spec.correlation_length), spec.ar_coeff)
        temp_state = _ar1(temp_state, smooth_field(_stream(spec, _TEMP, step), shape,
                                                   spec.correlation_length), spec.ar_coeff)
        wind_state = _ar1(wind_state, smooth_field(_stream(spec, _WIND, step), shape,
                                                   spec.correlation_length), spec.ar_coeff)
        precip = spec.precip_scale * np.maximum(precip_state - spec.precip_threshold, 0.0)
        memory = spec.precip_memory * memory + precip
        if k < 0:
            continue
        hour = int(times[k] // 3600 % 24)
        diurnal = math.sin(2.0 * math.pi * (hour - 9) / 24.0)
        sun = max(0.0, math.sin(math.pi * (hour - 6) / 12.0))
        cloud = 1.0 / (1.0 + np.exp(-precip_state))
        wetness = memory
        if spec.input_noise > 0:
            wetness = memory + spec.input_noise * _stream(spec, _NOISE, step).standard_normal(shape)
        values[k, ..., 0] = precip
        values[k, ..., 1] = 293.0 + 6.0 * diurnal + 3.0 * temp_state + lapse
        values[k, ..., 2] = 800.0 * sun * (1.0 - 0.3 * cloud)
        values[k, ..., 3] = humidity[k]
        values[k, ..., 4] = np.maximum(3.0 + 1.5 * wind_state, 0.0)
        values[k, ..., 5] = wetness
        values[k, ..., 6] = static["sand_fraction"]
        values[k, ..., 7] = static["clay_fraction"]
        values[k, ..., 8] = static["elevation"]
        truth[k] = truth_mapping(spec, memory, temp_state, static["sand_fraction"],
                                 static["clay_fraction"])

    cube_fine = DataCube(fine, SCENE_SCHEMA, times, values, np.ones(values.shape, bool))
    cube_coarse = aggregate_cube(cube_fine, coarse)
    truth_fine = TargetField(fine, times, truth, np.ones(truth.shape, bool))
    target = coarse_target(spec, truth_fine, cube_coarse)
    stations = gen_stations(spec, truth_fine)
    logger.info("Scene seed %d: %d steps, %d target times, %d stations",
                spec.seed, n_out, target.times.size, len(stations))
    return Scene(cube_fine, cube_coarse, truth_fine, target, stations)


def _gap_mask(spec: SceneSpec, shape: Tuple[int, int], step: int) -> np.ndarray:
    """Spatially coherent gaps covering round(gap_fraction * cells) cells."""
    n_gap = int(round(spec.gap_fraction * shape[0] * shape[1]))
    gaps = np.zeros(shape, dtype=bool)
    if n_gap:
        field = smooth_field(_stream(spec, _GAPS, step), shape, max(spec.correlation_length / 3, 1.0))
        gaps.flat[np.argsort(field, axis=None, kind="stable")[:n_gap]] = True
    return gaps


def coarse_target(spec: SceneSpec, truth_fine: TargetField, cube_coarse: DataCube) -> TargetField:
    """Aggregated truth at the training hours with gaps, QC and optional noise."""
    coarse = spec.coarse_grid()
    hours = truth_fine.times // 3600 % 24
    keep = np.isin(hours, TRAINING_HOURS)
    idx = np.flatnonzero(keep)
    values, mask = aggregate_to_coarse(truth_fine.values[idx], truth_fine.mask[idx],
                                       truth_fine.grid, coarse)
    for n, k in enumerate(idx):
        mask[n] &= ~_gap_mask(spec, coarse.shape, int(k))
        if spec.target_noise > 0:
            noise = _stream(spec, _NOISE, 10 ** 6 + int(k)).standard_normal(coarse.shape)
            values[n] = np.clip(values[n] + spec.target_noise * noise, 0.0, 1.0)
    target = TargetField(coarse, truth_fine.times[idx], values, mask)

    water = np.zeros(coarse.shape)
    n_water = int(round(spec.water_fraction * water.size))
    if n_water:
        cells = _stream(spec, _STATIC, 1).choice(water.size, size=n_water, replace=False)
        water.flat[cells] = 0.5
    temperature = cube_coarse.values[idx, ..., cube_coarse.schema.index("air_temperature")]
    return qc_filter_sm(target, temperature, water)


def gen_stations(spec: SceneSpec, truth_fine: TargetField) -> List[StationRecord]:
    """Point series at distinct random fine cells: truth plus Gaussian noise."""
    rng = _stream(spec, _STATIONS)
    grid = truth_fine.grid
    cells = rng.choice(grid.nlat * grid.nlon, size=spec.n_stations, replace=False)
    lats, lons = grid.lats(), grid.lons()
    stations = []
    for n, cell in enumerate(cells):
        i, j = divmod(int(cell), grid.nlon)
        offset = rng.uniform(-0.25, 0.25, size=2)
        series = truth_fine.values[:, i, j].astype(np.float64)
        noise = rng.standard_normal(series.size)
        if spec.station_noise > 0:
            series = np.clip(series + spec.station_noise * noise, 0.0, 1.0)
        stations.append(StationRecord(
            id=f"S{n:03d}", lat=float(lats[i] + offset[0] * grid.dlat),
            lon=float(lons[j] + offset[1] * grid.dlon), depth_cm=spec.station_depth_cm,
            times=truth_fine.times, sm=series, quality=np.full(series.size, "G"),
            network="network_a" if n % 2 == 0 else "network_b",
        ))
    return stations


# ============================================================================
# MANIFEST & OUTPUT
# ============================================================================

def scene_manifest(spec: SceneSpec) -> str:
    """Canonical JSON text of every scene parameter plus its hash."""
    data = spec.to_dict()
    return json.dumps({"scene": data, "hash": canonical_hash(data)}, indent=2, sort_keys=True)


def parse_manifest(text: str) -> SceneSpec:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid scene manifest: {e}")
    if not isinstance(data, dict):
        raise FormatError("Scene manifest must be a JSON object")
    return SceneSpec.from_dict(data.get("scene", data))


def scene_hash(spec: SceneSpec) -> str:
    return canonical_hash(spec.to_dict())


def write_scene(scene: Scene, spec: SceneSpec, out_dir: Path) -> Dict[str, Any]:
    """Write every scene product under out_dir and return a summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_cube(scene.cube_fine, out_dir / "fine")
    save_cube(scene.cube_coarse, out_dir / "coarse")
    save_target(scene.target_coarse, out_dir / "target")
    save_target(scene.truth_fine, out_dir / "truth_fine")
    save_target(aggregate_target(scene.truth_fine, spec.coarse_grid()), out_dir / "truth_coarse")
    save_stations(out_dir / "stations.csv", scene.stations)
    (out_dir / "scene.json").write_text(scene_manifest(spec), encoding="utf-8")
    summary = {
        "hash": scene_hash(spec),
        "fine_shape": list(scene.cube_fine.shape),
        "coarse_shape": list(scene.cube_coarse.shape),
        "target_times": int(scene.target_coarse.times.size),
        "target_valid_fraction": float(scene.target_coarse.mask.mean()) if scene.target_coarse.mask.size else 0.0,
        "stations": len(scene.stations),
    }
    write_json(out_dir / "scene_summary.json", summary)
    return summary


__all__ = [
    "SceneSpec", "Scene", "SCENE_SCHEMA", "MAPPINGS", "smooth_field", "truth_mapping",
    "gen_scene", "coarse_target", "gen_stations", "scene_manifest", "parse_manifest",
    "scene_hash", "write_scene",
]
