#!/usr/bin/env python3
"""
Validation battery: series metrics, coarse-aggregation and station
validation, relative generalization error and three-cornered-hat variances.

Conventions:
    bias   = mean(x - y), x the product, y the reference
    ubRMSE = sqrt(mean(((x - mean x) - (y - mean y))^2))
    absent metrics are None (NaN in CSV), never 0
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.geodata import (
    GeoGrid, SeasonWindow, StationRecord, TargetField, aggregate_station_to_bins,
    aggregate_to_coarse, filter_stations, match_station_to_cell, StationOutsideGridError,
)
from core.stdown_core import (
    NON_TRAINING_HOURS, TRAINING_HOURS, InsufficientDataError, ShapeMismatchError,
    finite_or_none, write_json,
)

logger = logging.getLogger(__name__)

Array = np.ndarray

METRIC_COLUMNS = ["n", "r", "bias", "rmse", "ubrmse"]
MIN_PAIRS_R = 2
MIN_TCH_SAMPLES = 30


# ============================================================================
# SERIES METRICS
# ============================================================================

@dataclass
class MetricsReport:
    n: int
    r: Optional[float]
    bias: Optional[float]
    rmse: Optional[float]
    ubrmse: Optional[float]
    product: str = "product"
    reference: str = "reference"
    maps: Dict[str, Array] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"n": self.n, "r": self.r, "bias": self.bias, "rmse": self.rmse,
                "ubrmse": self.ubrmse, "product": self.product, "reference": self.reference}


def paired(x: Array, y: Array, valid: Optional[Array] = None) -> Tuple[Array, Array]:
    """Pairs where both sides are finite (and valid, when a mask is given)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeMismatchError("Series lengths differ", {"x": x.size, "y": y.size})
    keep = np.isfinite(x) & np.isfinite(y)
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool).reshape(-1)
    return x[keep], y[keep]


def metrics(x: Array, y: Array, valid: Optional[Array] = None,
            product: str = "product", reference: str = "reference") -> MetricsReport:
    """R, bias, RMSE and ubRMSE of x against y over paired valid samples."""
    x, y = paired(x, y, valid)
    n = int(x.size)
    if n == 0:
        return MetricsReport(0, None, None, None, None, product, reference)
    diff = x - y
    bias = float(np.mean(diff))
    rmse = float(np.sqrt(np.mean(diff ** 2)))
    r = ubrmse = None
    if n >= MIN_PAIRS_R:
        dx = x - np.mean(x)
        dy = y - np.mean(y)
        ubrmse = float(np.sqrt(np.mean((dx - dy) ** 2)))
        denom = np.sqrt(np.sum(dx ** 2) * np.sum(dy ** 2))
        if denom > 0:
            r = float(np.clip(np.sum(dx * dy) / denom, -1.0, 1.0))
    return MetricsReport(n, r, bias, rmse, ubrmse, product, reference)


def per_pixel_metrics(x: Array, x_mask: Array, y: Array, y_mask: Array) -> Dict[str, Array]:
    """Temporal metrics at every cell of T x H x W stacks; NaN where absent."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = np.asarray(x_mask, bool) & np.asarray(y_mask, bool) & np.isfinite(x) & np.isfinite(y)
    n = valid.sum(axis=0)
    w = valid.astype(np.float64)
    safe_n = np.maximum(n, 1)
    xv, yv = np.where(valid, x, 0.0), np.where(valid, y, 0.0)
    mx, my = xv.sum(axis=0) / safe_n, yv.sum(axis=0) / safe_n
    dx, dy = (xv - mx) * w, (yv - my) * w
    sxy, sxx, syy = (dx * dy).sum(axis=0), (dx ** 2).sum(axis=0), (dy ** 2).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.clip(sxy / np.sqrt(sxx * syy), -1.0, 1.0)
        bias = ((xv - yv) * w).sum(axis=0) / n
        rmse = np.sqrt((((xv - yv) ** 2) * w).sum(axis=0) / n)
        ubrmse = np.sqrt((((dx - dy) ** 2)).sum(axis=0) / n)
    r = np.where((n >= MIN_PAIRS_R) & (sxx * syy > 0), r, np.nan)
    ubrmse = np.where(n >= MIN_PAIRS_R, ubrmse, np.nan)
    bias = np.where(n >= 1, bias, np.nan)
    rmse = np.where(n >= 1, rmse, np.nan)
    return {"n": n, "r": r, "bias": bias, "rmse": rmse, "ubrmse": ubrmse}


# ============================================================================
# COARSE VALIDATION
# ============================================================================

class CoarseValidation(NamedTuple):
    report: MetricsReport
    maps: Dict[str, Array]
    grid: GeoGrid
    times: Array


def shared_times(a: Sequence[int], b: Sequence[int]) -> Tuple[Array, Array, Array]:
    times, ia, ib = np.intersect1d(np.asarray(a, np.int64), np.asarray(b, np.int64),
                                   return_indices=True)
    return times, ia, ib


def validate_vs_coarse(product: TargetField, truth_coarse: TargetField) -> CoarseValidation:
    """Aggregate the fine product to the coarse grid and compare."""
    times, ip, it = shared_times(product.times, truth_coarse.times)
    if times.size == 0:
        raise InsufficientDataError("Product and coarse reference share no timestamps")
    agg, agg_mask = aggregate_to_coarse(product.values[ip], product.mask[ip],
                                        product.grid, truth_coarse.grid)
    ref = truth_coarse.values[it]
    ref_mask = truth_coarse.mask[it]
    report = metrics(agg, ref, agg_mask & ref_mask, "product_aggregated", "coarse_reference")
    maps = per_pixel_metrics(agg, agg_mask, ref, ref_mask)
    report.maps = maps
    logger.info("Coarse validation over %d timestamps: R=%s", times.size, report.r)
    return CoarseValidation(report, maps, truth_coarse.grid, times)


# ============================================================================
# STATION VALIDATION
# ============================================================================

@dataclass
class StationPairs:
    station: StationRecord
    cell: Tuple[int, int]
    times: Array
    product: Array
    insitu: Array


@dataclass
class StationValidation:
    stations: List[Dict[str, Any]]
    networks: Dict[str, MetricsReport]
    skipped: Dict[str, str]
    pairs: List[StationPairs] = field(default_factory=list)


def station_pairs(
    product: TargetField,
    stations: Sequence[StationRecord],
    season: Optional[SeasonWindow] = SeasonWindow(),
    max_depth_cm: float = 5.0,
    max_missing: float = 0.95
) -> Tuple[List[StationPairs], Dict[str, str]]:
    """Binned in-situ vs product samples at every kept station."""
    selection = filter_stations(stations, product.grid, product.times, max_depth_cm,
                                max_missing, season)
    skipped = dict(selection.skipped)
    in_season = season.contains(product.times) if season is not None else np.ones(product.times.size, bool)
    out: List[StationPairs] = []
    for sid in sorted(selection.kept):
        st, (i, j) = selection.kept[sid]
        insitu, ok = aggregate_station_to_bins(st, product.times)
        keep = ok & in_season & product.mask[:, i, j]
        if not keep.any():
            skipped[sid] = "no overlapping samples"
            logger.info("Station %s skipped: no overlapping samples", sid)
            continue
        out.append(StationPairs(st, (i, j), product.times[keep], product.values[keep, i, j], insitu[keep]))
    return out, skipped


def validate_vs_stations(
    product: TargetField,
    stations: Sequence[StationRecord],
    season: Optional[SeasonWindow] = SeasonWindow(),
    max_depth_cm: float = 5.0,
    max_missing: float = 0.95
) -> StationValidation:
    """Metrics per station and pooled per network (plus the 'all' pool)."""
    pairs, skipped = station_pairs(product, stations, season, max_depth_cm, max_missing)
    rows = []
    pools: Dict[str, List[StationPairs]] = {}
    for sp in pairs:
        rep = metrics(sp.product, sp.insitu, product="product", reference=f"station:{sp.station.id}")
        rows.append({"scope": "station", "id": sp.station.id, "network": sp.station.network,
                     "row": sp.cell[0], "col": sp.cell[1], **_metric_row(rep)})
        pools.setdefault(sp.station.network, []).append(sp)
        if sp.station.network != "all":
            pools.setdefault("all", []).append(sp)
    networks = {}
    for name in sorted(pools):
        group = pools[name]
        networks[name] = metrics(np.concatenate([g.product for g in group]),
                                 np.concatenate([g.insitu for g in group]),
                                 product="product", reference=f"network:{name}")
    return StationValidation(rows, networks, skipped, pairs)


def metrics_by_hour(pairs: Sequence[StationPairs]) -> pd.DataFrame:
    """Pooled station metrics at each of the eight 3-hour UTC timestamps."""
    rows = []
    for hour in range(0, 24, 3):
        xs, ys = [], []
        for sp in pairs:
            at = pd.to_datetime(sp.times, unit="s", utc=True).hour == hour
            xs.append(sp.product[np.asarray(at)])
            ys.append(sp.insitu[np.asarray(at)])
        x = np.concatenate(xs) if xs else np.zeros(0)
        y = np.concatenate(ys) if ys else np.zeros(0)
        rows.append({"hour": hour, **_metric_row(metrics(x, y))})
    return pd.DataFrame(rows, columns=["hour"] + METRIC_COLUMNS)


def network_dynamics(
    product: TargetField,
    pairs: Sequence[StationPairs],
    coarse: Optional[TargetField] = None
) -> pd.DataFrame:
    """Network-mean in-situ, product and coarse-target series at each timestamp."""
    frames = []
    for sp in pairs:
        frame = pd.DataFrame({"network": sp.station.network, "time_epoch": sp.times,
                              "insitu": sp.insitu, "product": sp.product})
        if coarse is not None:
            try:
                ci, cj = match_station_to_cell(sp.station, coarse.grid)
                idx = {int(t): k for k, t in enumerate(coarse.times)}
                vals = [coarse.values[idx[t], ci, cj] if t in idx and coarse.mask[idx[t], ci, cj]
                        else np.nan for t in (int(x) for x in sp.times)]
                frame["coarse"] = vals
            except StationOutsideGridError:
                frame["coarse"] = np.nan
        frames.append(frame)
    columns = ["network", "time_epoch", "insitu", "product"] + (["coarse"] if coarse is not None else [])
    if not frames:
        return pd.DataFrame(columns=columns + ["stations"])
    data = pd.concat(frames, ignore_index=True)
    grouped = data.groupby(["network", "time_epoch"], sort=True)
    out = grouped[[c for c in columns[2:]]].mean()
    out["stations"] = grouped.size()
    return out.reset_index()


def _metric_row(rep: MetricsReport) -> Dict[str, Any]:
    return {"n": rep.n, "r": rep.r, "bias": rep.bias, "rmse": rep.rmse, "ubrmse": rep.ubrmse}


# ============================================================================
# RELATIVE GENERALIZATION ERROR
# ============================================================================

@dataclass
class RETable:
    baseline_r: Optional[float]
    baseline_ubrmse: Optional[float]
    rows: List[Dict[str, Any]]
    mean_re_r: Optional[float]
    mean_re_ubrmse: Optional[float]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["hour", "r", "ubrmse", "re_r", "re_ubrmse"])

    def to_dict(self) -> Dict[str, Any]:
        return {"baseline_r": self.baseline_r, "baseline_ubrmse": self.baseline_ubrmse,
                "mean_re_r": self.mean_re_r, "mean_re_ubrmse": self.mean_re_ubrmse,
                "rows": self.rows}


def _lookup(table: Dict[int, Dict[str, Optional[float]]], hour: int, key: str) -> Optional[float]:
    value = table.get(hour, {}).get(key)
    return finite_or_none(value)


def _relative(value: Optional[float], base: Optional[float], higher_is_better: bool) -> Optional[float]:
    if value is None or base is None or base == 0.0:
        return None
    return (value - base) / base if higher_is_better else (base - value) / base


def _mean_or_none(values: Sequence[Optional[float]]) -> Optional[float]:
    if not values or any(v is None for v in values):
        return None
    return float(np.mean(values))


def relgen(by_hour) -> RETable:
    """
    Relative change of R and ubRMSE at the non-training hours.

    by_hour is a DataFrame with hour, r and ubrmse columns, or a mapping
    hour -> {"r": ..., "ubrmse": ...}. The baseline is the mean of the
    06 and 18 UTC values; positive entries mean better than baseline.
    """
    if isinstance(by_hour, pd.DataFrame):
        missing = {"hour", "r", "ubrmse"} - set(by_hour.columns)
        if missing:
            raise ShapeMismatchError(f"Metrics table missing columns: {sorted(missing)}")
        table = {int(row["hour"]): {"r": row["r"], "ubrmse": row["ubrmse"]}
                 for _, row in by_hour.iterrows()}
    else:
        table = {int(h): dict(v) for h, v in by_hour.items()}

    def baseline(key: str) -> Optional[float]:
        a, b = (_lookup(table, h, key) for h in TRAINING_HOURS)
        return None if a is None or b is None else (a + b) / 2.0

    base_r, base_ub = baseline("r"), baseline("ubrmse")
    rows = []
    for hour in NON_TRAINING_HOURS:
        r, ub = _lookup(table, hour, "r"), _lookup(table, hour, "ubrmse")
        rows.append({"hour": hour, "r": r, "ubrmse": ub,
                     "re_r": _relative(r, base_r, True),
                     "re_ubrmse": _relative(ub, base_ub, False)})
    return RETable(base_r, base_ub, rows,
                   _mean_or_none([row["re_r"] for row in rows]),
                   _mean_or_none([row["re_ubrmse"] for row in rows]))


# ============================================================================
# THREE-CORNERED HAT
# ============================================================================

class TCHResult(NamedTuple):
    variances: Optional[Array]
    clamped: Array
    method: str
    n: int
    valid: bool


def _difference_variances(series: Array) -> Array:
    p = series.shape[0]
    v = np.zeros((p, p))
    for a in range(p):
        for b in range(a + 1, p):
            d = series[a] - series[b]
            v[a, b] = v[b, a] = np.mean((d - np.mean(d)) ** 2)
    return v


def tch(series: Array, valid: Optional[Array] = None, min_samples: int = MIN_TCH_SAMPLES) -> TCHResult:
    """
    Error variance of each of P >= 3 co-located products.

    Three products use the closed form from pairwise difference variances;
    more products solve the reference-difference covariance equations by
    least squares. Negative estimates are clamped to 0 and flagged.
    """
    series = np.asarray(series, dtype=np.float64)
    p = series.shape[0]
    if p < 3:
        raise InsufficientDataError(f"TCH needs at least 3 products, got {p}")
    keep = np.all(np.isfinite(series), axis=0)
    if valid is not None:
        keep &= np.all(np.asarray(valid, dtype=bool), axis=0)
    series = series[:, keep]
    n = int(series.shape[1])
    method = "closed_form" if p == 3 else "least_squares"
    none = np.zeros(p, dtype=bool)
    if n < min_samples:
        return TCHResult(None, none, method, n, False)

    if p == 3:
        v = _difference_variances(series)
        est = np.array([0.5 * ((v[i, j] + v[i, k]) - v[j, k])
                        for i, (j, k) in ((0, (1, 2)), (1, (0, 2)), (2, (0, 1)))])
    else:
        ref = p - 1
        diffs = series[:ref] - series[ref]
        cov = np.cov(diffs, bias=True)
        rows, rhs = [], []
        for a in range(ref):
            for b in range(a, ref):
                row = np.zeros(p)
                row[ref] = 1.0
                if a == b:
                    row[a] = 1.0
                rows.append(row)
                rhs.append(cov[a, b])
        design = np.array(rows)
        if np.linalg.matrix_rank(design) < p:
            return TCHResult(None, none, method, n, False)
        est, *_ = np.linalg.lstsq(design, np.array(rhs), rcond=None)
    clamped = est < 0.0
    if clamped.any():
        logger.warning("TCH clamped %d negative variance(s) to 0", int(clamped.sum()))
    return TCHResult(np.where(clamped, 0.0, est), clamped, method, n, True)


def daily_means(values: Array, mask: Array, times: Sequence[int]) -> Tuple[Array, Array, Array]:
    """Mean of valid samples per UTC day along axis 0."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool) & np.isfinite(values)
    day = np.asarray(times, dtype=np.int64) // 86400
    days, inverse = np.unique(day, return_inverse=True)
    sums = np.zeros((days.size,) + values.shape[1:])
    counts = np.zeros(sums.shape)
    np.add.at(sums, inverse, np.where(mask, values, 0.0))
    np.add.at(counts, inverse, mask.astype(np.float64))
    out_mask = counts > 0
    out = np.divide(sums, counts, out=np.zeros_like(sums), where=out_mask)
    return out, out_mask, days * 86400


@dataclass
class TCHMaps:
    variances: Array        # P x H x W, NaN where invalid
    clamped: Array          # P x H x W
    valid: Array            # H x W
    counts: Array           # H x W
    method: str
    sampling: str


def tch_maps(values: Array, masks: Array, min_samples: int = MIN_TCH_SAMPLES,
             sampling: str = "3-hourly") -> TCHMaps:
    """Per-cell TCH over P x T x H x W stacks."""
    values = np.asarray(values, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    p, _, h, w = values.shape
    var = np.full((p, h, w), np.nan)
    clamped = np.zeros((p, h, w), dtype=bool)
    ok = np.zeros((h, w), dtype=bool)
    counts = np.zeros((h, w), dtype=np.int64)
    method = "closed_form" if p == 3 else "least_squares"
    for i in range(h):
        for j in range(w):
            res = tch(values[:, :, i, j], masks[:, :, i, j], min_samples)
            counts[i, j] = res.n
            if res.valid:
                var[:, i, j] = res.variances
                clamped[:, i, j] = res.clamped
                ok[i, j] = True
    flagged = int((~ok).sum())
    if flagged:
        logger.warning("TCH flagged %d of %d cells invalid (%s)", flagged, h * w, sampling)
    return TCHMaps(var, clamped, ok, counts, method, sampling)


# ============================================================================
# REPORT WRITERS
# ============================================================================

def write_metrics_csv(path: Path, rows: Sequence[Dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows))
    frame.to_csv(path, index=False, float_format="%.10g")
    return path


def write_re_table(path: Path, table: RETable) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_frame().to_csv(path, index=False, float_format="%.10g")
    return path


def write_summary_json(path: Path, summary: Dict[str, Any]) -> Path:
    write_json(path, summary)
    return Path(path)


def read_metrics_table(path: Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    return pd.read_csv(path)


__all__ = [
    "MetricsReport", "paired", "metrics", "per_pixel_metrics", "CoarseValidation",
    "validate_vs_coarse", "StationPairs", "StationValidation", "station_pairs",
    "validate_vs_stations", "metrics_by_hour", "network_dynamics", "RETable", "relgen",
    "TCHResult", "tch", "daily_means", "TCHMaps", "tch_maps", "write_metrics_csv",
    "write_re_table", "write_summary_json", "read_metrics_table",
]
