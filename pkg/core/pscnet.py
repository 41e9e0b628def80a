#!/usr/bin/env python3
"""
Separable spatio-temporal convolutional network.

Layout of one forward pass over a (B, T, H, W, C) window:

    positional context  HOY, longitude, latitude appended as channels
    temporal fusion     per-pixel causal TCN levels, then no-padding
                        temporal convolutions that shrink T to 1
    stages              factorized dilated conv + SE gate, then FFN,
                        each as a residual branch; H x W never changes
    head                pointwise projection to one channel

Parameters live in an ordered name -> array mapping; names starting with
'mftf.' form the temporal group, everything else the spatial group.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import maximum_filter

from core.diffcore import (
    Tensor, add, conv1d_time, conv2d, gelu, global_avg_pool, local_avg_pool,
    mul, pointwise_linear, reshape, sigmoid, squeeze, trace_ops, transpose,
)
from core.geodata import DataCube, DomainBounds, GeoGrid, NormStats, TargetField, zscore_apply
from core.stdown_core import (
    HOURS_PER_YEAR_NORM, STC_DTYPES, ConfigError, FormatError,
    SchemaMismatchError, ShapeMismatchError, check_unknown_keys,
)

logger = logging.getLogger(__name__)

SE_POOLS = ("global", "local")
INIT_SCHEMES = ("default", "random")
NONLINEAR_OPS = ("gelu", "sigmoid")


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass
class ModelConfig:
    in_channels: int = 12
    base_channels: int = 64
    window_length: int = 5
    tcn_dilations: Tuple[int, ...] = (1, 2, 4)
    tcn_kernel: int = 3
    distill_kernel: int = 3
    num_stages: int = 4
    stage_kernel: int = 3
    stage_dilations: Tuple[int, ...] = (1, 2, 1, 2)
    se_reduction: int = 8
    ffn_expansion: int = 4
    se_pool: str = "global"
    se_window: int = 7

    def __post_init__(self):
        self.tcn_dilations = tuple(int(d) for d in self.tcn_dilations)
        self.stage_dilations = tuple(int(d) for d in self.stage_dilations)

    @property
    def tcn_levels(self) -> int:
        return len(self.tcn_dilations)

    def validate(self) -> "ModelConfig":
        counts = {
            "in_channels": self.in_channels, "base_channels": self.base_channels,
            "window_length": self.window_length, "tcn_kernel": self.tcn_kernel,
            "distill_kernel": self.distill_kernel, "num_stages": self.num_stages,
            "stage_kernel": self.stage_kernel, "se_reduction": self.se_reduction,
            "ffn_expansion": self.ffn_expansion, "se_window": self.se_window,
            "tcn_levels": self.tcn_levels,
        }
        low = {k: v for k, v in counts.items() if int(v) < 1}
        if low:
            raise ConfigError(f"Model counts must be >= 1: {low}", {"invalid": low})
        if any(d < 1 for d in self.tcn_dilations + self.stage_dilations):
            raise ConfigError("Dilations must be >= 1")
        if len(self.stage_dilations) != self.num_stages:
            raise ConfigError(
                "stage_dilations needs one entry per stage",
                {"num_stages": self.num_stages, "stage_dilations": list(self.stage_dilations)}
            )
        if self.base_channels % self.se_reduction != 0:
            raise ConfigError(
                f"se_reduction {self.se_reduction} does not divide base_channels {self.base_channels}"
            )
        if self.stage_kernel % 2 == 0 or self.se_window % 2 == 0:
            raise ConfigError("stage_kernel and se_window must be odd")
        if self.se_pool not in SE_POOLS:
            raise ConfigError(f"se_pool must be one of {SE_POOLS}, got '{self.se_pool}'")
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["tcn_dilations"] = list(self.tcn_dilations)
        data["stage_dilations"] = list(self.stage_dilations)
        return data

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "ModelConfig":
        data = dict(data or {})
        check_unknown_keys("model", data, [f.name for f in fields(cls)])
        return cls(**data).validate()


def distill_plan(t_len: int, kernel: int, dilations: Sequence[int]) -> List[Tuple[int, int]]:
    """
    (kernel length, dilation) of each no-padding temporal convolution.

    Each level uses the configured kernel at its dilation while the sequence
    is long enough; otherwise, or once the levels run out, one convolution
    of kernel length T_l takes the sequence to length 1.
    """
    if t_len < 1:
        raise ShapeMismatchError(f"Window length must be >= 1, got {t_len}")
    if t_len == 1:
        return [(1, 1)]
    plan: List[Tuple[int, int]] = []
    length = t_len
    level = 0
    while length > 1:
        d = dilations[level] if level < len(dilations) else None
        if d is None or length < d * (kernel - 1) + 1:
            plan.append((length, 1))
            length = 1
        else:
            plan.append((kernel, d))
            length -= d * (kernel - 1)
        level += 1
    return plan


def receptive_radius(config: ModelConfig) -> int:
    """
    Chebyshev radius of the spatial receptive field.

    With se_pool='local' this bound is exact; with 'global' it covers the
    convolution stack only, since the gate pools the whole image.
    """
    radius = 0
    for d in config.stage_dilations:
        radius += d * (config.stage_kernel - 1) // 2
        if config.se_pool == "local":
            radius += config.se_window // 2
    return radius


# ============================================================================
# PARAMETERS
# ============================================================================

def parameter_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Declaration order of every learnable tensor."""
    c, cb = config.in_channels, config.base_channels
    shapes: List[Tuple[str, Tuple[int, ...]]] = [
        ("mftf.input.w", (c, cb)), ("mftf.input.b", (cb,)),
    ]
    for level in range(config.tcn_levels):
        p = f"mftf.tcn{level}"
        shapes += [(f"{p}.conv.k", (config.tcn_kernel, cb, cb)), (f"{p}.conv.b", (cb,)),
                   (f"{p}.enrich.w", (cb, cb)), (f"{p}.enrich.b", (cb,))]
    for j, (k, _) in enumerate(distill_plan(config.window_length, config.distill_kernel,
                                            config.tcn_dilations)):
        shapes += [(f"mftf.distill{j}.k", (k, cb, cb)), (f"mftf.distill{j}.b", (cb,))]
    hidden = cb // config.se_reduction
    wide = cb * config.ffn_expansion
    ks = config.stage_kernel
    for s in range(config.num_stages):
        p = f"stage{s}"
        shapes += [
            (f"{p}.conv_v.k", (ks, 1, cb, cb)), (f"{p}.conv_v.b", (cb,)),
            (f"{p}.conv_h.k", (1, ks, cb, cb)), (f"{p}.conv_h.b", (cb,)),
            (f"{p}.se.w1", (cb, hidden)), (f"{p}.se.b1", (hidden,)),
            (f"{p}.se.w2", (hidden, cb)), (f"{p}.se.b2", (cb,)),
            (f"{p}.ffn.w_up", (cb, wide)), (f"{p}.ffn.b_up", (wide,)),
            (f"{p}.ffn.w_down", (wide, cb)), (f"{p}.ffn.b_down", (cb,)),
        ]
    shapes += [("head.w", (cb, 1)), ("head.b", (1,))]
    return shapes


def parameter_group(name: str) -> str:
    return "temporal" if name.startswith("mftf.") else "spatial"


def _fan_in(shape: Tuple[int, ...]) -> int:
    return int(np.prod(shape[:-1])) if len(shape) > 1 else 1


def init_params(config: ModelConfig, seed: int = 0, scheme: str = "default",
                dtype: str = "float64") -> Dict[str, np.ndarray]:
    """
    Draw every parameter tensor.

    'default': fan-in scaled uniform weights, zero biases, zero head.
    'random':  every tensor random, biases included.
    """
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"Unknown init scheme '{scheme}'. Available: {INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config):
        bound = 1.0 / np.sqrt(_fan_in(shape))
        is_bias = len(shape) == 1
        if scheme == "random":
            values = rng.uniform(-bound, bound, shape) if not is_bias else rng.uniform(-0.1, 0.1, shape)
        elif is_bias or name.startswith("head."):
            values = np.zeros(shape)
        else:
            values = rng.uniform(-bound, bound, shape)
        params[name] = values.astype(dtype)
    return params


def parameter_inventory(params: Dict[str, np.ndarray]) -> List[Dict[str, Any]]:
    return [{"name": name, "shape": list(a.shape), "size": int(a.size),
             "group": parameter_group(name)} for name, a in params.items()]


def save_params(path: Path, params: Dict[str, np.ndarray], dtype: str = "f32le") -> Path:
    """Concatenate every tensor in declaration order as raw little-endian floats."""
    if dtype not in STC_DTYPES:
        raise FormatError(f"Unsupported parameter dtype '{dtype}'")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = [np.ascontiguousarray(a, dtype=STC_DTYPES[dtype]).reshape(-1) for a in params.values()]
    (np.concatenate(flat) if flat else np.zeros(0, STC_DTYPES[dtype])).tofile(path)
    return path


def load_params(path: Path, inventory: Sequence[Dict[str, Any]], dtype: str = "f32le",
                as_dtype: str = "float64") -> Dict[str, np.ndarray]:
    if dtype not in STC_DTYPES:
        raise FormatError(f"Unsupported parameter dtype '{dtype}'")
    raw = np.fromfile(Path(path), dtype=STC_DTYPES[dtype])
    expected = sum(int(np.prod(item["shape"])) for item in inventory)
    if raw.size != expected:
        raise FormatError("params.bin size does not match the parameter table",
                          {"expected": expected, "found": int(raw.size)})
    params: Dict[str, np.ndarray] = {}
    offset = 0
    for item in inventory:
        n = int(np.prod(item["shape"]))
        params[item["name"]] = raw[offset:offset + n].reshape(item["shape"]).astype(as_dtype)
        offset += n
    return params


def as_tensors(params: Dict[str, np.ndarray], requires_grad: bool = False) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def check_params(params: Dict[str, np.ndarray], config: ModelConfig) -> None:
    expected = parameter_shapes(config)
    found = [(k, tuple(v.shape)) for k, v in params.items()]
    if found != expected:
        raise SchemaMismatchError("Parameters do not match the model configuration",
                                  {"expected": len(expected), "found": len(found)})


# ============================================================================
# POSITIONAL CONTEXT
# ============================================================================

def hour_of_year(times: Sequence[int]) -> np.ndarray:
    """Hours since Jan 1 00:00 UTC of each timestamp's year."""
    stamps = np.asarray(times, dtype=np.int64).astype("datetime64[s]")
    year_start = stamps.astype("datetime64[Y]").astype("datetime64[s]")
    return (stamps - year_start).astype(np.int64) / 3600.0


def context_channels(times: Sequence[int], grid: GeoGrid, bounds: DomainBounds) -> np.ndarray:
    """T x H x W x 3 array of HOY, longitude and latitude in [0, 1]."""
    hoy = hour_of_year(times) / HOURS_PER_YEAR_NORM
    lon = (grid.lons() - bounds.lon_min) / (bounds.lon_max - bounds.lon_min)
    lat = (grid.lats() - bounds.lat_min) / (bounds.lat_max - bounds.lat_min)
    t = len(hoy)
    out = np.empty((t, grid.nlat, grid.nlon, 3), dtype=np.float64)
    out[..., 0] = hoy[:, None, None]
    out[..., 1] = lon[None, None, :]
    out[..., 2] = lat[None, :, None]
    return out


def positional_encode(window: np.ndarray, times: Sequence[int], grid: GeoGrid,
                      bounds: DomainBounds, channel_names: Optional[Sequence[str]] = None) -> np.ndarray:
    """Append HOY, longitude and latitude channels to a T x H x W x C window."""
    window = np.asarray(window)
    if channel_names is not None and {"HOY", "longitude", "latitude"} & set(channel_names):
        raise SchemaMismatchError("Window already carries context channels")
    if window.ndim != 4 or window.shape[0] != len(times) or window.shape[1:3] != grid.shape:
        raise ShapeMismatchError(
            "Window does not match times/grid",
            {"window": list(window.shape), "times": len(times), "grid": list(grid.shape)}
        )
    ctx = context_channels(times, grid, bounds).astype(window.dtype)
    return np.concatenate([window, ctx], axis=-1)


def add_context(cube: DataCube, bounds: DomainBounds) -> DataCube:
    """Cube-level positional encoding; context channels are always valid."""
    if cube.schema.has_context:
        raise SchemaMismatchError("Cube already carries context channels")
    values = positional_encode(cube.values, cube.times, cube.grid, bounds, cube.schema.names)
    mask = np.concatenate([cube.mask, np.ones(cube.mask.shape[:3] + (3,), dtype=bool)], axis=-1)
    return DataCube(cube.grid, cube.schema.with_context(), cube.times, values, mask)


# ============================================================================
# FORWARD PASS
# ============================================================================

Params = Dict[str, Tensor]


def mftf_forward(x: Tensor, params: Params, config: ModelConfig) -> Tensor:
    """(..., T, C) per-pixel sequences -> (..., C_b) time-free features."""
    h = pointwise_linear(x, params["mftf.input.w"], params["mftf.input.b"])
    for level, d in enumerate(config.tcn_dilations):
        p = f"mftf.tcn{level}"
        y = gelu(conv1d_time(h, params[f"{p}.conv.k"], params[f"{p}.conv.b"], d, "causal"))
        y = pointwise_linear(y, params[f"{p}.enrich.w"], params[f"{p}.enrich.b"])
        h = add(h, y)
    plan = distill_plan(config.window_length, config.distill_kernel, config.tcn_dilations)
    for j, (_, d) in enumerate(plan):
        h = conv1d_time(h, params[f"mftf.distill{j}.k"], params[f"mftf.distill{j}.b"], d, "none")
        h = gelu(h)
    if h.shape[-2] != 1:
        raise ShapeMismatchError(f"Temporal distillation left {h.shape[-2]} steps")
    return squeeze(h, -2)


def se_forward(x: Tensor, params: Params, prefix: str, config: ModelConfig) -> Tensor:
    """Channel gate s = sigmoid(W2 gelu(W1 pool(x))), applied as x * s."""
    if config.se_pool == "local":
        pooled = local_avg_pool(x, config.se_window)
    else:
        pooled = global_avg_pool(x)
    z = gelu(pointwise_linear(pooled, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    s = sigmoid(pointwise_linear(z, params[f"{prefix}.w2"], params[f"{prefix}.b2"]))
    if config.se_pool == "global":
        s = reshape(s, s.shape[:-1] + (1, 1, s.shape[-1]))
    return mul(x, s)


def stage_forward(x: Tensor, params: Params, index: int, config: ModelConfig) -> Tensor:
    """SE-conv residual branch followed by the FFN residual branch."""
    p = f"stage{index}"
    d = config.stage_dilations[index]
    y = conv2d(x, params[f"{p}.conv_v.k"], params[f"{p}.conv_v.b"], d, "same")
    y = conv2d(y, params[f"{p}.conv_h.k"], params[f"{p}.conv_h.b"], d, "same")
    y = se_forward(gelu(y), params, f"{p}.se", config)
    x = add(x, y)
    z = gelu(pointwise_linear(x, params[f"{p}.ffn.w_up"], params[f"{p}.ffn.b_up"]))
    z = pointwise_linear(z, params[f"{p}.ffn.w_down"], params[f"{p}.ffn.b_down"])
    return add(x, z)


def model_forward(window: Union[np.ndarray, Tensor], params: Params, config: ModelConfig) -> Tensor:
    """
    (T, H, W, C) or (B, T, H, W, C) window -> (H, W) or (B, H, W) map.

    Output is in normalized target units.
    """
    x = window if isinstance(window, Tensor) else Tensor(np.asarray(window))
    batched = x.data.ndim == 5
    if not batched:
        x = reshape(x, (1,) + x.shape)
    _, t, h, w, c = x.shape
    if t != config.window_length or c != config.in_channels:
        raise ShapeMismatchError(
            "Window does not match the model configuration",
            {"window": list(x.shape), "window_length": config.window_length,
             "in_channels": config.in_channels}
        )
    seq = transpose(x, (0, 2, 3, 1, 4))
    feat = mftf_forward(seq, params, config)
    for s in range(config.num_stages):
        feat = stage_forward(feat, params, s, config)
    out = squeeze(pointwise_linear(feat, params["head.w"], params["head.b"]), -1)
    if not batched:
        out = squeeze(out, 0)
    return out


def activation_audit(config: ModelConfig, seed: int = 0) -> List[str]:
    """Nonlinear operator tags seen in one forward pass on a small random window."""
    params = as_tensors(init_params(config, seed, "random"))
    size = max(2 * receptive_radius(config) + 1, 3)
    window = np.random.default_rng(seed).standard_normal(
        (config.window_length, size, size, config.in_channels))
    with trace_ops() as ops:
        model_forward(window, params, config)
    linear = {"add", "sub", "mul", "div", "scale", "square", "sqrt_eps", "reduce_sum",
              "reduce_mean", "getitem", "squeeze", "reshape", "transpose",
              "pointwise_linear", "global_avg_pool", "local_avg_pool", "conv2d", "conv1d_time"}
    return sorted({op for op in ops if op not in linear})


# ============================================================================
# FULL-IMAGE INFERENCE
# ============================================================================

@dataclass
class InferenceInputs:
    """Normalized, context-encoded cube ready for windowed forward passes."""
    cube: DataCube
    radius: int


def prepare_inputs(cube: DataCube, config: ModelConfig, stats: NormStats,
                   bounds: DomainBounds) -> InferenceInputs:
    """Check the schema, normalize, append context channels."""
    if cube.schema.has_context:
        raise SchemaMismatchError("Pass the cube without context channels")
    if cube.schema.names != stats.names:
        raise SchemaMismatchError(
            "Cube schema does not match the training statistics",
            {"cube": list(cube.schema.names), "stats": list(stats.names)}
        )
    if len(cube.schema) + 3 != config.in_channels:
        raise SchemaMismatchError(
            "Cube channel count does not match the model",
            {"cube_channels": len(cube.schema), "in_channels": config.in_channels}
        )
    normalized = add_context(zscore_apply(cube, stats), bounds)
    return InferenceInputs(normalized, receptive_radius(config))


def masked_window(cube: DataCube, k: int, t_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Window ending at index k with invalid cells zero-filled, plus its pixel validity."""
    values = cube.values[k - t_len + 1:k + 1]
    mask = cube.mask[k - t_len + 1:k + 1]
    return np.where(mask, values, 0.0), mask.all(axis=(0, 3))


def output_mask(pixel_valid: np.ndarray, radius: int) -> np.ndarray:
    """False wherever an invalid pixel lies within the receptive field."""
    if radius == 0:
        return pixel_valid.copy()
    invalid = maximum_filter((~pixel_valid).astype(np.uint8), size=2 * radius + 1,
                             mode="constant", cval=0)
    return invalid == 0


def infer_full(
    cube_fine: DataCube,
    params: Dict[str, np.ndarray],
    config: ModelConfig,
    stats: NormStats,
    target_stats: NormStats,
    bounds: DomainBounds,
    threads: int = 1,
    dtype: str = "float64"
) -> TargetField:
    """
    Run the model over the whole grid at every timestamp with a full window.

    Predictions are denormalized with the target statistics and clamped to
    [0, 1]. The first window_length - 1 timestamps have no full window and
    stay masked, so the output shares the cube's time axis. Every timestamp
    is evaluated on its own, so results do not depend on the thread count.

    Output pixels are masked when an invalid input lies within the
    receptive radius. With se_pool='local' the remaining outputs are
    independent of the masked inputs. With the default se_pool='global'
    the radius covers the convolution stack only: a masked pixel anywhere
    enters every output through the image-wide gate, zero-filled, and is
    not reflected in the mask.
    """
    check_params(params, config)
    prepared = prepare_inputs(cube_fine, config, stats, bounds)
    tensors = as_tensors({k: v.astype(dtype) for k, v in params.items()})
    t_len = config.window_length
    cube = prepared.cube
    n_t = cube.times.size
    values = np.zeros((n_t,) + cube.grid.shape, dtype=np.float64)
    mask = np.zeros(values.shape, dtype=bool)
    mean, std = float(target_stats.mean[0]), float(target_stats.std[0])

    def run(k: int) -> Tuple[int, np.ndarray, np.ndarray]:
        window, pixel_valid = masked_window(cube, k, t_len)
        valid = output_mask(pixel_valid, prepared.radius)
        if not valid.any():
            return k, np.zeros(cube.grid.shape), valid
        pred = model_forward(window.astype(dtype), tensors, config).data.astype(np.float64)
        return k, np.clip(pred * std + mean, 0.0, 1.0), valid

    indices = list(range(t_len - 1, n_t))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, indices))
    else:
        results = [run(k) for k in indices]
    for k, pred, valid in results:
        values[k] = np.where(valid, pred, 0.0)
        mask[k] = valid
    logger.info("Inferred %d maps on a %dx%d grid", len(indices), *cube.grid.shape)
    return TargetField(cube.grid, cube.times, values, mask)


__all__ = [
    "ModelConfig", "distill_plan", "receptive_radius", "parameter_shapes",
    "parameter_group", "init_params", "parameter_inventory", "save_params",
    "load_params", "as_tensors", "check_params", "hour_of_year", "context_channels",
    "positional_encode", "add_context", "mftf_forward", "se_forward",
    "stage_forward", "model_forward", "activation_audit", "prepare_inputs",
    "masked_window", "output_mask", "infer_full",
]
