#!/usr/bin/env python3
"""
Training losses: edge-weighted RMSE, whole-patch SSIM and their convex blend.

All losses take a prediction Tensor plus numpy target and validity mask and
ignore invalid pixels. Statistics use the population (1/N) convention.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Optional, Tuple

import numpy as np

from core.diffcore import (
    Tensor, add, mul, reduce_sum, scale, sqrt_eps, square, sub,
)
from core.stdown_core import (
    ConfigError, InsufficientDataError, ShapeMismatchError, check_unknown_keys,
)

logger = logging.getLogger(__name__)


@dataclass
class LossConfig:
    ratio: float = 2.0
    alpha: float = 0.8
    dynamic_range: float = 1.0
    c1: Optional[float] = None
    c2: Optional[float] = None

    def __post_init__(self):
        if self.c1 is None:
            self.c1 = (0.01 * self.dynamic_range) ** 2
        if self.c2 is None:
            self.c2 = (0.03 * self.dynamic_range) ** 2

    def validate(self) -> "LossConfig":
        if self.ratio < 1.0:
            raise ConfigError(f"loss.ratio must be >= 1, got {self.ratio}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"loss.alpha must lie in [0, 1], got {self.alpha}")
        if self.c1 <= 0 or self.c2 <= 0 or self.dynamic_range <= 0:
            raise ConfigError("loss.c1, loss.c2 and loss.dynamic_range must be positive")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "LossConfig":
        data = dict(data or {})
        check_unknown_keys("loss", data, [f.name for f in fields(cls)])
        return cls(**data).validate()


def edge_weight_kernel(h: int, w: int, ratio: float) -> np.ndarray:
    """Radial weights: 1 at the center rising to about ratio at the corners."""
    if h < 1 or w < 1:
        raise ConfigError(f"Kernel size must be positive, got {h}x{w}")
    if ratio < 1.0:
        raise ConfigError(f"Edge-weight ratio must be >= 1, got {ratio}")
    i = np.arange(h, dtype=np.float64)[:, None] - (h - 1) / 2.0
    j = np.arange(w, dtype=np.float64)[None, :] - (w - 1) / 2.0
    radius = np.sqrt(i ** 2 + j ** 2)
    return 1.0 + (ratio - 1.0) * 2.0 * radius / np.sqrt(h ** 2 + w ** 2)


def _valid(pred: Tensor, target: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError("Prediction and target shapes differ",
                                 {"pred": list(pred.shape), "target": list(target.shape)})
    valid = np.isfinite(target)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    return valid


def loss_rmse(pred: Tensor, target: np.ndarray, mask: Optional[np.ndarray],
              weights: np.ndarray) -> Tensor:
    """sqrt(sum W (p - y)^2 / sum W) over valid pixels."""
    valid = _valid(pred, target, mask)
    if not valid.any():
        raise InsufficientDataError("loss_rmse needs at least one valid pixel")
    w = np.where(valid, np.broadcast_to(weights, valid.shape), 0.0).astype(pred.dtype)
    y = np.where(valid, target, 0.0).astype(pred.dtype)
    err = square(sub(pred, y))
    weighted = reduce_sum(mul(err, w))
    return sqrt_eps(scale(weighted, 1.0 / float(w.sum())))


def _ssim_parts(pred: Tensor, target: np.ndarray, valid: np.ndarray, cfg: LossConfig) -> Tensor:
    n = float(valid.sum())
    m = valid.astype(pred.dtype)
    y = np.where(valid, target, 0.0).astype(pred.dtype)
    mu_x = scale(reduce_sum(mul(pred, m)), 1.0 / n)
    mu_y = float((y * m).sum() / n)
    dx = mul(sub(pred, mu_x), m)
    dy = (y - mu_y) * m
    var_x = scale(reduce_sum(square(dx)), 1.0 / n)
    var_y = float((dy ** 2).sum() / n)
    cov = scale(reduce_sum(mul(dx, dy)), 1.0 / n)
    num = mul(add(scale(mu_x, 2.0 * mu_y), cfg.c1), add(scale(cov, 2.0), cfg.c2))
    den = mul(add(square(mu_x), mu_y ** 2 + cfg.c1), add(var_x, var_y + cfg.c2))
    return num / den


def ssim_value(pred: Tensor, target: np.ndarray, mask: Optional[np.ndarray],
               cfg: LossConfig) -> Optional[Tensor]:
    """Single-window SSIM over the valid pixels; None with fewer than 2."""
    valid = _valid(pred, target, mask)
    if valid.sum() < 2:
        return None
    return _ssim_parts(pred, target, valid, cfg)


def loss_ssim(pred: Tensor, target: np.ndarray, mask: Optional[np.ndarray],
              cfg: LossConfig) -> Optional[Tensor]:
    """1 - SSIM; None when fewer than 2 pixels are valid."""
    ssim = ssim_value(pred, target, mask, cfg)
    if ssim is None:
        return None
    return sub(1.0, ssim)


def loss_full(pred: Tensor, target: np.ndarray, mask: Optional[np.ndarray],
              cfg: LossConfig, weights: Optional[np.ndarray] = None) -> Tensor:
    """
    alpha * L_RMSE + (1 - alpha) * L_SSIM for one H x W patch.

    The endpoints return the single term unchanged. A patch with fewer than
    2 valid pixels falls back to L_RMSE.
    """
    if weights is None:
        weights = edge_weight_kernel(pred.shape[-2], pred.shape[-1], cfg.ratio)
    if cfg.alpha == 0.0:
        ssim_term = loss_ssim(pred, target, mask, cfg)
        if ssim_term is not None:
            return ssim_term
        return loss_rmse(pred, target, mask, weights)
    rmse_term = loss_rmse(pred, target, mask, weights)
    if cfg.alpha == 1.0:
        return rmse_term
    ssim_term = loss_ssim(pred, target, mask, cfg)
    if ssim_term is None:
        logger.debug("SSIM term skipped: fewer than 2 valid pixels")
        return rmse_term
    return add(scale(rmse_term, cfg.alpha), scale(ssim_term, 1.0 - cfg.alpha))


def batch_loss(preds: Tensor, targets: np.ndarray, masks: np.ndarray,
               cfg: LossConfig) -> Tuple[Tensor, int]:
    """Mean L_FULL over the patches of a B x H x W batch that have a valid pixel."""
    weights = edge_weight_kernel(preds.shape[-2], preds.shape[-1], cfg.ratio)
    total: Optional[Tensor] = None
    used = 0
    for b in range(preds.shape[0]):
        if not np.any(masks[b]):
            continue
        term = loss_full(preds[b], targets[b], masks[b], cfg, weights)
        total = term if total is None else add(total, term)
        used += 1
    if total is None:
        raise InsufficientDataError("Batch has no valid label pixels")
    return scale(total, 1.0 / used), used


__all__ = [
    "LossConfig", "edge_weight_kernel", "loss_rmse", "loss_ssim", "ssim_value",
    "loss_full", "batch_loss",
]
