#!/usr/bin/env python3
"""
Training loop, checkpoints and the cross-scale inference driver.

Checkpoint directory:
    config.json        model/loss/train sections, parameter table, schema,
                       hashes, domain bounds, params dtype
    params.bin         best-validation parameters
    norm_stats.json    input and target Z-score statistics
    history.csv        per-epoch train/val loss and mask fraction
    train_state.json   resume point (epoch, counters, best score)
    last_params.bin    parameters after the last finished epoch
    opt_state.bin      Adam first and second moments
    test_metrics.json  pooled test-split metrics in physical units
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from core.diffcore import Tensor, backward, grad_check
from core.evalkit import metrics
from core.geodata import (
    DIHEDRAL_SEQUENCES, DataCube, DomainBounds, NormStats, Patch, PatchSplit,
    TargetField, augment_sequence, extract_patches, split_patches,
    zscore_fit, zscore_fit_target,
)
from core.objective import LossConfig, batch_loss, loss_full
from core.pscnet import (
    ModelConfig, as_tensors, check_params, infer_full, init_params,
    load_params, model_forward, parameter_inventory, prepare_inputs, save_params,
)
from core.stdown_core import (
    ConfigError, DivergenceError, InsufficientDataError, NonFiniteError,
    SchemaMismatchError, canonical_hash, check_unknown_keys, read_json, write_json,
)

logger = logging.getLogger(__name__)

DTYPES = {"float32": "f32le", "float64": "f64le"}


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mask_p0: float = 0.5
    mask_epochs: Optional[int] = None
    patience: int = 8
    patch_size: int = 32
    patch_stride: int = 10
    augment: bool = True
    init_scheme: str = "default"
    dtype: str = "float32"

    @property
    def mask_horizon(self) -> int:
        return self.epochs // 2 if self.mask_epochs is None else self.mask_epochs

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.mask_p0 <= 1.0:
            raise ConfigError(f"train.mask_p0 must lie in [0, 1], got {self.mask_p0}")
        if self.mask_horizon > self.epochs or self.mask_horizon < 0:
            raise ConfigError("train.mask_epochs must lie in [0, epochs]")
        if self.patience < 0:
            raise ConfigError("train.patience must be >= 0")
        if self.patch_size < 1 or self.patch_stride < 1:
            raise ConfigError("train.patch_size and train.patch_stride must be >= 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"train.dtype must be one of {sorted(DTYPES)}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "TrainConfig":
        data = dict(data or {})
        check_unknown_keys("train", data, [f.name for f in fields(cls)])
        return cls(**data).validate()


@dataclass
class RunConfig:
    """The three sections of config.json."""
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> Dict[str, Any]:
        return {"model": self.model.to_dict(), "loss": self.loss.to_dict(),
                "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        check_unknown_keys("config", data, ["model", "loss", "train"])
        return cls(ModelConfig.from_dict(data.get("model")),
                   LossConfig.from_dict(data.get("loss")),
                   TrainConfig.from_dict(data.get("train")))

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        data = read_json(path)
        return cls.from_dict({k: v for k, v in data.items() if k in ("model", "loss", "train")})


# ============================================================================
# OPTIMIZER & CURRICULUM
# ============================================================================

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def adam_update(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam step, in place."""
    state.step += 1
    c1 = 1.0 - cfg.beta1 ** state.step
    c2 = 1.0 - cfg.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p -= (cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype)


def mask_schedule(epoch: int, p0: float, e_mask: int) -> float:
    """Linear decay of the hidden-label fraction, reaching 0 at e_mask."""
    if e_mask <= 0:
        return 0.0
    return p0 * max(0.0, 1.0 - epoch / e_mask)


# ============================================================================
# DATASET & BATCHES
# ============================================================================

@dataclass
class Dataset:
    split: PatchSplit
    stats: NormStats
    target_stats: NormStats
    bounds: DomainBounds
    schema_names: Tuple[str, ...]
    n_base: int


def build_dataset(cube: DataCube, target: TargetField, cfg: RunConfig,
                  bounds: Optional[DomainBounds] = None) -> Dataset:
    """Normalize, add context, cut patches and split them."""
    bounds = bounds or DomainBounds.from_grid(cube.grid)
    stats = zscore_fit(cube)
    target_stats = zscore_fit_target(target)
    prepared = prepare_inputs(cube, cfg.model, stats, bounds)
    size = min(cfg.train.patch_size, cube.grid.nlat, cube.grid.nlon)
    if size != cfg.train.patch_size:
        logger.warning("Patch size clamped from %d to %d to fit the %dx%d grid",
                       cfg.train.patch_size, size, *cube.grid.shape)
    patches = extract_patches(prepared.cube, target, size, cfg.model.window_length,
                              cfg.train.patch_stride)
    split = split_patches(patches, cfg.train.seed)
    split.augment_train = cfg.train.augment
    logger.info("Patch split: %s", split.counts())
    return Dataset(split, stats, target_stats, bounds, cube.schema.names, len(cube.schema))


def assemble_batch(
    patches: Sequence[Patch],
    target_stats: NormStats,
    n_base: int,
    dtype: str,
    rng: Optional[np.random.Generator] = None,
    augment: bool = False,
    hide_fraction: float = 0.0
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Stack windows and normalized labels.

    Invalid input cells are zero-filled. With hide_fraction > 0, that share
    of each patch's valid label pixels has every non-context input channel
    zeroed at every timestep; those pixels stay in the loss mask.
    """
    mean, std = float(target_stats.mean[0]), float(target_stats.std[0])
    windows, labels, masks = [], [], []
    for patch in patches:
        if augment:
            patch = augment_sequence(patch, DIHEDRAL_SEQUENCES[int(rng.integers(len(DIHEDRAL_SEQUENCES)))])
        window = np.where(patch.window_mask, patch.window, 0.0)
        label_mask = np.array(patch.label_mask, dtype=bool)
        if hide_fraction > 0.0:
            visible = np.flatnonzero(label_mask)
            n_hide = int(round(hide_fraction * visible.size))
            if n_hide:
                hide = np.zeros(label_mask.shape, dtype=bool)
                hide.flat[rng.choice(visible, size=n_hide, replace=False)] = True
                window[:, hide, :n_base] = 0.0
        windows.append(window)
        labels.append(np.where(label_mask, (patch.label - mean) / std, 0.0))
        masks.append(label_mask)
    return (np.stack(windows).astype(dtype), np.stack(labels).astype(dtype), np.stack(masks))


def train_step(
    batch: Tuple[np.ndarray, np.ndarray, np.ndarray],
    params: Dict[str, np.ndarray],
    opt_state: AdamState,
    cfg: RunConfig,
    batch_id: Any = None
) -> float:
    """One forward/backward/Adam update; params change in place."""
    windows, labels, masks = batch
    tensors = as_tensors(params, requires_grad=True)
    preds = model_forward(windows, tensors, cfg.model)
    loss, _ = batch_loss(preds, labels, masks, cfg.loss)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError(f"Non-finite training loss in batch {batch_id}",
                             {"batch": batch_id, "loss": None})
    backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    adam_update(params, grads, opt_state, cfg.train)
    return value


def evaluate_loss(patches: Sequence[Patch], params: Dict[str, np.ndarray], cfg: RunConfig,
                  target_stats: NormStats, n_base: int, threads: int = 1) -> float:
    """
    Mean L_FULL over patches, evaluated in fixed-order batches.

    Batches may run on worker threads; their losses are summed in batch
    order, so the result does not depend on the thread count.
    """
    if not patches:
        return float("nan")
    tensors = as_tensors(params)
    bs = cfg.train.batch_size

    def run(start: int) -> Tuple[float, int]:
        windows, labels, masks = assemble_batch(patches[start:start + bs], target_stats,
                                                n_base, cfg.train.dtype)
        preds = model_forward(windows, tensors, cfg.model)
        loss, used = batch_loss(preds, labels, masks, cfg.loss)
        return loss.item(), used

    starts = list(range(0, len(patches), bs))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    total, count = 0.0, 0
    for value, used in parts:
        total += value * used
        count += used
    return total / count


def predict_patches(patches: Sequence[Patch], params: Dict[str, np.ndarray], cfg: RunConfig,
                    target_stats: NormStats, n_base: int) -> Tuple[np.ndarray, np.ndarray]:
    """Denormalized, clamped predictions and label masks for a list of patches."""
    tensors = as_tensors(params)
    mean, std = float(target_stats.mean[0]), float(target_stats.std[0])
    preds, masks = [], []
    bs = cfg.train.batch_size
    for start in range(0, len(patches), bs):
        windows, _, m = assemble_batch(patches[start:start + bs], target_stats, n_base, cfg.train.dtype)
        out = model_forward(windows, tensors, cfg.model).data.astype(np.float64)
        preds.append(np.clip(out * std + mean, 0.0, 1.0))
        masks.append(m)
    return np.concatenate(preds), np.concatenate(masks)


# ============================================================================
# CHECKPOINTS
# ============================================================================

@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    epoch: int
    history: List[Dict[str, Any]]
    stats: NormStats
    target_stats: NormStats
    config: RunConfig
    bounds: DomainBounds
    schema_names: Tuple[str, ...]
    config_hash: str = ""
    schema_hash: str = ""
    stopped_early: bool = False
    trained_ids: Set[int] = field(default_factory=set)
    split_ids: Dict[str, List[int]] = field(default_factory=dict)
    test_metrics: Dict[str, Any] = field(default_factory=dict)

    @property
    def params_dtype(self) -> str:
        return DTYPES[self.config.train.dtype]


def _config_document(ckpt: Checkpoint) -> Dict[str, Any]:
    doc = ckpt.config.to_dict()
    doc.update({
        "params": parameter_inventory(ckpt.params),
        "params_dtype": ckpt.params_dtype,
        "schema": list(ckpt.schema_names),
        "schema_hash": ckpt.schema_hash,
        "config_hash": ckpt.config_hash,
        "norm_stats": "norm_stats.json",
        "bounds": ckpt.bounds.to_dict(),
        "best_epoch": ckpt.epoch,
    })
    return doc


def save_checkpoint(directory: Path, ckpt: Checkpoint) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_json(directory / "config.json", _config_document(ckpt))
    save_params(directory / "params.bin", ckpt.params, ckpt.params_dtype)
    write_json(directory / "norm_stats.json",
               {"inputs": ckpt.stats.to_dict(), "target": ckpt.target_stats.to_dict()})
    pd.DataFrame(ckpt.history, columns=["epoch", "train_loss", "val_loss", "mask_fraction"]) \
        .to_csv(directory / "history.csv", index=False, float_format="%.17g")
    if ckpt.test_metrics:
        write_json(directory / "test_metrics.json", ckpt.test_metrics)
    return directory


def load_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    doc = read_json(directory / "config.json")
    for key in ("model", "loss", "train", "params", "params_dtype", "schema", "bounds"):
        if key not in doc:
            raise ConfigError(f"Checkpoint config.json missing '{key}'", {"path": str(directory)})
    config = RunConfig.from_dict({k: doc[k] for k in ("model", "loss", "train")})
    params = load_params(directory / "params.bin", doc["params"], doc["params_dtype"],
                         config.train.dtype)
    check_params(params, config.model)
    stats_doc = read_json(directory / "norm_stats.json")
    history_path = directory / "history.csv"
    history = []
    if history_path.exists():
        history = pd.read_csv(history_path).replace({np.nan: None}).to_dict("records")
    return Checkpoint(
        params=params, epoch=int(doc.get("best_epoch", 0)), history=history,
        stats=NormStats.from_dict(stats_doc["inputs"]),
        target_stats=NormStats.from_dict(stats_doc["target"]),
        config=config, bounds=DomainBounds.from_dict(doc["bounds"]),
        schema_names=tuple(doc["schema"]), config_hash=doc.get("config_hash", ""),
        schema_hash=doc.get("schema_hash", ""),
    )


def _save_resume_state(directory: Path, params: Dict[str, np.ndarray], opt: AdamState,
                       state: Dict[str, Any], dtype: str) -> None:
    save_params(directory / "last_params.bin", params, dtype)
    moments = {**{f"m.{k}": v for k, v in opt.m.items()}, **{f"v.{k}": v for k, v in opt.v.items()}}
    save_params(directory / "opt_state.bin", moments, dtype)
    write_json(directory / "train_state.json", {**state, "adam_step": opt.step})


def _load_resume_state(directory: Path, inventory: List[Dict[str, Any]], dtype: str,
                       as_dtype: str) -> Tuple[Dict[str, np.ndarray], AdamState, Dict[str, Any]]:
    state = read_json(directory / "train_state.json")
    params = load_params(directory / "last_params.bin", inventory, dtype, as_dtype)
    moment_inv = ([{**i, "name": f"m.{i['name']}"} for i in inventory]
                  + [{**i, "name": f"v.{i['name']}"} for i in inventory])
    raw = load_params(directory / "opt_state.bin", moment_inv, dtype, as_dtype)
    opt = AdamState({k[2:]: v for k, v in raw.items() if k.startswith("m.")},
                    {k[2:]: v for k, v in raw.items() if k.startswith("v.")},
                    int(state.get("adam_step", 0)))
    return params, opt, state


# ============================================================================
# FIT
# ============================================================================

def fit(
    dataset: Dataset,
    cfg: RunConfig,
    out_dir: Optional[Path] = None,
    resume: Optional[Path] = None,
    threads: int = 1
) -> Checkpoint:
    """
    Epoch loop with the masking curriculum and best-validation retention.

    History row 0 is the validation loss before any update. Shuffling,
    augmentation and hiding in epoch e draw from a stream seeded by
    (seed, e), so a resumed run repeats an uninterrupted one. Validation
    batches run on `threads` workers without changing the result.
    """
    split = dataset.split
    if not split.train or not split.val:
        raise InsufficientDataError("Training and validation splits must be non-empty",
                                    split.counts())
    tc = cfg.train
    if len(dataset.schema_names) + 3 != cfg.model.in_channels:
        raise SchemaMismatchError("model.in_channels must equal data channels + 3",
                                  {"channels": len(dataset.schema_names),
                                   "in_channels": cfg.model.in_channels})
    dtype = DTYPES[tc.dtype]
    ckpt = Checkpoint(
        params={}, epoch=0, history=[], stats=dataset.stats, target_stats=dataset.target_stats,
        config=cfg, bounds=dataset.bounds, schema_names=dataset.schema_names,
        config_hash=canonical_hash(cfg.to_dict()),
        schema_hash=canonical_hash(list(dataset.schema_names)),
        split_ids=split.ids(),
    )
    n_base = dataset.n_base

    if resume is not None:
        resume = Path(resume)
        previous = load_checkpoint(resume)
        inventory = parameter_inventory(previous.params)
        params, opt, state = _load_resume_state(resume, inventory, previous.params_dtype, tc.dtype)
        best_params = previous.params
        history = previous.history
        start = int(state["epoch"]) + 1
        best_val = float(state["best_val"])
        best_epoch = int(state["best_epoch"])
        bad_epochs = int(state["bad_epochs"])
        trained_ids = set(state.get("trained_ids", []))
        logger.info("Resuming at epoch %d from %s", start, resume)
    else:
        params = init_params(cfg.model, tc.seed, tc.init_scheme, tc.dtype)
        opt = AdamState.zeros(params)
        val0 = evaluate_loss(split.val, params, cfg, dataset.target_stats, n_base, threads)
        history = [{"epoch": 0, "train_loss": None, "val_loss": val0, "mask_fraction": None}]
        best_params = {k: v.copy() for k, v in params.items()}
        best_val, best_epoch, bad_epochs, start = val0, 0, 0, 1
        trained_ids = set()

    stopped = False
    for epoch in range(start, tc.epochs + 1):
        rng = np.random.default_rng([tc.seed, epoch])
        p = mask_schedule(epoch - 1, tc.mask_p0, tc.mask_horizon)
        order = rng.permutation(len(split.train))
        losses = []
        for b, begin in enumerate(range(0, len(order), tc.batch_size)):
            chosen = [split.train[i] for i in order[begin:begin + tc.batch_size]]
            trained_ids.update(pt.patch_id for pt in chosen)
            batch = assemble_batch(chosen, dataset.target_stats, n_base, tc.dtype, rng,
                                   augment=split.augment_train, hide_fraction=p)
            losses.append(train_step(batch, params, opt, cfg, batch_id=f"{epoch}:{b}"))
        val = evaluate_loss(split.val, params, cfg, dataset.target_stats, n_base, threads)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_loss": val, "mask_fraction": p})
        logger.info("epoch %d train %.5f val %.5f p=%.3f", epoch, np.mean(losses), val, p)
        if not np.isfinite(val):
            ckpt.params, ckpt.epoch, ckpt.history = best_params, best_epoch, history
            if out_dir is not None:
                save_checkpoint(out_dir, ckpt)
            raise DivergenceError(f"Validation loss became non-finite at epoch {epoch}",
                                  {"epoch": epoch, "last_good_epoch": best_epoch})
        improved = val < best_val
        if improved:
            best_val, best_epoch, bad_epochs = val, epoch, 0
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            bad_epochs += 1
        if out_dir is not None:
            ckpt.params, ckpt.epoch, ckpt.history = best_params, best_epoch, history
            save_checkpoint(out_dir, ckpt)
            _save_resume_state(Path(out_dir), params, opt, {
                "epoch": epoch, "best_val": best_val, "best_epoch": best_epoch,
                "bad_epochs": bad_epochs, "trained_ids": sorted(trained_ids),
            }, dtype)
        if not improved and bad_epochs >= tc.patience:
            logger.info("Early stop after epoch %d (best %d)", epoch, best_epoch)
            stopped = True
            break

    ckpt.params, ckpt.epoch, ckpt.history = best_params, best_epoch, history
    ckpt.stopped_early = stopped
    ckpt.trained_ids = trained_ids
    ckpt.test_metrics = held_out_metrics(split.test, ckpt)
    if out_dir is not None:
        save_checkpoint(out_dir, ckpt)
    return ckpt


def held_out_metrics(patches: Sequence[Patch], ckpt: Checkpoint) -> Dict[str, Any]:
    """Pooled metrics of the best parameters on the held-out patches."""
    if not patches:
        return {"n_patches": 0}
    n_base = len(ckpt.schema_names)
    preds, masks = predict_patches(patches, ckpt.params, ckpt.config, ckpt.target_stats, n_base)
    labels = np.stack([np.asarray(p.label, dtype=np.float64) for p in patches])
    report = metrics(preds[masks], labels[masks])
    return {"n_patches": len(patches), **report.to_dict()}


# ============================================================================
# INFERENCE DRIVER
# ============================================================================

def downscale(ckpt: Checkpoint, cube_fine: DataCube, threads: int = 1) -> TargetField:
    """Full-image predictions at every 3-hour timestamp of a fine cube."""
    if cube_fine.schema.names != tuple(ckpt.schema_names):
        raise SchemaMismatchError(
            "Fine cube schema differs from the training schema",
            {"cube": list(cube_fine.schema.names), "training": list(ckpt.schema_names)}
        )
    return infer_full(cube_fine, ckpt.params, ckpt.config.model, ckpt.stats,
                      ckpt.target_stats, ckpt.bounds, threads=threads,
                      dtype=ckpt.config.train.dtype)


# ============================================================================
# CAPACITY & GRADIENT PROBES
# ============================================================================

def overfit_single_patch(patch: Patch, cfg: RunConfig, target_stats: NormStats,
                         n_base: int, steps: int = 200) -> List[float]:
    """Loss trajectory of repeated Adam steps on one un-augmented patch."""
    params = init_params(cfg.model, cfg.train.seed, cfg.train.init_scheme, cfg.train.dtype)
    opt = AdamState.zeros(params)
    batch = assemble_batch([patch], target_stats, n_base, cfg.train.dtype)
    return [train_step(batch, params, opt, cfg, batch_id=f"overfit:{i}") for i in range(steps)]


def model_gradient_check(cfg: Optional[RunConfig] = None, instances: int = 20, seed: int = 0,
                         size: int = 8, max_elements: int = 40) -> float:
    """
    Worst relative error of d L_FULL / d theta through the whole model.

    Uses a small configuration, random initialization, a random window and
    a random label mask per instance.
    """
    if cfg is None:
        model = ModelConfig(in_channels=4, base_channels=4, window_length=3,
                            tcn_dilations=(1, 2), num_stages=1, stage_dilations=(1,),
                            se_reduction=2, ffn_expansion=2, se_pool="global")
        cfg = RunConfig(model=model, loss=LossConfig(), train=TrainConfig(dtype="float64"))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        params = init_params(cfg.model, seed + i, "random", "float64")
        window = rng.standard_normal((cfg.model.window_length, size, size, cfg.model.in_channels))
        target = rng.standard_normal((size, size))
        mask = rng.random((size, size)) < 0.7
        mask[0, 0] = mask[-1, -1] = True

        def f(t: Dict[str, Tensor]) -> Tensor:
            return loss_full(model_forward(window, t, cfg.model), target, mask, cfg.loss)
        worst = max(worst, grad_check(f, params, max_elements=max_elements, seed=seed + i))
    return worst


__all__ = [
    "TrainConfig", "RunConfig", "AdamState", "adam_update", "mask_schedule",
    "Dataset", "build_dataset", "assemble_batch", "train_step", "evaluate_loss",
    "predict_patches", "Checkpoint", "save_checkpoint", "load_checkpoint", "fit",
    "held_out_metrics", "downscale", "overfit_single_patch", "model_gradient_check",
]
