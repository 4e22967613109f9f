"""Training loop (forking sequences + Adam + early stopping) and inference.

One encoder pass per series feeds decoding at every FCT simultaneously; the
loss is the quantile loss summed over FCTs, horizons and quantiles, with
masked cells contributing zero loss and zero gradient.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time

import numpy as np

from .data import ForecastCube, SeriesDataset
from .model import ModelConfig, MQForecaster
from .nn import Adam, load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad, quantile_loss

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "Scaler",
    "total_quantile_loss",
    "train",
    "forecast",
    "forecast_naive",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)

D_H_GRID = (32, 64, 128)
LR_GRID = (1e-2, 1e-3, 1e-4)


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries a diagnostic dump path."""


@dataclasses.dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    eval_every: int = 1          # validate every k-th epoch (and the last)
    lr_decay: float = 1.0        # multiplicative per-epoch decay
    warmup_epochs: int = 0       # linear ramp to the base rate
    swa_start: int = -1          # average weights from this epoch on; -1 off
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s):
        return cls(**json.loads(s))


@dataclasses.dataclass
class TrainReport:
    epochs: list                 # (epoch, train_loss, val_loss, seconds)
    selected_epoch: int
    checkpoint_path: str | None = None

    def to_text(self):
        lines = ["epoch\ttrain_loss\tval_loss\tseconds"]
        for e, tr, va, sec in self.epochs:
            lines.append(f"{e}\t{tr:.8f}\t{va:.8f}\t{sec:.2f}")
        lines.append(f"selected_epoch\t{self.selected_epoch}")
        return "\n".join(lines) + "\n"


@dataclasses.dataclass
class Scaler:
    """Per-series affine scaler fit on the training window."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, dataset: SeriesDataset):
        y_train = dataset.y[:, :dataset.train_end]
        mean = np.nanmean(y_train, axis=1)
        scale = np.nanstd(y_train, axis=1)
        mean = np.where(np.isfinite(mean), mean, 0.0)
        scale = np.where(np.isfinite(scale) & (scale > 1e-8), scale, 1.0)
        return cls(mean, scale)

    def transform(self, y, idx=None):
        m = self.mean if idx is None else self.mean[idx]
        s = self.scale if idx is None else self.scale[idx]
        return (y - m[:, None]) / s[:, None]

    def inverse(self, values, idx=None):
        m = self.mean if idx is None else self.mean[idx]
        s = self.scale if idx is None else self.scale[idx]
        extra = values.ndim - 1
        shape = (-1,) + (1,) * extra
        return values * s.reshape(shape) + m.reshape(shape)


def total_quantile_loss(cube, targets, mask, quantiles):
    """Sum of pinball losses over unmasked cells.

    cube: Tensor (B, T, H, Q); targets/mask: arrays (B, T, H). Cells whose
    target is missing get zero loss and zero gradient. All-masked input is
    defined as 0 (with a warning).
    """
    mask = np.asarray(mask, dtype=float)
    if mask.sum() == 0:
        log.warning("total_quantile_loss: every cell is masked; loss is 0")
        return Tensor(0.0)
    safe = np.where(mask > 0, np.where(np.isfinite(targets), targets, 0.0), 0.0)
    total = None
    for k, q in enumerate(quantiles):
        term = (quantile_loss(Tensor(safe), cube[:, :, :, k], q)
                * Tensor(mask)).sum()
        total = term if total is None else total + term
    return total


def _cell_masks(dataset: SeriesDataset, n_horizons):
    """(train, val, test) boolean masks over (N, T, H) forecast cells."""
    n, t_len = dataset.y.shape
    t = np.arange(t_len)[None, :, None]
    tgt = t + np.arange(1, n_horizons + 1)[None, None, :]
    observed = np.zeros((n, t_len, n_horizons), dtype=bool)
    valid = tgt[0] < t_len
    observed[:, valid] = np.isfinite(dataset.y[:, tgt[0][valid]])
    train = observed & (tgt < dataset.train_end)
    val = observed & (tgt >= dataset.train_end) & (tgt < dataset.val_end)
    test = observed & (tgt >= dataset.val_end)
    return train, val, test


def _make_batch(dataset: SeriesDataset, scaler: Scaler, idx):
    y = dataset.y[idx]
    y_std = scaler.transform(y, idx)
    y_std = np.where(np.isfinite(y_std), y_std, 0.0)
    return {
        "y_std": y_std,
        "covariates": dataset.covariates[idx],
        "global_ind": dataset.global_ind,
        "local_ind": dataset.local_ind[idx],
        "static": dataset.static[idx],
    }


def _eval_loss(model, dataset, scaler, mask, quantiles, batch_size):
    """Mean masked pinball loss per cell, inference mode."""
    n = dataset.n_series
    total, count = 0.0, 0.0
    tgt_std = _std_targets(dataset, scaler, model.config.n_horizons)
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, n))
        with no_grad():
            cube = model.forward(_make_batch(dataset, scaler, idx)).data
        m = mask[idx]
        safe = np.where(m, np.where(np.isfinite(tgt_std[idx]), tgt_std[idx], 0.0), 0.0)
        for k, q in enumerate(quantiles):
            diff = safe - cube[..., k]
            pin = np.where(diff >= 0, q * diff, (q - 1.0) * diff)
            total += (pin * m).sum()
        count += m.sum() * len(quantiles)
    return total / max(count, 1.0)


def _std_targets(dataset: SeriesDataset, scaler: Scaler, n_horizons):
    """targets[i, t, h] = standardized y[i, t + h + 1] (NaN outside)."""
    n, t_len = dataset.y.shape
    y_std = scaler.transform(dataset.y)
    tgt = np.arange(t_len)[:, None] + np.arange(1, n_horizons + 1)[None, :]
    out = np.full((n, t_len, n_horizons), np.nan)
    valid = tgt < t_len
    out[:, valid] = y_std[:, tgt[valid]]
    return out


def train(dataset: SeriesDataset, model_cfg: ModelConfig,
          train_cfg: TrainConfig, out_dir=None):
    """Fit a model; returns (model, scaler, TrainReport).

    Early stopping on validation loss with the configured patience; the
    returned model carries the parameters of the best epoch.
    """
    model_cfg = dataclasses.replace(
        model_cfg,
        d_cov=dataset.covariates.shape[2],
        d_local=dataset.local_ind.shape[2],
        d_global=dataset.global_ind.shape[1],
        d_static=dataset.static.shape[1],
    )
    model = MQForecaster(model_cfg, seed=train_cfg.seed)
    scaler = Scaler.fit(dataset)
    rng = np.random.default_rng(train_cfg.seed + 1000)
    opt = Adam(model.store.tensors(), lr=train_cfg.learning_rate,
               beta1=train_cfg.adam_beta1, beta2=train_cfg.adam_beta2,
               eps=train_cfg.adam_eps)

    train_mask, val_mask, _ = _cell_masks(dataset, model_cfg.n_horizons)
    tgt_std = _std_targets(dataset, scaler, model_cfg.n_horizons)
    n = dataset.n_series
    quantiles = model_cfg.quantiles

    best_val = np.inf
    best_epoch = -1
    best_params = None
    epochs_log = []
    stale = 0
    swa_sum = None
    swa_count = 0

    for epoch in range(train_cfg.max_epochs):
        t0 = time.time()
        scale = train_cfg.lr_decay ** max(0, epoch - train_cfg.warmup_epochs)
        if epoch < train_cfg.warmup_epochs:
            scale *= (epoch + 1) / (train_cfg.warmup_epochs + 1)
        opt.lr = train_cfg.learning_rate * scale
        perm = rng.permutation(n)
        ep_total, ep_count = 0.0, 0.0
        for lo in range(0, n, train_cfg.batch_size):
            idx = perm[lo:lo + train_cfg.batch_size]
            m = train_mask[idx]
            n_cells = m.sum() * len(quantiles)
            if n_cells == 0:
                continue
            cube = model.forward(_make_batch(dataset, scaler, idx),
                                 training=True)
            loss = total_quantile_loss(cube, tgt_std[idx], m, quantiles)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                path = _dump_divergence(out_dir, model, epoch)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; state dumped to {path}")
            ep_total += loss_val
            ep_count += n_cells
            opt.zero_grad()
            (loss * (1.0 / n_cells)).backward()
            opt.step()

        train_loss = ep_total / max(ep_count, 1.0)
        if train_cfg.swa_start >= 0 and epoch >= train_cfg.swa_start:
            arrays = model.store.state_arrays()
            if swa_sum is None:
                swa_sum = {k: v.copy() for k, v in arrays.items()}
            else:
                for k, v in arrays.items():
                    swa_sum[k] += v
            swa_count += 1
        evaluate = ((epoch + 1) % train_cfg.eval_every == 0
                    or epoch == train_cfg.max_epochs - 1)
        if not evaluate:
            epochs_log.append((epoch, train_loss, np.nan, time.time() - t0))
            log.info("epoch %d train %.6f", epoch, train_loss)
            continue
        val_loss = _eval_loss(model, dataset, scaler, val_mask, quantiles,
                              train_cfg.batch_size)
        epochs_log.append((epoch, train_loss, val_loss, time.time() - t0))
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: v.copy()
                           for k, v in model.store.state_arrays().items()}
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break

    if swa_count > 0:
        # tail weight average: flat-plateau iterates averaged for variance
        # reduction; overrides the best-validation-epoch restore
        model.store.load_arrays({k: v / swa_count for k, v in swa_sum.items()})
        best_epoch = -1
    elif best_params is not None:
        model.store.load_arrays(best_params)
    report = TrainReport(epochs=epochs_log, selected_epoch=best_epoch)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt = os.path.join(out_dir, "checkpoint.npz")
        save_model(ckpt, model, scaler)
        report.checkpoint_path = ckpt
        with open(os.path.join(out_dir, "train_report.txt"), "w") as f:
            f.write(report.to_text())
    return model, scaler, report


def _dump_divergence(out_dir, model, epoch):
    out_dir = out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"diverged_epoch{epoch}.npz")
    save_checkpoint(path, model.store, extras={"epoch": epoch})
    return path


# -- inference -----------------------------------------------------------


def forecast(dataset: SeriesDataset, model: MQForecaster, scaler: Scaler,
             fcts=None, batch_size=256):
    """Single-pass (forking) inference; returns a de-standardized cube."""
    t_len = dataset.n_time
    fcts = np.arange(t_len) if fcts is None else np.asarray(fcts, dtype=int)
    if fcts.min() < 0 or fcts.max() >= t_len:
        raise IndexError("FCT outside the data range")
    n = dataset.n_series
    chunks = []
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, n))
        cube = model.predict(_make_batch(dataset, scaler, idx))
        chunks.append(scaler.inverse(cube[:, fcts], idx))
    return ForecastCube(dataset.series_ids, fcts, model.config.quantiles,
                        np.concatenate(chunks, axis=0))


def forecast_naive(dataset: SeriesDataset, model: MQForecaster, scaler: Scaler,
                   fcts=None, batch_size=256):
    """Per-FCT oracle: re-encode history up to t, decode only at t.

    Slower by construction; used to verify forking equivalence and to
    benchmark throughput. Indicators keep their full span (they are known
    futures).
    """
    t_len = dataset.n_time
    fcts = np.arange(t_len) if fcts is None else np.asarray(fcts, dtype=int)
    if fcts.min() < 0 or fcts.max() >= t_len:
        raise IndexError("FCT outside the data range")
    n = dataset.n_series
    h_n = model.config.n_horizons
    q_n = len(model.config.quantiles)
    values = np.empty((n, len(fcts), h_n, q_n))
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, n))
        full = _make_batch(dataset, scaler, idx)
        for j, t in enumerate(fcts):
            sub = dict(full)
            sub["y_std"] = full["y_std"][:, :t + 1]
            sub["covariates"] = full["covariates"][:, :t + 1]
            # indicators are known futures: keep their full span so the
            # (bidirectional) position encodings match the full-pass run
            cube = model.predict(sub)
            values[idx, j] = scaler.inverse(cube[:, -1], idx)
    return ForecastCube(dataset.series_ids, fcts, model.config.quantiles,
                        values)


# -- checkpointing -------------------------------------------------------


def save_model(path, model: MQForecaster, scaler: Scaler):
    save_checkpoint(path, model.store, extras={
        "scaler_mean": scaler.mean,
        "scaler_scale": scaler.scale,
        "model_config": np.array(model.config.to_json()),
    })


def load_model(path):
    params, extras = load_checkpoint(path)
    cfg = ModelConfig.from_json(str(extras["model_config"]))
    model = MQForecaster(cfg, seed=0)
    model.store.load_arrays(params)
    scaler = Scaler(extras["scaler_mean"], extras["scaler_scale"])
    return model, scaler
