"""Training loop: focal loss + Adam with validation-kappa checkpointing."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .core.losses import FocalLossConfig, focal_loss
from .core.optim import AdamState, adam_step
from .dataset import Epoch, minibatches
from .errors import ConfigError, DataError, NumericError
from .evaluate import MetricsReport, evaluate_labels
from .model import ArchConfig, ModelParams, forward_batch, init_params, save_checkpoint


@dataclass
class TrainConfig:
    lr: float = 1e-4
    gamma: float = 2.0
    batch_size: int = 8
    max_epochs: int = 30
    early_stop_patience: int = 5
    seed: int = 0
    deterministic: bool = True
    checkpoint_dir: Optional[str] = None
    class_weights: Optional[Sequence[float]] = None
    max_seconds: Optional[float] = None  # soft wall-clock budget

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr: must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs: must be >= 1, got {self.max_epochs}")


@dataclass
class TrainLog:
    rows: List[dict] = field(default_factory=list)

    COLUMNS = ("epoch", "train_loss", "grad_norm", "val_loss", "val_macro_f1",
               "val_kappa", "wall_time_s")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.COLUMNS)
            for row in self.rows:
                w.writerow([row[c] for c in self.COLUMNS])

    def metric_rows(self) -> List[tuple]:
        """Rows without the wall-time column, for determinism comparisons."""
        cols = [c for c in self.COLUMNS if c != "wall_time_s"]
        return [tuple(row[c] for c in cols) for row in self.rows]


def _param_norms(params: ModelParams) -> str:
    return ", ".join(f"{name}={np.linalg.norm(t.data):.3g}"
                     for name, t in params.named_parameters())


def _global_grad_norm(params: ModelParams) -> float:
    total = 0.0
    for _, t in params.named_parameters():
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def _forward_loss(params: ModelParams, frames, labels,
                  loss_cfg: FocalLossConfig):
    probs, _, _ = forward_batch(frames, params)
    return focal_loss(probs, labels, loss_cfg), probs


def validate(params: ModelParams, epochs: Sequence[Epoch],
             loss_cfg: FocalLossConfig, batch_size: int = 16):
    """Mean focal loss plus predictions over a labeled split."""
    losses, preds, refs = [], [], []
    for frames, labels in minibatches(epochs, batch_size, rng=None):
        loss, probs = _forward_loss(params, frames, labels, loss_cfg)
        losses.append(loss.item() * len(labels))
        preds.extend(np.argmax(probs.data, axis=-1).tolist())
        refs.extend(labels.tolist())
    return float(np.sum(losses) / len(refs)), refs, preds


def evaluate_split(params: ModelParams, epochs: Sequence[Epoch],
                   duration_s: Optional[float] = None,
                   batch_size: int = 16) -> MetricsReport:
    """Score a labeled split and build the full metrics report."""
    labeled = [e for e in epochs if e.label is not None]
    if not labeled:
        raise DataError("evaluate_split needs labeled epochs")
    labeled = sorted(labeled, key=lambda e: (e.recording_id, e.epoch_index))
    preds, refs = [], []
    for frames, labels in minibatches(labeled, batch_size, rng=None):
        probs, _, _ = forward_batch(frames, params)
        preds.extend(np.argmax(probs.data, axis=-1).tolist())
        refs.extend(labels.tolist())
    duration = duration_s if duration_s is not None else labeled[0].duration_s
    return evaluate_labels(refs, preds, duration_s=duration,
                           groups=[e.recording_id for e in labeled])


def train(model: Union[ModelParams, ArchConfig], train_set: Sequence[Epoch],
          val_set: Sequence[Epoch],
          cfg: TrainConfig) -> Tuple[ModelParams, TrainLog]:
    """Minimize mean focal loss with Adam; keep the checkpoint with the best
    validation kappa (ties broken by lower validation loss)."""
    if not train_set or not val_set:
        raise DataError("train and validation splits must be non-empty")
    if any(e.label is None for e in train_set) or \
            any(e.label is None for e in val_set):
        raise DataError("training requires fully labeled train/val epochs")

    if isinstance(model, ArchConfig):
        params = init_params(model, np.random.default_rng(cfg.seed))
    else:
        params = model
    named = params.named_parameters()
    rng = np.random.default_rng([cfg.seed, 0x7261696e])
    state = AdamState(lr=cfg.lr)
    loss_cfg = FocalLossConfig(gamma=cfg.gamma,
                               class_weights=cfg.class_weights)

    log = TrainLog()
    best_params = params.copy()
    best_kappa = -np.inf
    best_val_loss = np.inf
    since_best = 0
    t0 = time.time()

    for epoch in range(cfg.max_epochs):
        epoch_losses = []
        grad_norms = []
        for bi, (frames, labels) in enumerate(
                minibatches(train_set, cfg.batch_size, rng)):
            params.zero_grad()
            loss, _ = _forward_loss(params, frames, labels, loss_cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {bi}; "
                    f"parameter norms: {_param_norms(params)}")
            loss.backward()
            grad_norms.append(_global_grad_norm(params))
            adam_step(named, state)
            epoch_losses.append(value * len(labels))

        val_loss, refs, preds = validate(params, val_set, loss_cfg,
                                         batch_size=max(cfg.batch_size, 16))
        val_report = evaluate_labels(refs, preds)
        row = {
            "epoch": epoch,
            "train_loss": float(np.sum(epoch_losses) / len(train_set)),
            "grad_norm": float(np.mean(grad_norms)),
            "val_loss": val_loss,
            "val_macro_f1": val_report.macro_f1,
            "val_kappa": val_report.kappa,
            "wall_time_s": time.time() - t0,
        }
        log.rows.append(row)

        improved = (val_report.kappa > best_kappa or
                    (val_report.kappa == best_kappa and val_loss < best_val_loss))
        if improved:
            best_kappa = val_report.kappa
            best_val_loss = val_loss
            best_params = params.copy()
            since_best = 0
            if cfg.checkpoint_dir:
                os.makedirs(cfg.checkpoint_dir, exist_ok=True)
                save_checkpoint(best_params,
                                os.path.join(cfg.checkpoint_dir, "best.ckpt"))
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
        if cfg.max_seconds is not None and time.time() - t0 > cfg.max_seconds:
            break

    return best_params, log
