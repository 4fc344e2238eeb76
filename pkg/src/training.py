# src/training.py
import logging
import math
import os
import random
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset

from .checkpoint import save_checkpoint
from .config import TrainConfig
from .derivative_ops import moment_loss
from .errors import ArityError, DimensionError, EmptyDatasetError, TrainingDivergedError
from .exporters import ensure_dir, write_history
from .phydnet import PhyDNet, PredictionBundle, forecast

logger = logging.getLogger(__name__)

DBZ_MAX = 60.0
HISTORY_COLUMNS = ["epoch", "split", "image_loss", "icl_loss", "moment_loss", "total"]


@dataclass(frozen=True)
class LossBreakdown:
    image_loss: torch.Tensor
    icl_loss: torch.Tensor
    moment_loss: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> Dict[str, float]:
        return {
            "image_loss": float(self.image_loss.detach()),
            "icl_loss": float(self.icl_loss.detach()),
            "moment_loss": float(self.moment_loss.detach()),
            "total": float(self.total.detach()),
        }


@dataclass(frozen=True)
class TrainResult:
    checkpoint_path: Optional[str]
    history: pd.DataFrame
    final: Dict[str, float]


def set_seed(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def threshold_truth(frame: torch.Tensor, threshold_dbz: float = 40.0) -> torch.Tensor:
    """1.0 where the MLdBZ value exceeds threshold_dbz, else 0.0."""
    return (frame > threshold_dbz / DBZ_MAX).to(frame.dtype)


def icloss(logits: torch.Tensor, truth: torch.Tensor, class_weight: float = 5.0) -> torch.Tensor:
    """Mean per-pixel cross-entropy; terms of pixels whose truth is 1 are scaled by class_weight."""
    if truth.dim() == logits.dim():
        truth = truth.squeeze(1)
    if logits.dim() != 4 or logits.shape[1] != 2 or truth.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(
            f"icloss expects logits (B, 2, H, W) and truth (B, H, W), got {tuple(logits.shape)} and {tuple(truth.shape)}"
        )
    weight = torch.tensor([1.0, class_weight], dtype=logits.dtype, device=logits.device)
    return F.cross_entropy(logits, truth.long(), weight=weight, reduction="none").mean()


def sample_loss(predictions: Sequence[PredictionBundle], truths: torch.Tensor, model: PhyDNet,
                lambda_moment: float = 1.0) -> LossBreakdown:
    """Loss of one batch of rollouts. truths is (B, tau_out, H, W)."""
    if len(predictions) != truths.shape[1]:
        raise ArityError(f"Got {len(predictions)} predictions for {truths.shape[1]} target frames")

    image = torch.stack(
        [F.mse_loss(p.intensity, truths[:, i:i + 1]) for i, p in enumerate(predictions)]
    ).mean()

    cfg = model.config
    if cfg.icloss_enabled:
        icl = torch.stack(
            [
                icloss(p.logits, threshold_truth(truths[:, i], cfg.severe_threshold_dbz), cfg.class_weight)
                for i, p in enumerate(predictions)
            ]
        ).mean()
    else:
        icl = torch.zeros((), dtype=image.dtype, device=image.device)

    moment = moment_loss(model.phycell.bank).to(image.dtype)
    return LossBreakdown(image_loss=image, icl_loss=icl, moment_loss=moment, total=image + icl + lambda_moment * moment)


def _split_batch(batch: torch.Tensor, model: PhyDNet):
    tau_in, tau_out = model.config.tau_in, model.config.tau_out
    if batch.shape[1] < tau_in + tau_out:
        raise ArityError(f"Samples need {tau_in + tau_out} frames, got {batch.shape[1]}")
    return batch[:, :tau_in], batch[:, tau_in:tau_in + tau_out]


def _as_tensor(samples, model: PhyDNet) -> torch.Tensor:
    ref = model.decoder.out.weight
    return torch.as_tensor(np.asarray(samples), dtype=ref.dtype, device=ref.device)


def dataset_loss(model: PhyDNet, samples, lambda_moment: float = 1.0, batch_size: int = 8) -> Dict[str, float]:
    """Loss breakdown averaged over the N samples, without gradients."""
    data = _as_tensor(samples, model)
    if data.shape[0] == 0:
        raise EmptyDatasetError("dataset_loss needs at least one sample")
    totals = dict.fromkeys(HISTORY_COLUMNS[2:], 0.0)
    model.eval()
    with torch.no_grad():
        for start in range(0, data.shape[0], batch_size):
            batch = data[start:start + batch_size]
            inputs, targets = _split_batch(batch, model)
            parts = sample_loss(forecast(inputs, model), targets, model, lambda_moment).to_dict()
            for key, value in parts.items():
                totals[key] += value * batch.shape[0]
    return {key: value / data.shape[0] for key, value in totals.items()}


def _check_finite(breakdown: LossBreakdown, epoch: int, batch_index: int) -> None:
    values = breakdown.to_dict()
    if not all(math.isfinite(v) for v in values.values()):
        logger.error("Non-finite loss at epoch %d, batch %d: %s", epoch, batch_index, values)
        raise TrainingDivergedError(f"Training diverged at epoch {epoch}, batch {batch_index}: {values}")


def train(model: PhyDNet, train_samples, val_samples=None, config: Optional[TrainConfig] = None,
          out_dir: Optional[str] = None) -> TrainResult:
    """Adam over the total loss. samples are (N, tau_in + tau_out, H, W) arrays in MLdBZ."""
    config = config or TrainConfig()
    data = _as_tensor(train_samples, model)
    if config.max_samples:
        data = data[:config.max_samples]
    if data.shape[0] == 0:
        raise EmptyDatasetError("The training split has no samples")
    val = None
    if val_samples is not None and len(val_samples):
        val = _as_tensor(val_samples, model)
        if config.max_samples:
            val = val[:config.max_samples]

    generator = torch.Generator().manual_seed(config.seed)
    loader = DataLoader(TensorDataset(data), batch_size=config.batch_size, shuffle=True, generator=generator)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    rows: List[Dict] = []
    logger.info("Training on %d samples (%d validation) for %d epochs", data.shape[0],
                0 if val is None else val.shape[0], config.epochs)
    for epoch in range(1, config.epochs + 1):
        model.train()
        sums = dict.fromkeys(HISTORY_COLUMNS[2:], 0.0)
        for batch_index, (batch,) in enumerate(loader):
            inputs, targets = _split_batch(batch, model)
            feedback = targets if config.teacher_forcing else None
            breakdown = sample_loss(forecast(inputs, model, feedback=feedback), targets, model, config.lambda_moment)
            _check_finite(breakdown, epoch, batch_index)

            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()

            for key, value in breakdown.to_dict().items():
                sums[key] += value * batch.shape[0]

        train_row = {key: value / data.shape[0] for key, value in sums.items()}
        rows.append({"epoch": epoch, "split": "train", **train_row})
        message = f"epoch {epoch}/{config.epochs} train total={train_row['total']:.5f} img={train_row['image_loss']:.5f}"
        if val is not None:
            val_row = dataset_loss(model, val, config.lambda_moment, config.batch_size)
            rows.append({"epoch": epoch, "split": "validation", **val_row})
            message += f" | validation total={val_row['total']:.5f}"
        logger.info(message)

    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    checkpoint_path = None
    if out_dir:
        ensure_dir(out_dir)
        checkpoint_path = os.path.join(out_dir, "model.npz")
        save_checkpoint(checkpoint_path, model, config)
        write_history(history, os.path.join(out_dir, "history.csv"))
    final = history[history["split"] == "train"].iloc[-1][HISTORY_COLUMNS[2:]].astype(float).to_dict()
    return TrainResult(checkpoint_path=checkpoint_path, history=history, final=final)
