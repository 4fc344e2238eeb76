# src/evalkit.py
"""Forecast verification: CSI, MAE/MSE, Kolmogorov-Smirnov distance and SSIM, per lead time."""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy.stats import ks_2samp
from skimage.metrics import structural_similarity

from .errors import DimensionError, DomainTooSmallError, EmptyDatasetError

logger = logging.getLogger(__name__)

DBZ_MAX = 60.0
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
METRICS = ("mae", "mse", "ssim", "ks")

Forecaster = Callable[[np.ndarray, int], np.ndarray]


def _pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(pred, torch.Tensor):
        pred = pred.detach().cpu().numpy()
    if isinstance(truth, torch.Tensor):
        truth = truth.detach().cpu().numpy()
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"Prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred, truth


def csi_counts(pred, truth, threshold_dbz: float) -> Tuple[int, int, int]:
    """(hits, misses, false alarms) of the masks value > threshold_dbz / 60."""
    pred, truth = _pair(pred, truth)
    level = threshold_dbz / DBZ_MAX
    p, t = pred > level, truth > level
    return int(np.sum(p & t)), int(np.sum(~p & t)), int(np.sum(p & ~t))


def csi(pred, truth, threshold_dbz: float) -> float:
    hits, misses, false_alarms = csi_counts(pred, truth, threshold_dbz)
    denominator = hits + misses + false_alarms
    if denominator == 0:
        return 1.0  # both masks empty
    return hits / denominator


def standard_errors(pred, truth) -> Tuple[float, float]:
    pred, truth = _pair(pred, truth)
    diff = pred - truth
    return float(np.mean(np.abs(diff))), float(np.mean(diff ** 2))


def ks_distance(pred, truth) -> float:
    """Sup-norm distance between the empirical CDFs of the pixel intensities."""
    pred, truth = _pair(pred, truth)
    return float(ks_2samp(pred.ravel(), truth.ravel(), method="asymp").statistic)


def ssim_raw(pred, truth) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), data range 1."""
    pred, truth = _pair(pred, truth)
    if pred.ndim != 2:
        raise DimensionError(f"SSIM compares single frames, got shape {pred.shape}")
    if min(pred.shape) < SSIM_WINDOW:
        raise DomainTooSmallError(f"SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {pred.shape}")
    return float(
        structural_similarity(
            truth, pred, data_range=1.0, gaussian_weights=True, sigma=SSIM_SIGMA, use_sample_covariance=False
        )
    )


def ssim(pred, truth) -> float:
    return min(1.0, max(0.0, ssim_raw(pred, truth)))


@dataclass(frozen=True)
class MetricReport:
    """Rows "1".."tau_out" (lead times) plus "all"; columns mae, mse, ssim, ks and csi_<threshold>."""

    table: pd.DataFrame
    thresholds_dbz: Tuple[float, ...]
    samples: int

    @property
    def tau_out(self) -> int:
        return len(self.table) - 1

    def lead(self, i: int) -> pd.Series:
        return self.table.loc[str(i)]

    @property
    def overall(self) -> pd.Series:
        return self.table.loc["all"]


def csi_column(threshold_dbz: float) -> str:
    return f"csi_{threshold_dbz:g}"


def frame_metrics(pred, truth, thresholds_dbz: Sequence[float]) -> Dict[str, float]:
    mae, mse = standard_errors(pred, truth)
    row = {"mae": mae, "mse": mse, "ssim": ssim(pred, truth), "ks": ks_distance(pred, truth)}
    for thr in thresholds_dbz:
        row[csi_column(thr)] = csi(pred, truth, thr)
    return row


def persistence_forecast(inputs, tau_out: int):
    """The last input frame repeated tau_out times: (B, tau_in, H, W) -> (B, tau_out, H, W)."""
    if isinstance(inputs, torch.Tensor):
        return inputs[:, -1:].repeat(1, tau_out, 1, 1)
    inputs = np.asarray(inputs)
    return np.repeat(inputs[:, -1:], tau_out, axis=1)


def model_forecaster(model) -> Forecaster:
    from .phydnet import forecast, stack_intensity

    def run(inputs: np.ndarray, tau_out: int) -> np.ndarray:
        ref = model.decoder.out.weight
        model.eval()
        with torch.no_grad():
            x = torch.as_tensor(inputs, dtype=ref.dtype, device=ref.device)
            return stack_intensity(forecast(x, model, tau_out)).cpu().numpy()

    return run


def evaluate(forecaster, samples, tau_in: int, tau_out: int, thresholds_dbz: Sequence[float] = (8.0, 40.0),
             batch_size: int = 8) -> MetricReport:
    """Mean of per-frame metrics per lead time; the "all" row averages the lead rows.

    forecaster is a PhyDNet or a callable (inputs, tau_out) -> predictions; samples are
    (N, tau_in + tau_out, H, W) arrays.
    """
    if isinstance(forecaster, torch.nn.Module):
        forecaster = model_forecaster(forecaster)
    samples = np.asarray(samples)
    if samples.ndim != 4 or samples.shape[0] == 0:
        raise EmptyDatasetError(f"evaluate needs a non-empty (N, T, H, W) sample array, got shape {samples.shape}")
    if samples.shape[1] < tau_in + tau_out:
        raise DimensionError(f"Samples have {samples.shape[1]} frames, {tau_in + tau_out} are needed")

    per_lead: List[List[Dict[str, float]]] = [[] for _ in range(tau_out)]
    for start in range(0, samples.shape[0], batch_size):
        batch = samples[start:start + batch_size]
        preds = np.asarray(forecaster(batch[:, :tau_in], tau_out))
        truths = batch[:, tau_in:tau_in + tau_out]
        for n in range(batch.shape[0]):
            for i in range(tau_out):
                per_lead[i].append(frame_metrics(preds[n, i], truths[n, i], thresholds_dbz))

    rows = {str(i + 1): pd.DataFrame(per_lead[i]).mean() for i in range(tau_out)}
    table = pd.DataFrame.from_dict(rows, orient="index")
    table.loc["all"] = table.mean()
    table.index.name = "lead"
    logger.info("Evaluated %d samples over %d lead times", samples.shape[0], tau_out)
    return MetricReport(table=table, thresholds_dbz=tuple(thresholds_dbz), samples=int(samples.shape[0]))


def relative_change(report: MetricReport, baseline: MetricReport) -> pd.DataFrame:
    """(model - baseline) / baseline per metric and lead time; NaN where the baseline is 0."""
    base = baseline.table.replace(0.0, np.nan)
    return (report.table - baseline.table) / base


def report_summary(report: MetricReport, title: str = "Forecast verification",
                   delta_minutes: int = 10) -> str:
    lines = [title, f"samples: {report.samples}", ""]
    header = "lead      " + "  ".join(f"{c:>8}" for c in report.table.columns)
    lines.append(header)
    for lead, row in report.table.iterrows():
        label = "all" if lead == "all" else f"+{int(lead) * delta_minutes} min"
        lines.append(f"{label:<10}" + "  ".join(f"{v:8.4f}" for v in row.values))
    return "\n".join(lines) + "\n"
