# src/figures.py
import logging
import os
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .errors import DataError, DimensionError  # noqa: E402

logger = logging.getLogger(__name__)

LATENT_SCALE = 4
CMAP = "viridis"


def _numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _save(fig, out_path: str) -> str:
    try:
        parent = os.path.dirname(out_path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        fig.savefig(out_path, dpi=100, bbox_inches="tight")
    except OSError as exc:
        raise DataError(f"Cannot write figure {out_path}: {exc}") from None
    finally:
        plt.close(fig)
    logger.info("Wrote %s", out_path)
    return out_path


def advection_arrows(u_x, u_y, stride: int = 2, scale: int = LATENT_SCALE):
    """Arrow positions and components in image coordinates.

    Returns (X, Y, U, V): X/Y are column/row pixel positions of latent cell centres,
    U is the horizontal (y) component and V the vertical (x) component.
    """
    u_x, u_y = _numpy(u_x), _numpy(u_y)
    if u_x.shape != u_y.shape or u_x.ndim != 2:
        raise DimensionError(f"Advection components must be matching 2-D maps, got {u_x.shape} and {u_y.shape}")
    rows = np.arange(0, u_x.shape[0], stride)
    cols = np.arange(0, u_x.shape[1], stride)
    r, c = np.meshgrid(rows, cols, indexing="ij")
    centre = (scale - 1) / 2.0
    return c * scale + centre, r * scale + centre, u_y[r, c], u_x[r, c]


def plot_advection(field, background, out_path: str, stride: int = 2, title: Optional[str] = None) -> str:
    """Quiver of one advection field (latent resolution) over an H x W background frame."""
    u_x, u_y = _numpy(field.u_x), _numpy(field.u_y)
    if u_x.ndim == 3:
        u_x, u_y = u_x[0], u_y[0]
    background = _numpy(background)
    if background.shape != (u_x.shape[0] * LATENT_SCALE, u_x.shape[1] * LATENT_SCALE):
        raise DimensionError(
            f"Background {background.shape} does not match a {u_x.shape} field upsampled x{LATENT_SCALE}"
        )
    X, Y, U, V = advection_arrows(u_x, u_y, stride)

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(background, cmap=CMAP, vmin=0.0, vmax=1.0)
    ax.quiver(X, Y, U, V, angles="xy", scale_units="xy", scale=1.0 / LATENT_SCALE, color="white")
    ax.set_title(title or "Advection field")
    ax.set_xlabel("y")
    ax.set_ylabel("x")
    return _save(fig, out_path)


def plot_branches(combined: Sequence, physical: Sequence, residual: Sequence, out_path: str,
                  truth: Optional[Sequence] = None, delta_minutes: int = 10) -> str:
    """One column per lead time; rows: truth (optional), combined, physical, residual."""
    rows = [("combined", combined), ("physical", physical), ("residual", residual)]
    if truth is not None:
        rows.insert(0, ("truth", truth))
    leads = len(combined)
    fig, axes = plt.subplots(len(rows), leads, figsize=(2 * leads, 2 * len(rows)), squeeze=False)
    for r, (label, frames) in enumerate(rows):
        for i in range(leads):
            ax = axes[r][i]
            ax.imshow(np.squeeze(_numpy(frames[i])), cmap=CMAP, vmin=0.0, vmax=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(f"+{(i + 1) * delta_minutes} min")
            if i == 0:
                ax.set_ylabel(label)
    return _save(fig, out_path)


def plot_mae_curve(curves: Dict[str, Sequence[float]], out_path: str, delta_minutes: int = 10) -> str:
    fig, ax = plt.subplots(figsize=(6, 3))
    for label, values in curves.items():
        minutes = [(i + 1) * delta_minutes for i in range(len(values))]
        ax.plot(minutes, list(values), marker="o", label=label)
    ax.set_title("MAE by lead time")
    ax.set_xlabel("Lead time (min)")
    ax.set_ylabel("MAE (MLdBZ)")
    ax.legend()
    return _save(fig, out_path)


def plot_coefficients(utilization: pd.DataFrame, out_path: str, top: int = 10) -> str:
    """Bar chart of the most utilized PhyCell terms (mean |coefficient|)."""
    head = utilization.head(top)
    fig, ax = plt.subplots(figsize=(max(5, 0.6 * len(head)), 3))
    ax.bar(head["term"].astype(str), head["mean_abs_coefficient"])
    ax.set_title("Term utilization")
    ax.set_xlabel("Term")
    ax.set_ylabel("Mean |c|")
    ax.tick_params(axis="x", rotation=45)
    return _save(fig, out_path)

