# src/phycell.py
"""The physically constrained recurrent cell.

A step predicts in latent space with a combination of learned differential
operators (h~ = h + Phi(h)) and then assimilates the encoded input frame through
a Kalman-like gain: h' = (1 - K) * h~ + K * E(u).
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import pandas as pd
import torch
import torch.nn as nn

from .derivative_ops import DerivativeKernelBank, apply_derivatives, apply_operator, derivative_orders
from .errors import ConfigError, DimensionError, DomainTooSmallError

VARIANTS = ("baseline", "quad", "advdiff")
ADVDIFF_ORDERS = ((1, 0), (0, 1), (2, 0), (0, 2))
ADVECTION_KERNEL = 5
GAIN_KERNEL = 3
NORM_EPS = 1e-5
COEFFICIENT_WIDTH = 0.02
KERNEL_INIT_NOISE = 1e-3


@dataclass(frozen=True)
class AdvectionField:
    u_x: torch.Tensor  # (B, H_h, W_h)
    u_y: torch.Tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.u_x.shape)


def term_count(variant: str, k: int) -> int:
    if variant == "baseline":
        return k * k
    if variant == "quad":
        n = k * k
        return n + n * (n + 1) // 2
    if variant == "advdiff":
        return len(ADVDIFF_ORDERS)
    raise ConfigError(f"Unknown PhyCell variant {variant!r}")


def norm_groups(variant: str, k: int) -> int:
    """baseline: k groups of k terms; quad: groups of k^2 terms; advdiff: one group."""
    if variant == "baseline":
        return k
    if variant == "quad":
        return term_count(variant, k) // (k * k)
    return 1


def term_labels(variant: str, k: int) -> List[str]:
    first = [f"D({i},{j})" for i, j in derivative_orders(k)]
    if variant == "baseline":
        return first
    if variant == "quad":
        rows, cols = torch.triu_indices(len(first), len(first))
        return first + [f"{first[a]}*{first[b]}" for a, b in zip(rows.tolist(), cols.tolist())]
    if variant == "advdiff":
        return ["D(1,0)[u_x h]", "D(0,1)[u_y h]", "D(2,0)", "D(0,2)"]
    raise ConfigError(f"Unknown PhyCell variant {variant!r}")


class PhyCell(nn.Module):
    """Parameters of one cell: theta_1 (bank), theta_2 (combine), theta_3/theta_4 (gain), theta_U (advect)."""

    def __init__(self, channels: int, variant: str = "baseline", k: Optional[int] = None, use_norm: bool = True):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"PhyCell variant must be one of {VARIANTS}, got {variant!r}")
        k = k if k is not None else (7 if variant == "baseline" else 3)
        if variant in ("quad", "advdiff") and k != 3:
            raise ConfigError(f"PhyCell variant {variant} is defined for k=3, got k={k}")

        self.channels = channels
        self.variant = variant
        self.k = k
        self.term_count = term_count(variant, k)

        self.bank = DerivativeKernelBank.exact(k, noise=KERNEL_INIT_NOISE)
        self.norm = (
            nn.GroupNorm(norm_groups(variant, k), self.term_count, eps=NORM_EPS) if use_norm else nn.Identity()
        )
        # One linear combination of the terms per latent channel.
        self.combine = nn.Conv2d(channels * self.term_count, channels, 1, groups=channels, bias=False)
        nn.init.uniform_(self.combine.weight, -COEFFICIENT_WIDTH / 2, COEFFICIENT_WIDTH / 2)

        self.gain_pred = nn.Conv2d(channels, channels, GAIN_KERNEL, padding=GAIN_KERNEL // 2)
        self.gain_input = nn.Conv2d(channels, channels, GAIN_KERNEL, padding=GAIN_KERNEL // 2, bias=False)
        self.advect = (
            nn.Conv2d(channels, 2, ADVECTION_KERNEL, padding=ADVECTION_KERNEL // 2) if variant == "advdiff" else None
        )

    @property
    def coefficients(self) -> torch.Tensor:
        """(C_h, terms) view of theta_2."""
        return self.combine.weight.reshape(self.channels, self.term_count)

    def _check_state(self, h: torch.Tensor, name: str = "h_p") -> None:
        if h.dim() != 4 or h.shape[1] != self.channels:
            raise DimensionError(
                f"{name} must have shape (batch, {self.channels}, H_h, W_h), got {tuple(h.shape)}"
            )

    def terms(self, h_p: torch.Tensor) -> torch.Tensor:
        """Term stack entering the combination, before normalization: (B, C_h, terms, H_h, W_h)."""
        self._check_state(h_p)
        if self.variant == "baseline":
            return apply_derivatives(h_p, self.bank)
        if self.variant == "quad":
            d = apply_derivatives(h_p, self.bank)
            return torch.cat([d, upper_triangular_products(d)], dim=2)
        field = self.infer_advection(h_p)
        return torch.stack(
            [
                apply_operator(field.u_x.unsqueeze(1) * h_p, self.bank, (1, 0)),
                apply_operator(field.u_y.unsqueeze(1) * h_p, self.bank, (0, 1)),
                apply_operator(h_p, self.bank, (2, 0)),
                apply_operator(h_p, self.bank, (0, 2)),
            ],
            dim=2,
        )

    def infer_advection(self, h_p: torch.Tensor) -> AdvectionField:
        if self.advect is None:
            raise ConfigError(f"PhyCell variant {self.variant!r} has no advection field")
        self._check_state(h_p)
        if h_p.shape[-2] < ADVECTION_KERNEL or h_p.shape[-1] < ADVECTION_KERNEL:
            raise DomainTooSmallError(
                f"Advection needs spatial dims >= {ADVECTION_KERNEL}, got {tuple(h_p.shape[-2:])}"
            )
        u = self.advect(h_p)
        return AdvectionField(u_x=u[:, 0], u_y=u[:, 1])

    def predict(self, h_p: torch.Tensor) -> torch.Tensor:
        """Phi(h_p): normalized terms combined by theta_2."""
        d = self.terms(h_p)
        b, c, t, height, width = d.shape
        d = self.norm(d.reshape(b * c, t, height, width))
        return self.combine(d.reshape(b, c * t, height, width))

    def gain(self, h_tilde: torch.Tensor, encoded: torch.Tensor) -> torch.Tensor:
        self._check_state(h_tilde, "h_tilde")
        if encoded.shape != h_tilde.shape:
            raise DimensionError(f"Encoded input shape {tuple(encoded.shape)} != latent shape {tuple(h_tilde.shape)}")
        return torch.sigmoid(self.gain_pred(h_tilde) + self.gain_input(encoded))

    def forward(self, h_p: torch.Tensor, encoded: Optional[torch.Tensor] = None,
                gain: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        h_tilde = h_p + self.predict(h_p)
        if encoded is None:
            return h_tilde, h_tilde
        if encoded.shape != h_p.shape:
            raise DimensionError(f"Encoded input shape {tuple(encoded.shape)} != latent shape {tuple(h_p.shape)}")
        if gain is None:
            gain = self.gain(h_tilde, encoded)
        return assimilate(h_tilde, encoded, gain), h_tilde

    def extra_repr(self) -> str:
        return f"channels={self.channels}, variant={self.variant}, k={self.k}, terms={self.term_count}"


def upper_triangular_products(d: torch.Tensor, dim: int = -3) -> torch.Tensor:
    """Pointwise products d_a * d_b for a <= b, enumerated row by row."""
    n = d.shape[dim]
    rows, cols = torch.triu_indices(n, n, device=d.device)
    return d.index_select(dim, rows) * d.index_select(dim, cols)


def _require(cell: PhyCell, variant: str) -> None:
    if cell.variant != variant:
        raise ConfigError(f"Expected a {variant} PhyCell, got {cell.variant}")


def predict_baseline(h_p: torch.Tensor, cell: PhyCell) -> torch.Tensor:
    _require(cell, "baseline")
    return cell.predict(h_p)


def predict_quad(h_p: torch.Tensor, cell: PhyCell) -> torch.Tensor:
    _require(cell, "quad")
    return cell.predict(h_p)


def predict_advdiff(h_p: torch.Tensor, cell: PhyCell) -> torch.Tensor:
    _require(cell, "advdiff")
    return cell.predict(h_p)


def infer_advection(h_p: torch.Tensor, cell: PhyCell) -> AdvectionField:
    return cell.infer_advection(h_p)


def kalman_gain(h_tilde: torch.Tensor, encoded: torch.Tensor, cell: PhyCell) -> torch.Tensor:
    return cell.gain(h_tilde, encoded)


def assimilate(h_tilde: torch.Tensor, encoded: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    return (1 - gain) * h_tilde + gain * encoded


def phycell_step(h_p: torch.Tensor, encoded: Optional[torch.Tensor], cell: PhyCell,
                 gain: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Returns (h_p_new, h_tilde); without an encoded input the correction is skipped."""
    return cell(h_p, encoded, gain=gain)


def term_utilization(cell: PhyCell) -> pd.DataFrame:
    """Mean |c| per term over latent channels, most utilized first."""
    weights = cell.coefficients.detach().abs().mean(dim=0).cpu().numpy()
    df = pd.DataFrame({"term": term_labels(cell.variant, cell.k), "mean_abs_coefficient": weights})
    return df.sort_values("mean_abs_coefficient", ascending=False, kind="stable").reset_index(drop=True)
