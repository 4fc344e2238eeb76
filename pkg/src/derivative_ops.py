# src/derivative_ops.py
"""Convolution kernels constrained by their moments to approximate spatial derivatives.

Kernel axis convention: the first kernel axis is x (the axis of i-derivatives),
the second is y. Offsets run from -(k-1)/2 to (k-1)/2 on both axes. Kernels are
applied as cross-correlations (torch.nn.functional.conv2d), so a kernel q acts as
sum_{u,v} q[u, v] * h(x + u, y + v), which is what the moment definition expects.
"""
import logging
import math
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DomainTooSmallError, InvalidKernelError, InvalidOrderError

logger = logging.getLogger(__name__)

MAX_EXACT_K = 7


def _check_size(k: int) -> None:
    if k < 3 or k % 2 == 0:
        raise InvalidKernelError(f"Kernel size must be odd and >= 3, got k={k}")


def moment_basis(k: int, dtype: torch.dtype = torch.float64, device=None) -> torch.Tensor:
    """P[a, u] = u**a / a! for offsets u = -(k-1)/2 .. (k-1)/2, so that M(q) = P q P^T."""
    _check_size(k)
    r = (k - 1) // 2
    rows = [[(u ** a) / math.factorial(a) for u in range(-r, r + 1)] for a in range(k)]
    return torch.tensor(rows, dtype=dtype, device=device)


def moment_matrix(kernel: torch.Tensor) -> torch.Tensor:
    """Moment matrix of a k x k kernel (or of a stack of them along leading axes)."""
    kernel = torch.as_tensor(kernel)
    if kernel.dim() < 2 or kernel.shape[-1] != kernel.shape[-2] or kernel.shape[-1] % 2 == 0:
        raise InvalidKernelError(f"Kernel must be square with an odd side, got shape {tuple(kernel.shape)}")
    k = kernel.shape[-1]
    if k < 3:
        raise InvalidKernelError(f"Kernel must be at least 3 x 3, got shape {tuple(kernel.shape)}")
    basis = moment_basis(k, dtype=kernel.dtype if kernel.is_floating_point() else torch.float64, device=kernel.device)
    return torch.einsum("au,...uv,bv->...ab", basis, kernel.to(basis.dtype), basis)


def target_delta(i: int, j: int, k: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    _check_size(k)
    if not (0 <= i < k and 0 <= j < k):
        raise InvalidOrderError(f"Derivative orders must satisfy 0 <= i, j < {k}, got ({i}, {j})")
    delta = torch.zeros(k, k, dtype=dtype)
    delta[i, j] = 1.0
    return delta


def derivative_orders(k: int) -> List[Tuple[int, int]]:
    """(i, j) pairs in channel order: channel index = i * k + j."""
    return [(i, j) for i in range(k) for j in range(k)]


def _exact_kernels(k: int) -> torch.Tensor:
    if k > MAX_EXACT_K:
        raise InvalidKernelError(f"Exact kernel construction supports k <= {MAX_EXACT_K}, got k={k}")
    basis = moment_basis(k, dtype=torch.float64)
    # vec(M) = kron(P, P) vec(q) with row-major vectorization.
    system = torch.kron(basis, basis)
    targets = torch.stack([target_delta(i, j, k).reshape(-1) for i, j in derivative_orders(k)], dim=1)
    solution = torch.linalg.solve(system, targets)
    return solution.T.reshape(k * k, k, k)


class DerivativeKernelBank(nn.Module):
    """The k^2 kernels q_{i,j}, stored as one (k^2, k, k) parameter in (i, j) row-major order."""

    def __init__(self, k: int, kernels: Optional[torch.Tensor] = None, dtype: Optional[torch.dtype] = None):
        super().__init__()
        _check_size(k)
        self.k = k
        dtype = dtype or torch.get_default_dtype()
        if kernels is None:
            kernels = torch.zeros(k * k, k, k, dtype=dtype)
        kernels = torch.as_tensor(kernels, dtype=dtype)
        if tuple(kernels.shape) != (k * k, k, k):
            raise InvalidKernelError(f"A k={k} bank needs kernels of shape {(k * k, k, k)}, got {tuple(kernels.shape)}")
        self.kernels = nn.Parameter(kernels.clone())

    @classmethod
    def exact(cls, k: int, noise: float = 0.0, generator: Optional[torch.Generator] = None,
              dtype: Optional[torch.dtype] = None) -> "DerivativeKernelBank":
        kernels = _exact_kernels(k)
        if noise:
            kernels = kernels + noise * torch.randn(kernels.shape, generator=generator, dtype=torch.float64)
        return cls(k, kernels, dtype=dtype)

    @classmethod
    def random(cls, k: int, scale: float = 0.1, generator: Optional[torch.Generator] = None,
               dtype: Optional[torch.dtype] = None) -> "DerivativeKernelBank":
        _check_size(k)
        kernels = scale * torch.randn(k * k, k, k, generator=generator, dtype=torch.float64)
        return cls(k, kernels, dtype=dtype)

    @property
    def orders(self) -> List[Tuple[int, int]]:
        return derivative_orders(self.k)

    def index(self, i: int, j: int) -> int:
        if not (0 <= i < self.k and 0 <= j < self.k):
            raise InvalidOrderError(f"Derivative orders must satisfy 0 <= i, j < {self.k}, got ({i}, {j})")
        return i * self.k + j

    def kernel(self, i: int, j: int) -> torch.Tensor:
        return self.kernels[self.index(i, j)]

    def targets(self) -> torch.Tensor:
        return torch.stack([target_delta(i, j, self.k, dtype=self.kernels.dtype) for i, j in self.orders])

    def extra_repr(self) -> str:
        return f"k={self.k}"


def exact_kernel_bank(k: int, noise: float = 0.0, generator: Optional[torch.Generator] = None,
                      dtype: Optional[torch.dtype] = None) -> DerivativeKernelBank:
    return DerivativeKernelBank.exact(k, noise=noise, generator=generator, dtype=dtype)


def moment_loss(bank: DerivativeKernelBank) -> torch.Tensor:
    """Sum over the k^2 kernels of ||M(q_{i,j}) - Delta_{i,j}||_F."""
    residual = moment_matrix(bank.kernels) - bank.targets().to(bank.kernels.device)
    return torch.linalg.matrix_norm(residual, ord="fro").sum()


def _check_domain(h: torch.Tensor, k: int) -> None:
    if h.dim() != 4:
        raise DomainTooSmallError(f"Expected a (batch, channels, H, W) field, got shape {tuple(h.shape)}")
    if h.shape[-2] < k or h.shape[-1] < k:
        raise DomainTooSmallError(f"Spatial dims {tuple(h.shape[-2:])} are smaller than the kernel size k={k}")


def apply_derivatives(h: torch.Tensor, bank: DerivativeKernelBank) -> torch.Tensor:
    """All k^2 derivative channels of every input channel: (B, C, H, W) -> (B, C, k^2, H, W)."""
    k = bank.k
    _check_domain(h, k)
    b, c, height, width = h.shape
    weight = bank.kernels.to(h.dtype).unsqueeze(1)
    out = F.conv2d(h.reshape(b * c, 1, height, width), weight, padding=(k - 1) // 2)
    return out.reshape(b, c, k * k, height, width)


def apply_operator(h: torch.Tensor, bank: DerivativeKernelBank, order: Tuple[int, int]) -> torch.Tensor:
    """One derivative D_{i,j} of every input channel: (B, C, H, W) -> (B, C, H, W)."""
    k = bank.k
    _check_domain(h, k)
    b, c, height, width = h.shape
    weight = bank.kernel(*order).to(h.dtype).reshape(1, 1, k, k)
    out = F.conv2d(h.reshape(b * c, 1, height, width), weight, padding=(k - 1) // 2)
    return out.reshape(b, c, height, width)


def fit_kernel_bank(bank: DerivativeKernelBank, steps: int = 500, lr: float = 0.05) -> List[float]:
    """Optimizes the bank with the moment loss alone; returns the loss before every step."""
    optimizer = torch.optim.Adam(bank.parameters(), lr=lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=steps)
    history: List[float] = []
    for _ in range(steps):
        optimizer.zero_grad()
        loss = moment_loss(bank)
        history.append(float(loss.detach()))
        loss.backward()
        optimizer.step()
        scheduler.step()
    logger.debug("Kernel bank fit: moment loss %.3e -> %.3e", history[0], float(moment_loss(bank).detach()))
    return history
