# conftest.py
import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.config import ModelConfig  # noqa: E402
from src.derivative_ops import exact_kernel_bank  # noqa: E402


def central_difference_check(fn, x: torch.Tensor, step: float = 1e-4) -> float:
    """Relative error between the autograd gradient of sum(fn(x) * w) and central differences.

    The comparison is on the whole gradient vector, which keeps isolated kinks
    (clamp, leaky ReLU) from dominating the error.
    """
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    gen = torch.Generator().manual_seed(1234)
    out = fn(x)
    w = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    (analytic,) = torch.autograd.grad((out * w).sum(), x)

    numeric = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    num_flat = numeric.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            plus = x.detach().clone().reshape(-1)
            plus[i] = orig + step
            minus = x.detach().clone().reshape(-1)
            minus[i] = orig - step
            f_plus = (fn(plus.reshape(x.shape)) * w).sum()
            f_minus = (fn(minus.reshape(x.shape)) * w).sum()
            num_flat[i] = (f_plus - f_minus) / (2 * step)
    return float(torch.linalg.norm(analytic - numeric) / torch.linalg.norm(numeric).clamp_min(1e-12))


@pytest.fixture
def exact_bank():
    """Noise-free float64 k=3 bank solved from the moment constraints."""
    return exact_kernel_bank(3, dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model_config():
    """Smallest advdiff configuration the 5x5 advection kernel accepts on 32 x 32 frames."""
    return ModelConfig(
        variant="advdiff",
        latent_channels=4,
        encoder_width=4,
        convlstm_widths=(4,),
        tau_in=2,
        tau_out=3,
    )


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
