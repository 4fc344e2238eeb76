# src/phydnet.py
"""Encoder, PhyCell, ConvLSTM and decoder assembled into the recurrent cell and the forecaster.

Frames are (B, 1, H, W) tensors in MLdBZ; sequences are (B, T, H, W). The latent
space has C_h channels at a quarter of the pixel resolution.
"""
import math
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ArityError, ConfigError, DimensionError
from .phycell import AdvectionField, PhyCell, infer_advection, phycell_step
from .residual_convlstm import ConvLSTMState, ResidualConvLSTM, convlstm_step

SCALE = 4
LEAKY_SLOPE = 0.2


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class Encoder(nn.Module):
    def __init__(self, latent_channels: int, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, width, 3, stride=2, padding=1),
            _group_norm(width),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(width, latent_channels, 3, stride=2, padding=1),
            _group_norm(latent_channels),
            nn.LeakyReLU(LEAKY_SLOPE),
        )

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        return self.net(frame)


class Decoder(nn.Module):
    def __init__(self, latent_channels: int, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.ConvTranspose2d(latent_channels, width, 4, stride=2, padding=1),
            _group_norm(width),
            nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.out = nn.ConvTranspose2d(width, 1, 4, stride=2, padding=1)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        return torch.clamp(self.out(self.net(latent)), 0.0, 1.0)


@dataclass(frozen=True)
class CellMemory:
    h_p: torch.Tensor
    h_r: torch.Tensor
    convlstm: Optional[ConvLSTMState] = None


@dataclass(frozen=True)
class PredictionBundle:
    intensity: torch.Tensor                  # (B, 1, H, W) MLdBZ
    prob: Optional[torch.Tensor] = None      # (B, 1, H, W) probability of > severe threshold
    logits: Optional[torch.Tensor] = None    # (B, 2, H, W), kept for the ICLoss


@dataclass(frozen=True)
class BranchDecomposition:
    combined: List[PredictionBundle]
    physical: List[torch.Tensor]
    residual: List[torch.Tensor]


class PhyDNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.latent_channels
        self.encoder = Encoder(c, config.encoder_width)
        self.decoder = Decoder(c, config.encoder_width)
        self.phycell = PhyCell(c, variant=config.variant, k=config.k, use_norm=config.use_norm)
        self.residual = ResidualConvLSTM(c, config.convlstm_widths) if config.residual_enabled else None
        self.prob_head = nn.Conv2d(1, 2, 3, padding=1) if config.icloss_enabled else None

    def init_memory(self, batch: int, height: int, width: int) -> CellMemory:
        return init_memory(self, batch, height, width)

    def forward(self, inputs: torch.Tensor, tau_out: Optional[int] = None,
                feedback: Optional[torch.Tensor] = None) -> List[PredictionBundle]:
        return forecast(inputs, self, tau_out, feedback=feedback)


def _param(model: PhyDNet) -> torch.Tensor:
    return model.decoder.out.weight


def _check_frame(frame: torch.Tensor) -> None:
    if frame.dim() != 4 or frame.shape[1] != 1:
        raise DimensionError(f"Frames must have shape (batch, 1, H, W), got {tuple(frame.shape)}")
    if frame.shape[-2] % SCALE or frame.shape[-1] % SCALE:
        raise DimensionError(f"Frame height and width must be divisible by {SCALE}, got {tuple(frame.shape[-2:])}")


def init_memory(model: PhyDNet, batch: int, height: int, width: int) -> CellMemory:
    """Zero (cold-start) memory for frames of size height x width."""
    if height % SCALE or width % SCALE:
        raise DimensionError(f"Frame height and width must be divisible by {SCALE}, got {(height, width)}")
    ref = _param(model)
    shape = (batch, model.config.latent_channels, height // SCALE, width // SCALE)
    zeros = torch.zeros(shape, dtype=ref.dtype, device=ref.device)
    convlstm = None
    if model.residual is not None:
        convlstm = model.residual.init_state(batch, shape[2], shape[3], dtype=ref.dtype, device=ref.device)
    return CellMemory(h_p=zeros, h_r=zeros, convlstm=convlstm)


def encode(frame: torch.Tensor, model: PhyDNet) -> torch.Tensor:
    _check_frame(frame)
    return model.encoder(frame)


def decode(latent: torch.Tensor, model: PhyDNet) -> torch.Tensor:
    if latent.dim() != 4 or latent.shape[1] != model.config.latent_channels:
        raise DimensionError(
            f"Latent must have shape (batch, {model.config.latent_channels}, H_h, W_h), got {tuple(latent.shape)}"
        )
    return model.decoder(latent)


def prob_head(intensity: torch.Tensor, model: PhyDNet):
    """Returns (prob, logits); prob is the softmax probability of the above-threshold class."""
    if model.prob_head is None:
        raise ConfigError("The probability head is only built when model.icloss_enabled is true")
    logits = model.prob_head(intensity)
    return F.softmax(logits, dim=1)[:, 1:2], logits


def step(frame: torch.Tensor, memory: CellMemory, model: PhyDNet):
    """One application of the recurrent cell: returns (PredictionBundle, new CellMemory)."""
    encoded = encode(frame, model)
    if encoded.shape != memory.h_p.shape:
        raise DimensionError(f"Encoded frame {tuple(encoded.shape)} does not match memory {tuple(memory.h_p.shape)}")

    h_p, _ = phycell_step(memory.h_p, encoded, model.phycell)
    if model.residual is not None:
        h_r, convlstm = convlstm_step(memory.convlstm, encoded, model.residual)
    else:
        h_r, convlstm = torch.zeros_like(h_p), None

    intensity = decode(h_p + h_r, model)
    prob = logits = None
    if model.prob_head is not None:
        prob, logits = prob_head(intensity, model)
    return PredictionBundle(intensity=intensity, prob=prob, logits=logits), CellMemory(h_p, h_r, convlstm)


def _rollout(inputs: torch.Tensor, model: PhyDNet, tau_out: Optional[int], feedback: Optional[torch.Tensor],
             branches: bool = False, advection: bool = False):
    cfg = model.config
    tau_out = tau_out or cfg.tau_out
    if inputs.dim() != 4 or inputs.shape[1] != cfg.tau_in:
        raise ArityError(f"Expected inputs of shape (batch, {cfg.tau_in}, H, W), got {tuple(inputs.shape)}")
    if tau_out < 1:
        raise ArityError(f"tau_out must be >= 1, got {tau_out}")
    if feedback is not None and feedback.shape[1] < tau_out - 1:
        raise ArityError(f"Teacher forcing needs {tau_out - 1} frames, got {feedback.shape[1]}")

    b, _, height, width = inputs.shape
    memory = init_memory(model, b, height, width)
    frames = inputs.unsqueeze(2)

    # Warm-up: outputs are discarded except the one following the last input.
    for t in range(cfg.tau_in):
        previous_h_p = memory.h_p
        bundle, memory = step(frames[:, t], memory, model)

    bundles, physical, residual, fields = [], [], [], []
    for i in range(tau_out):
        bundles.append(bundle)
        if branches:
            physical.append(decode(memory.h_p, model))
            residual.append(decode(memory.h_r, model))
        if advection:
            fields.append(infer_advection(previous_h_p, model.phycell))
        if i == tau_out - 1:
            break
        nxt = feedback[:, i:i + 1] if feedback is not None else bundle.intensity
        previous_h_p = memory.h_p
        bundle, memory = step(nxt, memory, model)
    return bundles, physical, residual, fields


def forecast(inputs: torch.Tensor, model: PhyDNet, tau_out: Optional[int] = None,
             feedback: Optional[torch.Tensor] = None) -> List[PredictionBundle]:
    """tau_out bundles; each prediction is fed back as the next input unless feedback frames are given."""
    return _rollout(inputs, model, tau_out, feedback)[0]


def decompose_branches(inputs: torch.Tensor, model: PhyDNet, tau_out: Optional[int] = None) -> BranchDecomposition:
    bundles, physical, residual, _ = _rollout(inputs, model, tau_out, None, branches=True)
    return BranchDecomposition(combined=bundles, physical=physical, residual=residual)


def advection_fields(inputs: torch.Tensor, model: PhyDNet, tau_out: Optional[int] = None) -> List[AdvectionField]:
    """The advection field driving each lead time's PhyCell prediction."""
    if model.config.variant != "advdiff":
        raise ConfigError("variant has no advection field")
    return _rollout(inputs, model, tau_out, None, advection=True)[3]


def stack_intensity(bundles: List[PredictionBundle]) -> torch.Tensor:
    """(B, tau_out, H, W) tensor of the predicted intensities."""
    return torch.cat([b.intensity for b in bundles], dim=1)
