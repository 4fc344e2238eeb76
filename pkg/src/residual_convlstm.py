# src/residual_convlstm.py
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .errors import DimensionError

GATE_KERNEL = 3
FORGET_BIAS = 1.0


@dataclass(frozen=True)
class ConvLSTMState:
    """One (hidden, memory) pair per stacked cell."""

    hidden: Tuple[torch.Tensor, ...]
    memory: Tuple[torch.Tensor, ...]

    @property
    def depth(self) -> int:
        return len(self.hidden)


class ConvLSTMCell(nn.Module):
    def __init__(self, input_dim: int, hidden_dim: int, kernel_size: int = GATE_KERNEL):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.conv = nn.Conv2d(input_dim + hidden_dim, 4 * hidden_dim, kernel_size, padding=kernel_size // 2)
        with torch.no_grad():
            self.conv.bias.zero_()
            self.conv.bias[hidden_dim:2 * hidden_dim].fill_(FORGET_BIAS)

    def forward(self, x: torch.Tensor, state: Tuple[torch.Tensor, torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
        h_cur, c_cur = state
        gates = self.conv(torch.cat([x, h_cur], dim=1))
        cc_i, cc_f, cc_o, cc_g = torch.split(gates, self.hidden_dim, dim=1)

        i = torch.sigmoid(cc_i)
        f = torch.sigmoid(cc_f)
        o = torch.sigmoid(cc_o)
        g = torch.tanh(cc_g)

        c_next = f * c_cur + i * g
        h_next = o * torch.tanh(c_next)
        return h_next, c_next


class ResidualConvLSTM(nn.Module):
    """Stacked ConvLSTM cells; the last hidden state, projected to C_h channels, is h_r."""

    def __init__(self, channels: int, widths: Sequence[int] = (128, 128, 64)):
        super().__init__()
        self.channels = channels
        self.widths = tuple(widths)
        dims = (channels,) + self.widths
        self.cells = nn.ModuleList(ConvLSTMCell(dims[n], dims[n + 1]) for n in range(len(self.widths)))
        self.project = nn.Conv2d(self.widths[-1], channels, 1)

    def init_state(self, batch: int, height: int, width: int, dtype: Optional[torch.dtype] = None,
                   device=None) -> ConvLSTMState:
        dtype = dtype or self.project.weight.dtype
        zeros = tuple(torch.zeros(batch, w, height, width, dtype=dtype, device=device) for w in self.widths)
        return ConvLSTMState(hidden=zeros, memory=zeros)

    def forward(self, encoded: torch.Tensor, state: ConvLSTMState) -> Tuple[torch.Tensor, ConvLSTMState]:
        if encoded.dim() != 4 or encoded.shape[1] != self.channels:
            raise DimensionError(
                f"ConvLSTM input must have shape (batch, {self.channels}, H_h, W_h), got {tuple(encoded.shape)}"
            )
        if state.depth != len(self.cells):
            raise DimensionError(f"ConvLSTM state has {state.depth} cells, the stack has {len(self.cells)}")

        x = encoded
        hidden, memory = [], []
        for cell, h, c in zip(self.cells, state.hidden, state.memory):
            x, c = cell(x, (h, c))
            hidden.append(x)
            memory.append(c)
        return self.project(x), ConvLSTMState(hidden=tuple(hidden), memory=tuple(memory))


def convlstm_step(state: ConvLSTMState, encoded: torch.Tensor,
                  module: ResidualConvLSTM) -> Tuple[torch.Tensor, ConvLSTMState]:
    return module(encoded, state)
