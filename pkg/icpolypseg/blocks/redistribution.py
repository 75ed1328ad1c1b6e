"""Pixel-wise feature redistribution.

Both blocks reduce the whole (C, H, W) feature volume of a sample to one scalar, the
inner product of the flattened Q and K projections, and use it to rescale the V projection.
PFR works inside one decoder stage; CPFR concatenates a stage's own features with the
upsampled output of the deeper stage first and projects the result back to C channels.
"""
import math
from typing import Optional

import torch
from torch import nn

from ..config import SCALE_MODES
from ..errors import ContractViolation, NonFiniteError
from .rfe import check_feature


def holistic_kernel(q: torch.Tensor, k: torch.Tensor, scale_mode: str = "raw") -> torch.Tensor:
    """(N, C, H, W) x2 -> (N, 1, 1): per-sample dot product of the flattened maps."""
    n = q.shape[0]
    f_h = torch.bmm(q.reshape(n, 1, -1), k.reshape(n, -1, 1))
    if scale_mode == "inv_chw":
        f_h = f_h / q[0].numel()
    finite = torch.isfinite(f_h.reshape(n))
    if not finite.all():
        bad = int((~finite).nonzero()[0])
        raise NonFiniteError(f"holistic kernel is non-finite for batch element {bad}", batch_index=bad)
    return f_h


def allocate(f_h: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    n = v.shape[0]
    return torch.bmm(f_h, v.reshape(n, 1, -1)).reshape(v.shape)


def _projection(channels: int) -> nn.Conv2d:
    return nn.Conv2d(channels, channels, kernel_size=1)


def init_holistic_pair(q_proj: nn.Conv2d, k_proj: nn.Conv2d, spatial: int) -> None:
    """Shrink Q/K so an O(1) input over `spatial` pixels gives |F_H| = O(1).

    F_H sums C*H*W products that add up coherently over the pixels, so each weight gets
    variance 1 / (spatial * C^1.5) and both biases start at zero.
    """
    c = q_proj.in_channels
    bound = math.sqrt(3.0 / (spatial * c ** 1.5))
    for proj in (q_proj, k_proj):
        nn.init.uniform_(proj.weight, -bound, bound)
        nn.init.zeros_(proj.bias)


class PFR(nn.Module):
    """`spatial` is the H*W this block sees at the model's input size; raw mode needs it
    to size the Q/K init. Without it the projections keep torch's fan-in default."""

    def __init__(self, channels: int, scale_mode: str = "raw", spatial: Optional[int] = None):
        super().__init__()
        if scale_mode not in SCALE_MODES:
            raise ContractViolation(f"scale_mode must be one of {SCALE_MODES}, got {scale_mode!r}")
        self.channels = channels
        self.scale_mode = scale_mode
        self.q_proj = _projection(channels)
        self.k_proj = _projection(channels)
        self.v_proj = _projection(channels)
        if scale_mode == "raw" and spatial:
            init_holistic_pair(self.q_proj, self.k_proj, spatial)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_feature(x, self.channels, "pfr")
        f_h = holistic_kernel(self.q_proj(x), self.k_proj(x), self.scale_mode)
        return allocate(f_h, self.v_proj(x))

    def matmul_macs(self, x: torch.Tensor) -> int:
        # F_H dot product + allocation, each C*H*W multiply-adds per sample
        return 2 * x[0].numel() * x.shape[0]


class CPFR(nn.Module):
    def __init__(self, channels: int, scale_mode: str = "raw", spatial: Optional[int] = None):
        super().__init__()
        if scale_mode not in SCALE_MODES:
            raise ContractViolation(f"scale_mode must be one of {SCALE_MODES}, got {scale_mode!r}")
        self.channels = channels
        self.scale_mode = scale_mode
        self.q_proj = _projection(2 * channels)
        self.k_proj = _projection(2 * channels)
        self.v_proj = _projection(2 * channels)
        self.out_proj = nn.Conv2d(2 * channels, channels, kernel_size=1)
        if scale_mode == "raw" and spatial:
            init_holistic_pair(self.q_proj, self.k_proj, spatial)

    def forward(self, low: torch.Tensor, high: torch.Tensor) -> torch.Tensor:
        if low.shape != high.shape:
            raise ContractViolation(
                f"cpfr: low {tuple(low.shape)} and high {tuple(high.shape)} must share one shape"
            )
        check_feature(low, self.channels, "cpfr.low")
        check_feature(high, self.channels, "cpfr.high")
        g = torch.cat([low, high], dim=1)
        f_hol = holistic_kernel(self.q_proj(g), self.k_proj(g), self.scale_mode)
        return self.out_proj(allocate(f_hol, self.v_proj(g)))

    def matmul_macs(self, low: torch.Tensor, high: torch.Tensor = None) -> int:
        return 2 * 2 * low[0].numel() * low.shape[0]


def pfr_forward(block: PFR, x: torch.Tensor) -> torch.Tensor:
    return block(x)


def cpfr_forward(block: CPFR, low: torch.Tensor, high: torch.Tensor) -> torch.Tensor:
    return block(low, high)
