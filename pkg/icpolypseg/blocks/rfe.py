from typing import Tuple

import torch
from torch import nn

from ..config import RFEConfig
from ..errors import ContractViolation, NonFiniteError


def check_feature(x: torch.Tensor, channels: int, where: str) -> None:
    if x.dim() != 4:
        raise ContractViolation(f"{where}: expected (N, C, H, W), got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ContractViolation(f"{where}: expected {channels} channels, got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{where}: non-finite input", stage=where)


class ConvUnit(nn.Module):
    """Conv with 'same' zero padding, optionally followed by BatchNorm + ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel: Tuple[int, int], use_norm_act: bool = True):
        super().__init__()
        kh, kw = kernel
        self.conv = nn.Conv2d(
            in_channels, out_channels, (kh, kw),
            padding=((kh - 1) // 2, (kw - 1) // 2),
            bias=not use_norm_act,
        )
        self.bn = nn.BatchNorm2d(out_channels) if use_norm_act else None
        self.act = nn.ReLU(inplace=True) if use_norm_act else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv(x)
        if self.bn is not None:
            x = self.act(self.bn(x))
        return x


class RFE(nn.Module):
    """Receptive field expanding block.

    Branch 1 is a 1x1 conv; branch j > 1 is 1x1 -> 1xj -> jx1. The branch outputs are
    concatenated on channels and reduced back to `out_channels` by a final 1x1 conv.
    """

    def __init__(self, cfg: RFEConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.out_channels
        na = cfg.use_norm_act
        branches = []
        for k in cfg.branch_kernels:
            layers = [ConvUnit(cfg.in_channels, c, (1, 1), na)]
            if k > 1:
                layers.append(ConvUnit(c, c, (1, k), na))
                layers.append(ConvUnit(c, c, (k, 1), na))
            branches.append(nn.Sequential(*layers))
        self.branches = nn.ModuleList(branches)
        self.reduce = ConvUnit(c * len(cfg.branch_kernels), c, (1, 1), na)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_feature(x, self.cfg.in_channels, "rfe")
        return self.reduce(torch.cat([b(x) for b in self.branches], dim=1))


def rfe_forward(block: RFE, x: torch.Tensor) -> torch.Tensor:
    return block(x)
