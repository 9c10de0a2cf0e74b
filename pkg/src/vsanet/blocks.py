"""Small building blocks shared by the networks."""

from __future__ import annotations

from collections import OrderedDict

import torch
import torch.nn.functional as F
from torch import nn


def instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    # a 1x1 map normalizes to exactly zero and would sever the path; pass it through
    if x.shape[-1] * x.shape[-2] == 1:
        return x
    return F.instance_norm(x, eps=eps)


class InstanceNorm(nn.Module):
    """Affine-free instance norm that leaves 1x1 maps untouched."""

    def __init__(self, eps: float = 1e-5):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        return instance_norm(x, self.eps)


class ConvNormAct(nn.Sequential):
    """3x3 convolution, optional instance norm, LeakyReLU.

    The convolution has no bias when a norm follows, since the norm cancels it.
    """

    def __init__(self, c_in, c_out, slope=0.2, eps=1e-5, norm=True, kernel=3, stride=1, padding=1):
        conv = nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=padding, bias=not norm)
        layers = OrderedDict(conv=conv)
        if norm:
            layers["norm"] = InstanceNorm(eps)
        layers["act"] = nn.LeakyReLU(slope)
        super().__init__(layers)


def upsample(x: torch.Tensor, mode: str = "nearest", size=None) -> torch.Tensor:
    if size is None:
        size = (x.shape[-2] * 2, x.shape[-1] * 2)
    if mode == "bilinear":
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return F.interpolate(x, size=size, mode="nearest")


def init_gaussian(module: nn.Module, std: float = 0.02) -> None:
    """Zero-mean Gaussian init for convolution weights; zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
