"""Spectral conditional attention: AdaIN modulation by the spectral latent,
attention from NIR query positions over exemplar key positions, and a gated
residual back onto the NIR stream.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from vsanet.core import DimensionError, check_finite


class ModulationMLP(nn.Module):
    """Seven hidden layers plus an output layer with per-stream (scale, bias) heads."""

    def __init__(self, latent_dim: int, nir_channels: int, vis_channels: int,
                 hidden: int = 512, depth: int = 8, slope: float = 0.2):
        super().__init__()
        layers = []
        c_in = latent_dim
        for _ in range(depth - 1):
            layers += [nn.Linear(c_in, hidden), nn.LeakyReLU(slope)]
            c_in = hidden
        self.layers = nn.Sequential(*layers)
        self.nir_head = nn.Linear(hidden, 2 * nir_channels)
        self.vis_head = nn.Linear(hidden, 2 * vis_channels)

    def forward(self, z: torch.Tensor, head: str):
        h = self.layers(z)
        if head == "nir":
            out = self.nir_head(h)
        elif head == "vis":
            out = self.vis_head(h)
        else:
            raise ValueError(f"head must be 'vis' or 'nir', got {head!r}")
        raw_scale, bias = out.chunk(2, dim=-1)
        # offset so a zero head output means unit scale
        return 1.0 + raw_scale, bias


class ScaBlock(nn.Module):
    def __init__(self, channels: int, vis_channels: int, latent_dim: int, mlp_hidden: int = 512,
                 gamma_init: float = 0.0, slope: float = 0.2, eps: float = 1e-5):
        super().__init__()
        inner = max(1, channels // 8)
        self.channels = channels
        self.vis_channels = vis_channels
        self.eps = eps
        self.m = ModulationMLP(latent_dim, channels, vis_channels, mlp_hidden, slope=slope)
        # a bias on f shifts every logit in a column equally and the softmax drops it
        self.f = nn.Conv2d(vis_channels, inner, 1, bias=False)
        self.g = nn.Conv2d(channels, inner, 1)
        self.h = nn.Conv2d(channels, channels, 1)
        self.gamma = nn.Parameter(torch.tensor(float(gamma_init)))

    def forward(self, f_nir, f_vis, z):
        return sca_fuse(f_nir, f_vis, z, self, check=False)


def adaptive_instance_norm(feat: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor,
                           eps: float = 1e-5) -> torch.Tensor:
    """Renormalize each channel of ``feat`` [B, C, H, W] to mean ``bias`` and std ``|scale|``.

    The per-channel std is floored at ``eps`` so constant channels map to ``bias``.
    """
    mean = feat.mean(dim=(-2, -1), keepdim=True)
    std = feat.var(dim=(-2, -1), keepdim=True, unbiased=False).sqrt().clamp_min(eps)
    return scale[..., None, None] * (feat - mean) / std + bias[..., None, None]


def _batched(x, ndim):
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    return x, False


def adain(feat: torch.Tensor, z: torch.Tensor, block: ScaBlock, head: str) -> torch.Tensor:
    feat_b, single = _batched(feat, 4)
    z_b, _ = _batched(z, 2)
    scale, bias = block.m(z_b, head)
    if scale.shape[-1] != feat_b.shape[1]:
        raise DimensionError(f"{head} head emits {scale.shape[-1]} channels, feature has {feat_b.shape[1]}")
    out = adaptive_instance_norm(feat_b, scale, bias, block.eps)
    return out[0] if single else out


def match_spatial(tap: torch.Tensor, size) -> torch.Tensor:
    """Average-pool a larger tap or nearest-upsample a smaller one to ``size``."""
    h, w = tap.shape[-2:]
    if (h, w) == tuple(size):
        return tap
    if h >= size[0] and w >= size[1]:
        if h % size[0] or w % size[1]:
            raise DimensionError(f"cannot pool {h}x{w} evenly to {tuple(size)}")
        return F.avg_pool2d(tap, (h // size[0], w // size[1]))
    if h <= size[0] and w <= size[1]:
        return F.interpolate(tap, size=tuple(size), mode="nearest")
    raise DimensionError(f"cannot adapt tap {h}x{w} to {tuple(size)}")


def attention_logits(q_vis: torch.Tensor, k_nir: torch.Tensor) -> torch.Tensor:
    """``[B, N_vis, N_nir]`` logits from projected features ``[B, C', H, W]``."""
    b = q_vis.shape[0]
    fv = q_vis.reshape(b, q_vis.shape[1], -1)
    gn = k_nir.reshape(b, k_nir.shape[1], -1)
    return torch.bmm(fv.transpose(1, 2), gn)


def conditional_attention(fv: torch.Tensor, fn: torch.Tensor, block: ScaBlock) -> torch.Tensor:
    """Attention map ``[B, HW, HW]`` (or ``[HW, HW]`` unbatched).

    Rows index exemplar (VIS) positions, columns index NIR positions; every
    column sums to one.
    """
    fv_b, single = _batched(fv, 4)
    fn_b, _ = _batched(fn, 4)
    if fv_b.shape[-2:] != fn_b.shape[-2:]:
        raise DimensionError(f"spatial mismatch {tuple(fv_b.shape[-2:])} vs {tuple(fn_b.shape[-2:])}")
    att = torch.softmax(attention_logits(block.f(fv_b), block.g(fn_b)), dim=1)
    return att[0] if single else att


def sca_fuse(f_nir: torch.Tensor, f_vis: torch.Tensor, z: torch.Tensor, block: ScaBlock,
             return_attention: bool = False, check: bool = True):
    """``f_nir + gamma * h(AdaIN(f_nir)) @ Att``; equals ``f_nir`` exactly when gamma is zero."""
    if check:
        check_finite("NIR feature", f_nir)
        check_finite("VIS feature", f_vis)
        check_finite("latent", z)
    nir, single = _batched(f_nir, 4)
    vis, _ = _batched(f_vis, 4)
    zb, _ = _batched(z, 2)
    if nir.shape[1] != block.channels:
        raise DimensionError(f"NIR feature has {nir.shape[1]} channels, block expects {block.channels}")
    if vis.shape[1] != block.vis_channels:
        raise DimensionError(f"VIS tap has {vis.shape[1]} channels, block expects {block.vis_channels}")
    vis = match_spatial(vis, nir.shape[-2:])
    nir_mod = adain(nir, zb, block, "nir")
    vis_mod = adain(vis, zb, block, "vis")
    att = conditional_attention(vis_mod, nir_mod, block)
    b, c, hh, ww = nir.shape
    value = block.h(nir_mod).reshape(b, c, hh * ww)
    out = nir + block.gamma * torch.bmm(value, att).reshape(b, c, hh, ww)
    if single:
        out, att = out[0], att[0]
    return (out, att) if return_attention else out
