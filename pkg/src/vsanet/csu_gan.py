"""Cross-spectral UNet with four attention injection points, and the patch discriminator."""

from __future__ import annotations

from collections import OrderedDict

import torch
from torch import nn

from vsanet.blocks import ConvNormAct, init_gaussian, upsample
from vsanet.core import DimensionError, TrainConfig, as_batch, check_finite
from vsanet.sca import ScaBlock

ENCODER_WIDTHS = (64, 128, 256, 512, 512)


class CBlock(nn.Sequential):
    """Two 3x3 convolutions, each followed by instance norm and LeakyReLU."""

    def __init__(self, c_in, c_out, slope=0.2, eps=1e-5):
        super().__init__(OrderedDict(
            conv1=ConvNormAct(c_in, c_out, slope, eps),
            conv2=ConvNormAct(c_out, c_out, slope, eps),
        ))


class CsuModel(nn.Module):
    """NIR -> VIS UNet. Style taps F3 (S/8) and F4 (S/4) from the SVAE generator
    condition the blocks at 1/4 and 1/8 resolution.
    """

    def __init__(self, config: TrainConfig):
        super().__init__()
        c1, c2, c3, c4, c5 = (config.width(c) for c in ENCODER_WIDTHS)
        tap3, tap4 = config.width(256), config.width(128)
        slope, eps = config.leaky_slope, config.eps_norm
        self.mode = config.upsample_mode
        self.image_size = config.image_size
        self.enc1 = CBlock(3, c1, slope, eps)
        self.enc2 = CBlock(c1, c2, slope, eps)
        self.enc3 = CBlock(c2, c3, slope, eps)
        self.enc4 = CBlock(c3, c4, slope, eps)
        self.bottleneck = CBlock(c4, c5, slope, eps)
        self.dec6 = CBlock(c5 + c4, c3, slope, eps)
        self.dec7 = CBlock(c3 + c3, c2, slope, eps)
        self.dec8 = CBlock(c2 + c2, c1, slope, eps)
        self.dec9 = CBlock(c1 + c1, c1, slope, eps)
        self.to_rgb = nn.Conv2d(c1, 3, 3, padding=1)
        self.pool = nn.MaxPool2d(2, 2)
        init_gaussian(self)
        hidden = config.width(512)
        kw = dict(latent_dim=config.latent_dim, mlp_hidden=hidden, gamma_init=config.sca_gamma_init,
                  slope=slope, eps=config.eps_norm)
        # (NIR channels, VIS tap channels) in injection order
        self.sca = nn.ModuleList([
            ScaBlock(c3, tap3, **kw),
            ScaBlock(c4, tap4, **kw),
            ScaBlock(c3, tap4, **kw),
            ScaBlock(c2, tap3, **kw),
        ])
        for block in self.sca:
            init_gaussian(block)

    def forward(self, x_nir, z, tap3, tap4, use_sca=True, taps=None):
        rec = taps if taps is not None else {}

        def fuse(j, feat, tap):
            if not use_sca:
                return feat
            return self.sca[j](feat, tap, z)

        f1 = self.enc1(x_nir)
        rec["enc1"] = f1
        f2 = self.pool(f1)
        rec["pool1"] = f2
        f2 = self.enc2(f2)
        rec["enc2"] = f2
        f3 = self.pool(f2)
        rec["pool2"] = f3
        f3 = self.enc3(f3)
        rec["enc3"] = f3
        fuse3 = fuse(0, f3, tap3)
        rec["sca1"] = fuse3
        f4 = self.pool(fuse3)
        rec["pool3"] = f4
        f4 = self.enc4(f4)
        rec["enc4"] = f4
        fuse4 = fuse(1, f4, tap4)
        rec["sca2"] = fuse4
        f5 = self.pool(fuse4)
        rec["pool4"] = f5
        f5 = self.bottleneck(f5)
        rec["bottleneck"] = f5
        f5 = upsample(f5, self.mode)
        rec["up5"] = f5
        f6 = torch.cat([f5, f4], dim=1)
        rec["cat6"] = f6
        f6 = self.dec6(f6)
        rec["dec6"] = f6
        fuse6 = fuse(2, f6, tap4)
        rec["sca3"] = fuse6
        f = upsample(fuse6, self.mode)
        rec["up6"] = f
        f7 = torch.cat([f, f3], dim=1)
        rec["cat7"] = f7
        f7 = self.dec7(f7)
        rec["dec7"] = f7
        fuse7 = fuse(3, f7, tap3)
        rec["sca4"] = fuse7
        f = upsample(fuse7, self.mode)
        rec["up7"] = f
        f8 = torch.cat([f, f2], dim=1)
        rec["cat8"] = f8
        f8 = self.dec8(f8)
        rec["dec8"] = f8
        f = upsample(f8, self.mode)
        rec["up8"] = f
        f9 = torch.cat([f, f1], dim=1)
        rec["cat9"] = f9
        f9 = self.dec9(f9)
        rec["dec9"] = f9
        out = self.to_rgb(f9)
        rec["to_rgb"] = out
        y = torch.sigmoid(out)
        rec["sigmoid"] = y
        return y

    def set_gamma(self, value: float) -> None:
        with torch.no_grad():
            for block in self.sca:
                block.gamma.fill_(value)


def csu_forward(model: CsuModel, x_nir, z, tap3, tap4, use_sca: bool = True):
    """Translate NIR images; single images and batches are both accepted."""
    check_finite("NIR image", x_nir)
    xb, single = as_batch(x_nir)
    if xb.shape[1] != 3:
        raise DimensionError(f"expected 3-channel input, got {xb.shape[1]}")
    if xb.shape[-1] % 16 or xb.shape[-2] % 16:
        raise DimensionError(f"spatial size must be a multiple of 16, got {tuple(xb.shape[-2:])}")
    zb = z.unsqueeze(0) if z.dim() == 1 else z
    t3 = tap3.unsqueeze(0) if tap3.dim() == 3 else tap3
    t4 = tap4.unsqueeze(0) if tap4.dim() == 3 else tap4
    y = model(xb, zb, t3, t4, use_sca=use_sca)
    return y[0] if single else y


class Discriminator(nn.Module):
    """Four stride-2 4x4 convolutions producing a patch logit map at 1/16 resolution."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        w1, w2, w3 = (config.width(c) for c in (64, 128, 256))
        slope, eps = config.leaky_slope, config.eps_norm
        self.conv1 = ConvNormAct(3, w1, slope, eps, norm=False, kernel=4, stride=2, padding=1)
        self.conv2 = ConvNormAct(w1, w2, slope, eps, kernel=4, stride=2, padding=1)
        self.conv3 = ConvNormAct(w2, w3, slope, eps, kernel=4, stride=2, padding=1)
        self.conv4 = nn.Conv2d(w3, 1, 4, stride=2, padding=1)
        init_gaussian(self)

    def forward(self, x, taps=None):
        rec = taps if taps is not None else {}
        for name in ("conv1", "conv2", "conv3", "conv4"):
            x = getattr(self, name)(x)
            rec[name] = x
        return x


def discriminate(d: Discriminator, img: torch.Tensor) -> torch.Tensor:
    """Raw patch logits ``[1, S/16, S/16]`` (batched input gives ``[B, 1, S/16, S/16]``)."""
    check_finite("image", img)
    xb, single = as_batch(img)
    if xb.shape[1] != 3 or xb.shape[-1] != xb.shape[-2] or xb.shape[-1] % 16:
        raise DimensionError(f"expected [3, S, S] with S a multiple of 16, got {tuple(xb.shape[1:])}")
    out = d(xb)
    return out[0] if single else out


__all__ = ["CBlock", "CsuModel", "Discriminator", "csu_forward", "discriminate"]
