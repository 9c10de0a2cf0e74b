"""Spectral variational autoencoder: VIS image <-> spectral latent, plus style taps."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from vsanet.blocks import ConvNormAct, init_gaussian, upsample
from vsanet.core import LOG_VAR_CLAMP, DimensionError, TrainConfig, as_batch, check_finite

ENCODER_WIDTHS = (32, 64, 128, 256, 512, 512)
GENERATOR_WIDTHS = (512, 256, 128, 64, 32)


@dataclass
class LatentStats:
    mean: torch.Tensor
    log_var: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


class Encoder(nn.Module):
    """Conv/pool stack ending in one FC layer that emits mean and log-variance."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        w = [config.width(c) for c in ENCODER_WIDTHS]
        slope, eps = config.leaky_slope, config.eps_norm
        self.image_size = config.image_size
        self.latent_dim = config.latent_dim
        c_in = 3
        for i, c in enumerate(w, start=1):
            setattr(self, f"conv{i}", ConvNormAct(c_in, c, slope, eps))
            c_in = c
        self.pool = nn.MaxPool2d(2, 2)
        side = config.image_size // 32
        self.fc = nn.Linear(w[-1] * side * side, 2 * config.latent_dim)

    def forward(self, x, taps=None):
        if x.shape[-3:] != (3, self.image_size, self.image_size):
            raise DimensionError(
                f"encoder expects [3, {self.image_size}, {self.image_size}], got {tuple(x.shape[-3:])}"
            )
        for i in range(1, 7):
            x = getattr(self, f"conv{i}")(x)
            if taps is not None:
                taps[f"conv{i}"] = x
            if i < 6:
                x = self.pool(x)
                if taps is not None:
                    taps[f"pool{i}"] = x
        out = self.fc(x.flatten(1))
        mean, log_var = out.chunk(2, dim=1)
        return mean, log_var.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)


class Generator(nn.Module):
    """FC seed map, then five upsample+conv stages; taps F3 and F4 feed the attention blocks."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        w = [config.width(c) for c in GENERATOR_WIDTHS]
        slope, eps = config.leaky_slope, config.eps_norm
        self.seed_side = config.image_size // 32
        self.seed_channels = w[0]
        self.mode = config.upsample_mode
        self.fc = nn.Linear(config.latent_dim, w[0] * self.seed_side**2)
        self.conv2 = ConvNormAct(w[0], w[0], slope, eps)
        self.conv3 = ConvNormAct(w[0], w[1], slope, eps)
        self.conv4 = ConvNormAct(w[1], w[2], slope, eps)
        self.conv5 = ConvNormAct(w[2], w[3], slope, eps)
        self.conv6 = ConvNormAct(w[3], w[4], slope, eps)
        # plain conv into the sigmoid: normalizing the RGB output would erase per-channel color
        self.to_rgb = nn.Conv2d(w[4], 3, 3, padding=1)

    def forward(self, z, taps=None):
        f = self.fc(z).view(-1, self.seed_channels, self.seed_side, self.seed_side)
        record = taps if taps is not None else {}
        record["fc"] = f
        f = upsample(f, self.mode)
        record["up1"] = f
        f = self.conv2(f)
        record["conv2"] = f
        f = upsample(f, self.mode)
        record["up2"] = f
        tap3 = self.conv3(f)
        record["conv3"] = tap3
        f = upsample(tap3, self.mode)
        record["up3"] = f
        tap4 = self.conv4(f)
        record["conv4"] = tap4
        f = upsample(tap4, self.mode)
        record["up4"] = f
        f = self.conv5(f)
        record["conv5"] = f
        f = upsample(f, self.mode)
        record["up5"] = f
        f = self.conv6(f)
        record["conv6"] = f
        f = self.to_rgb(f)
        record["to_rgb"] = f
        x_hat = torch.sigmoid(f)
        record["sigmoid"] = x_hat
        return x_hat, tap3, tap4


class SvaeModel(nn.Module):
    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        self.latent_dim = config.latent_dim
        self.encoder = Encoder(config)
        self.generator = Generator(config)
        init_gaussian(self)

    def forward(self, x, noise):
        stats = encode(self, x)
        z = reparameterize(stats, noise)
        x_hat, _, _ = decode(self, z)
        return x_hat, stats


def encode(model: SvaeModel, x: torch.Tensor) -> LatentStats:
    """Posterior parameters for one image ``[3, S, S]`` or a batch ``[B, 3, S, S]``."""
    check_finite("image", x)
    xb, single = as_batch(x)
    mean, log_var = model.encoder(xb)
    if single:
        mean, log_var = mean[0], log_var[0]
    return LatentStats(mean, log_var)


def reparameterize(stats: LatentStats, noise: torch.Tensor) -> torch.Tensor:
    check_finite("noise", noise)
    return stats.mean + noise * torch.exp(0.5 * stats.log_var)


def decode(model: SvaeModel, z: torch.Tensor):
    """Return ``(reconstruction, F3, F4)``; unbatched ``z`` gives unbatched outputs."""
    check_finite("latent", z)
    if z.shape[-1] != model.latent_dim:
        raise DimensionError(f"latent length {z.shape[-1]} != {model.latent_dim}")
    single = z.dim() == 1
    x_hat, tap3, tap4 = model.generator(z.unsqueeze(0) if single else z)
    if single:
        return x_hat[0], tap3[0], tap4[0]
    return x_hat, tap3, tap4


def kl_divergence(stats: LatentStats) -> torch.Tensor:
    """Closed-form KL(N(mean, var) || N(0, I)), summed over the last axis."""
    mean, log_var = stats.mean, stats.log_var
    return 0.5 * (mean.pow(2) + log_var.exp() - log_var - 1.0).sum(-1)


def svae_loss(x: torch.Tensor, x_hat: torch.Tensor, stats: LatentStats):
    """Negative ELBO as ``(total, rec, kl)``.

    ``rec`` is half the summed squared error per image. Batched inputs give
    batch means of the per-image sums.
    """
    if x.shape != x_hat.shape:
        raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    xb, single = as_batch(x)
    rec = 0.5 * (xb - x_hat.reshape(xb.shape)).pow(2).flatten(1).sum(1)
    kl = kl_divergence(stats).reshape(-1)
    if single:
        rec, kl = rec[0], kl[0]
    else:
        rec, kl = rec.mean(), kl.mean()
    return rec + kl, rec, kl


def sample_prior(latent_dim: int, generator: torch.Generator | None = None, n: int | None = None,
                 dtype=torch.float32) -> torch.Tensor:
    shape = (latent_dim,) if n is None else (n, latent_dim)
    return torch.randn(shape, generator=generator, dtype=dtype)
