"""Translation losses and the frozen feature extractors they rely on."""

from __future__ import annotations

import math
from typing import Protocol

import torch
import torch.nn.functional as F
from torch import nn

from vsanet.core import TrainConfig

STYLE_TAPS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")
CONTENT_TAP = "relu3_3"
PROB_FLOOR = 1e-7


class PerceptualBackbone(Protocol):
    def taps(self, x: torch.Tensor) -> dict[str, torch.Tensor]: ...


class IdentityEmbedder(Protocol):
    def embed(self, x: torch.Tensor) -> torch.Tensor: ...


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class Vgg16Features(nn.Module):
    """VGG-16 convolutional trunk up to relu4_3.

    ``widths`` defaults to the full network; the stand-in used in tests and
    desk-scale training is the same topology with narrow, seeded random
    weights. Real weights can be loaded with :func:`vsanet.checkpoint.load_module`.
    """

    BLOCKS = ((2, "relu1_2"), (2, "relu2_2"), (3, "relu3_3"), (3, "relu4_3"))

    def __init__(self, widths=(64, 128, 256, 512), seed: int | None = None, imagenet_norm: bool = False):
        super().__init__()
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        self.imagenet_norm = imagenet_norm
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        c_in = 3
        self.stages = nn.ModuleList()
        for (n_conv, _), width in zip(self.BLOCKS, widths):
            convs = nn.ModuleList()
            for _ in range(n_conv):
                conv = nn.Conv2d(c_in, width, 3, padding=1)
                if gen is not None:
                    # He-normal keeps activations alive through ten random layers
                    with torch.no_grad():
                        conv.weight.normal_(0.0, math.sqrt(2.0 / (9 * c_in)), generator=gen)
                        conv.bias.zero_()
                convs.append(conv)
                c_in = width
            self.stages.append(convs)
        freeze(self)

    def taps(self, x):
        if self.imagenet_norm:
            x = (x - self.mean) / self.std
        out = {}
        for i, ((_, name), convs) in enumerate(zip(self.BLOCKS, self.stages)):
            if i:
                x = F.max_pool2d(x, 2)
            for conv in convs:
                x = F.relu(conv(x))
            out[name] = x
        return out

    def train(self, mode: bool = True):
        return super().train(False)


def standin_backbone(seed: int = 4321) -> Vgg16Features:
    return Vgg16Features(widths=(8, 16, 32, 64), seed=seed, imagenet_norm=True)


class StandInEmbedder(nn.Module):
    """Frozen seeded conv net mapping images to unit-norm embeddings.

    Features are pooled onto a 4x4 grid so the embedding keeps coarse layout.
    """

    def __init__(self, seed: int = 1234, widths=(16, 32), grid: int = 4):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, widths[0], 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(widths[0], widths[1], 3, stride=2, padding=1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.in_channels * 9
                conv.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                conv.bias.normal_(0.0, 0.1, generator=gen)
        self.grid = grid
        self.dim = widths[1] * grid * grid
        freeze(self)

    def embed(self, x):
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        h = F.adaptive_avg_pool2d(h, self.grid).flatten(1)
        return F.normalize(h, dim=1)

    def forward(self, x):
        return self.embed(x)

    def train(self, mode: bool = True):
        return super().train(False)


def gram(u: torch.Tensor) -> torch.Tensor:
    """Channel Gram matrix normalized by ``C*H*W``; accepts ``[C,H,W]`` or ``[B,C,H,W]``."""
    c, h, w = u.shape[-3:]
    flat = u.reshape(*u.shape[:-3], c, h * w)
    return flat @ flat.transpose(-1, -2) / (c * h * w)


def _per_sample(x: torch.Tensor) -> torch.Tensor:
    return x if x.dim() == 4 else x.unsqueeze(0)


def content_loss(backbone: PerceptualBackbone, y_vis: torch.Tensor, x_nir: torch.Tensor,
                 tap: str = CONTENT_TAP) -> torch.Tensor:
    """Mean squared feature distance at ``tap``, averaged over the batch."""
    y, x = _per_sample(y_vis), _per_sample(x_nir)
    if y.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(x.shape)}")
    fy = backbone.taps(y)[tap]
    fx = backbone.taps(x)[tap]
    return (fy - fx).pow(2).flatten(1).mean(1).mean()


def style_loss(backbone: PerceptualBackbone, x_vis: torch.Tensor, y_vis: torch.Tensor,
               taps=STYLE_TAPS) -> torch.Tensor:
    fx = backbone.taps(_per_sample(x_vis))
    fy = backbone.taps(_per_sample(y_vis))
    total = 0.0
    for name in taps:
        total = total + (gram(fx[name]) - gram(fy[name])).pow(2).sum(dim=(-2, -1))
    return total.mean()


def id_loss(embedder: IdentityEmbedder, x_match: torch.Tensor, y_vis: torch.Tensor) -> torch.Tensor:
    """L1 distance between unit-normalized identity embeddings."""
    e_match = F.normalize(embedder.embed(_per_sample(x_match)), dim=1)
    e_y = F.normalize(embedder.embed(_per_sample(y_vis)), dim=1)
    return (e_match - e_y).abs().sum(1).mean()


def log_prob(logits: torch.Tensor, real: bool) -> torch.Tensor:
    """``log(p)`` (``real``) or ``log(1 - p)`` of the patch-mean probability, clamped to the floor."""
    mean_logit = logits.flatten(1).mean(1) if logits.dim() > 1 else logits
    lp = F.logsigmoid(mean_logit if real else -mean_logit)
    return lp.clamp(math.log(PROB_FLOOR), math.log1p(-PROB_FLOOR))


def adv_losses(d, x_vis: torch.Tensor, y_vis: torch.Tensor):
    """``(L_D, L_G)``. ``y_vis`` is detached for ``L_D``; ``x_vis`` is ignored by ``L_G``."""
    return discriminator_loss(d, x_vis, y_vis), generator_adv_loss(d, y_vis)


def generator_adv_loss(d, y_vis: torch.Tensor) -> torch.Tensor:
    return -log_prob(d(_per_sample(y_vis)), True).mean()


def discriminator_loss(d, x_vis: torch.Tensor, y_vis: torch.Tensor) -> torch.Tensor:
    real = log_prob(d(_per_sample(x_vis)), True)
    fake = log_prob(d(_per_sample(y_vis).detach()), False)
    return -(real + fake).mean()


def total_loss(parts, config: TrainConfig):
    """``content + l_style*style + l_id*id + l_adv*adv`` for ``parts = (content, style, id, adv)``."""
    content, style, ident, adv = parts
    return (content + config.lambda_style * style + config.lambda_id * ident
            + config.lambda_adv * adv)
