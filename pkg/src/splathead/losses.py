"""Training and inversion objectives.

The photometric loss is an L1 + perceptual + (1 - SSIM) blend; primitives are
regularized toward zero offset and neutral scale; the adversarial term uses a
multi-head discriminator over a frozen feature pyramid.  Feature backbones
(perceptual and discriminator) are injection points: the default is a
fixed randomly-initialized conv pyramid so the package needs no pretrained
downloads, and any ``nn.Module`` returning a list of feature maps can be
plugged in instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .generator import GaussianMapFields, GeneratorConfig


@dataclass
class LossWeights:
    position_reg: float = 1.0
    scale_reg: float = 0.1
    l1: float = 5.0
    perceptual: float = 0.1
    ssim: float = 0.2
    adversarial: float = 0.01
    decode_anchor: float = 5.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


# ---------------------------------------------------------------------------
# SSIM

def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords * coords) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter2d(x: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    """Separable Gaussian filtering with replicate padding, [B, C, H, W]."""
    c = x.shape[1]
    pad = window.shape[0] // 2
    kx = window.reshape(1, 1, 1, -1).repeat(c, 1, 1, 1)
    ky = window.reshape(1, 1, -1, 1).repeat(c, 1, 1, 1)
    x = F.pad(x, (pad, pad, 0, 0), mode="replicate")
    x = F.conv2d(x, kx, groups=c)
    x = F.pad(x, (0, 0, pad, pad), mode="replicate")
    return F.conv2d(x, ky, groups=c)


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = 11,
         sigma: float = 1.5, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2):
    """Mean SSIM between images in [0, 1]; accepts [H, W, C] or [B, H, W, C].

    Uses an 11x11 Gaussian window (sigma 1.5) with replicate padding, so
    constant image pairs follow the zero-variance closed form exactly.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)
    x = a.permute(0, 3, 1, 2)
    y = b.permute(0, 3, 1, 2)
    window = _gaussian_window(window_size, sigma, x.dtype)

    mu_x = _filter2d(x, window)
    mu_y = _filter2d(y, window)
    sigma_x = _filter2d(x * x, window) - mu_x * mu_x
    sigma_y = _filter2d(y * y, window) - mu_y * mu_y
    sigma_xy = _filter2d(x * y, window) - mu_x * mu_y

    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    return (num / den).mean()


# ---------------------------------------------------------------------------
# Feature backbones

class RandomPyramidFeatures(nn.Module):
    """Fixed randomly-initialized conv pyramid used as a feature backbone.

    Weights are drawn from a dedicated seeded RNG and frozen, so results are
    reproducible without downloading pretrained networks.
    """

    def __init__(self, seed: int = 701, channels=(16, 32, 64, 96, 128),
                 in_channels: int = 3):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = in_channels
        for width in channels:
            conv = nn.Conv2d(prev, width, 3, stride=2, padding=1)
            with torch.no_grad():
                weight = torch.randn(conv.weight.shape, generator=gen)
                conv.weight.copy_(weight * math.sqrt(2.0 / (prev * 9)))
                conv.bias.zero_()
            layers.append(conv)
            prev = width
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, images: torch.Tensor):
        """[B, H, W, 3] images -> list of feature maps, fine to coarse."""
        x = images.permute(0, 3, 1, 2)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


def perceptual_distance(a: torch.Tensor, b: torch.Tensor,
                        extractor: nn.Module) -> torch.Tensor:
    """Mean per-level L1 distance between extracted feature maps."""
    fa = extractor(a)
    fb = extractor(b)
    dist = torch.zeros((), dtype=a.dtype)
    for xa, xb in zip(fa, fb):
        dist = dist + (xa - xb).abs().mean()
    return dist / len(fa)


# ---------------------------------------------------------------------------
# Photometric and regularizer terms

def photometric_loss(render: torch.Tensor, target: torch.Tensor,
                     weights: LossWeights, extractor: nn.Module):
    """Weighted L1 + perceptual + (1 - SSIM); returns (total, components).

    Components are logged unweighted.  Accepts [H, W, 3] or [B, H, W, 3].
    """
    if render.shape != target.shape:
        raise ValueError(
            f"render/target shape mismatch: {tuple(render.shape)} vs "
            f"{tuple(target.shape)}")
    if render.dim() == 3:
        render = render.unsqueeze(0)
        target = target.unsqueeze(0)
    l1 = (render - target).abs().mean()
    perc = perceptual_distance(render, target, extractor)
    ssim_term = 1.0 - ssim(render, target)
    total = weights.l1 * l1 + weights.perceptual * perc + weights.ssim * ssim_term
    return total, {"l1": l1, "perceptual": perc, "ssim": ssim_term}


def primitive_regularizers(fields: GaussianMapFields, config: GeneratorConfig):
    """L1 penalties on position offsets and on deviation from neutral scale."""
    pos = fields.position_offset.abs().mean()
    neutral = config.scale_min + 0.5 * config.scale_range
    scal = (fields.scale - neutral).abs().mean()
    return pos, scal


# ---------------------------------------------------------------------------
# Adversarial term

class MultiHeadDiscriminator(nn.Module):
    """Five classification heads over the levels of a frozen feature pyramid."""

    def __init__(self, extractor: nn.Module | None = None,
                 feature_channels=(16, 32, 64, 96, 128), head_width: int = 32):
        super().__init__()
        self.extractor = extractor or RandomPyramidFeatures(
            seed=811, channels=feature_channels)
        heads = []
        for width in feature_channels:
            heads.append(nn.Sequential(
                nn.Conv2d(width, head_width, 3, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(head_width, 1, 1),
            ))
        self.heads = nn.ModuleList(heads)

    def forward(self, images: torch.Tensor):
        """[B, H, W, 3] -> list of per-head logits maps."""
        feats = self.extractor(images)
        return [head(f) for head, f in zip(self.heads, feats)]

    def head_parameters(self):
        return [p for head in self.heads for p in head.parameters()]


def adversarial_losses(real: torch.Tensor, fake: torch.Tensor,
                       discriminator: MultiHeadDiscriminator):
    """Non-saturating GAN losses summed over heads.

    Returns (generator_loss, discriminator_loss).  Per head, the
    discriminator loss averages its real and fake terms, so a discriminator
    emitting zero logits scores log(2) per head on both sides.
    """
    logits_fake = discriminator(fake)
    gen_loss = sum(F.softplus(-lg).mean() for lg in logits_fake)

    logits_real = discriminator(real.detach())
    logits_fake_d = discriminator(fake.detach())
    disc_loss = sum(
        0.5 * (F.softplus(-lr).mean() + F.softplus(lf).mean())
        for lr, lf in zip(logits_real, logits_fake_d))
    return gen_loss, disc_loss


# ---------------------------------------------------------------------------
# Full objectives

def training_objective(render, target, fields: GaussianMapFields,
                       gen_config: GeneratorConfig, weights: LossWeights,
                       extractor: nn.Module, gan_generator_loss=None):
    """Photometric + weighted regularizers (+ adversarial); (total, components)."""
    photo, comps = photometric_loss(render, target, weights, extractor)
    pos, scal = primitive_regularizers(fields, gen_config)
    total = photo + weights.position_reg * pos + weights.scale_reg * scal
    comps = dict(comps, photometric=photo, position_reg=pos, scale_reg=scal)
    if gan_generator_loss is not None:
        total = total + weights.adversarial * gan_generator_loss
        comps["adversarial"] = gan_generator_loss
    comps["total"] = total
    return total, comps


def inversion_objective(render, target, fields: GaussianMapFields,
                        gen_config: GeneratorConfig, weights: LossWeights,
                        extractor: nn.Module, current_raw: torch.Tensor,
                        anchor_raw: torch.Tensor):
    """Few-shot inversion loss: photometric + regularizers + decode anchor.

    ``anchor_raw`` is the decoder output under the frozen initial identity
    features (precomputed, constant); the anchor term pulls the optimized
    decode back toward it with a mean L1.
    """
    photo, comps = photometric_loss(render, target, weights, extractor)
    pos, scal = primitive_regularizers(fields, gen_config)
    anchor = (current_raw - anchor_raw.detach()).abs().mean()
    total = (photo + weights.position_reg * pos + weights.scale_reg * scal
             + weights.decode_anchor * anchor)
    comps = dict(comps, photometric=photo, position_reg=pos, scale_reg=scal,
                 decode_anchor=anchor, total=total)
    return total, comps
