"""Dual-encoder UV generator.

Two CNN encoders (identity, expression) each produce a six-level feature
pyramid from their UV-space conditioning maps; a common decoder consumes the
concatenated per-level skips and emits a 59-channel Gaussian parameter map
at the input resolution.  Channel layout of the output map:

    0-2   position offset (tanh, scaled)
    3     opacity logit
    4-7   orientation quaternion (normalized, w >= 0)
    8-10  scale logits (sigmoid into [scale_min, scale_min + scale_range])
    11-58 SH color coefficients, coefficient-major (16 coeffs x RGB)

Pyramid levels are ordered coarse to fine: level 0 is (resolution/64)^2 and
level 5 is (resolution/2)^2.  Normalization is group-style so inference is
batch-independent, which keeps few-shot inversion stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .splat_core import normalize_quat

NUM_LEVELS = 6
PARAM_CHANNELS = 59
IDENTITY_CHANNELS = 4    # RGB texture + validity mask
EXPRESSION_CHANNELS = 6  # position offsets + mouth gradient map


@dataclass
class GeneratorConfig:
    resolution: int = 128
    # Channel widths per pyramid level, coarse to fine.
    channels: tuple = (256, 256, 128, 128, 64, 32)
    head_channels: int = 32      # width of the pre-output block
    pos_range: float = 0.02     # meters; ~2x the head mesh mean edge length
    scale_min: float = 1e-4     # meters
    scale_range: float = 0.05   # meters
    offset_input_gain: float = 100.0  # scales meter-valued offsets to ~unit inputs

    def __post_init__(self):
        if len(self.channels) != NUM_LEVELS:
            raise ValueError(f"need {NUM_LEVELS} channel widths")
        if self.resolution % 64 != 0:
            raise ValueError("resolution must be divisible by 64")

    def level_sizes(self):
        return [self.resolution // (2 ** (NUM_LEVELS - i)) for i in range(NUM_LEVELS)]


@dataclass
class FeaturePyramid:
    """The K=6 multi-resolution skip maps, coarse to fine."""

    levels: list

    def __post_init__(self):
        if len(self.levels) != NUM_LEVELS:
            raise ValueError(f"pyramid needs {NUM_LEVELS} levels, got {len(self.levels)}")
        for lo, hi in zip(self.levels[:-1], self.levels[1:]):
            if hi.shape[-1] != 2 * lo.shape[-1] or hi.shape[-2] != 2 * lo.shape[-2]:
                raise ValueError("pyramid levels must strictly double in size")

    def detach_clone(self, requires_grad=False):
        return FeaturePyramid([
            lvl.detach().clone().requires_grad_(requires_grad)
            for lvl in self.levels
        ])

    def shapes(self):
        return [tuple(lvl.shape) for lvl in self.levels]


def _norm(num_channels):
    groups = 8
    while num_channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, num_channels)


def _down_block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
        _norm(c_out),
        nn.LeakyReLU(0.2, inplace=True),
    )


class _UpBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = _norm(c_out)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        return self.act(self.norm(self.conv(x)))


class PyramidEncoder(nn.Module):
    """Six stride-2 blocks; returns the feature pyramid coarse to fine."""

    def __init__(self, in_channels, config: GeneratorConfig):
        super().__init__()
        widths_fine_to_coarse = list(reversed(config.channels))
        blocks = []
        prev = in_channels
        for width in widths_fine_to_coarse:
            blocks.append(_down_block(prev, width))
            prev = width
        self.blocks = nn.ModuleList(blocks)
        self.in_channels = in_channels
        self.resolution = config.resolution

    def forward(self, x) -> FeaturePyramid:
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ValueError(
                f"encoder expects {self.resolution}x{self.resolution} input, "
                f"got {tuple(x.shape[-2:])}")
        if x.shape[-3] != self.in_channels:
            raise ValueError(
                f"encoder expects {self.in_channels} channels, got {x.shape[-3]}")
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return FeaturePyramid(list(reversed(feats)))


class SkipDecoder(nn.Module):
    """Upsampling blocks consuming concatenated identity+expression skips."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        ch = config.channels
        ups = []
        in_ch = 2 * ch[0]  # concatenated bottleneck features
        for lvl in range(1, NUM_LEVELS):
            ups.append(_UpBlock(in_ch, ch[lvl]))
            in_ch = ch[lvl] + 2 * ch[lvl]  # previous output + both skips
        self.ups = nn.ModuleList(ups)
        self.head = _UpBlock(in_ch, config.head_channels)
        self.final = nn.Conv2d(config.head_channels, PARAM_CHANNELS, 3, padding=1)
        self.config = config

    def forward(self, f_id: FeaturePyramid, f_exp: FeaturePyramid):
        if f_id.shapes() != f_exp.shapes():
            raise ValueError("identity/expression pyramids do not match")
        x = torch.cat([f_id.levels[0], f_exp.levels[0]], dim=1)
        for lvl, up in enumerate(self.ups, start=1):
            x = up(x)
            x = torch.cat([x, f_id.levels[lvl], f_exp.levels[lvl]], dim=1)
        x = self.head(x)
        return self.final(x)


class GaussianMapGenerator(nn.Module):
    """Identity encoder + expression encoder + skip decoder."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config or GeneratorConfig()
        self.encoder_identity = PyramidEncoder(IDENTITY_CHANNELS, self.config)
        self.encoder_expression = PyramidEncoder(EXPRESSION_CHANNELS, self.config)
        self.decoder = SkipDecoder(self.config)

    def encode_identity(self, identity_input) -> FeaturePyramid:
        return self.encoder_identity(identity_input)

    def encode_expression(self, expression_input) -> FeaturePyramid:
        return self.encoder_expression(expression_input)

    def decode(self, f_id, f_exp):
        return self.decoder(f_id, f_exp)

    def forward(self, identity_input, expression_input):
        return self.decode(self.encode_identity(identity_input),
                           self.encode_expression(expression_input))

    def final_layer_parameters(self):
        return list(self.decoder.final.parameters())


@dataclass
class GaussianMapFields:
    """Activated per-texel primitive fields, batch-last-spatial layout."""

    position_offset: torch.Tensor  # [B, H, W, 3]
    opacity: torch.Tensor          # [B, H, W]
    orientation: torch.Tensor      # [B, H, W, 4]
    scale: torch.Tensor            # [B, H, W, 3]
    sh_coeffs: torch.Tensor        # [B, H, W, 16, 3]

    def flatten_valid(self, valid_mask: torch.Tensor, batch_index: int = 0):
        """Fields of the valid texels as flat [N, ...] tensors."""
        flat = valid_mask.reshape(-1)
        idx = torch.nonzero(flat, as_tuple=False).squeeze(-1)
        h, w = valid_mask.shape
        return (
            self.position_offset[batch_index].reshape(h * w, 3)[idx],
            self.opacity[batch_index].reshape(h * w)[idx],
            self.orientation[batch_index].reshape(h * w, 4)[idx],
            self.scale[batch_index].reshape(h * w, 3)[idx],
            self.sh_coeffs[batch_index].reshape(h * w, 16, 3)[idx],
        )


def activate_and_split(raw: torch.Tensor,
                       config: GeneratorConfig) -> GaussianMapFields:
    """Turn the raw 59-channel map into valid primitive fields.

    Works on [B, 59, H, W] or [59, H, W] maps.  Zero raw channels map to:
    zero offset, opacity 0.5, identity orientation (zero-quaternion
    fallback), and scale at the middle of its range.
    """
    squeeze = raw.dim() == 3
    if squeeze:
        raw = raw.unsqueeze(0)
    if raw.shape[1] != PARAM_CHANNELS:
        raise ValueError(f"expected {PARAM_CHANNELS} channels, got {raw.shape[1]}")
    if not torch.isfinite(raw).all():
        raise ValueError("non-finite raw parameter map")

    b, _, h, w = raw.shape
    dx = config.pos_range * torch.tanh(raw[:, 0:3])
    opacity = torch.sigmoid(raw[:, 3])
    quat = normalize_quat(raw[:, 4:8].permute(0, 2, 3, 1))
    scale = config.scale_min + config.scale_range * torch.sigmoid(raw[:, 8:11])
    sh = raw[:, 11:59].permute(0, 2, 3, 1).reshape(b, h, w, 16, 3)

    fields = GaussianMapFields(
        position_offset=dx.permute(0, 2, 3, 1),
        opacity=opacity,
        orientation=quat,
        scale=scale.permute(0, 2, 3, 1),
        sh_coeffs=sh,
    )
    if squeeze:
        fields = GaussianMapFields(
            fields.position_offset[0:1], fields.opacity[0:1],
            fields.orientation[0:1], fields.scale[0:1], fields.sh_coeffs[0:1])
    return fields


def identity_input_from(texture: torch.Tensor, valid: torch.Tensor):
    """[H, W, 3] texture + [H, W] mask -> [4, H, W] encoder input."""
    return torch.cat([
        texture.permute(2, 0, 1),
        valid.to(texture.dtype).unsqueeze(0),
    ], dim=0)


def expression_input_from(expr_offsets: torch.Tensor, mouth_map: torch.Tensor,
                          config: GeneratorConfig):
    """[H, W, 3] offsets (meters) + [H, W, 3] mouth map -> [6, H, W] input."""
    return torch.cat([
        (expr_offsets * config.offset_input_gain).permute(2, 0, 1),
        mouth_map.permute(2, 0, 1),
    ], dim=0).to(torch.float32)
