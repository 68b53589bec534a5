"""The stage-1 segmentation UNet and the stage-2 coupled specialist networks.

Stage 1 maps a single-channel image to four sigmoid maps (background,
LV, RV, MYO).  Stage 2 is one lightweight encoder-decoder evaluated
three times per step, once per anatomy, on the cropped heart region;
all three passes read the same parameter storage and their encoder
features are coupled at every stage by shared cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, ValidationError
from .nn import AttentionBlock, Conv2d, ConvBlock, ConvTranspose2d, CrossAttentionBlock, Downsample, Module
from .tensor import Tensor

SIDE_MULTIPLE = 16  # four stride-2 halvings


def _validate_channels(channels) -> tuple:
    channels = tuple(int(c) for c in channels)
    if len(channels) != 5:
        raise ConfigError(f"expected 5 stage channel counts, got {len(channels)}")
    for a, b in zip(channels, channels[1:]):
        if b != 2 * a:
            raise ConfigError(f"stage channels must double: {channels}")
    return channels


@dataclass
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 4
    channels: tuple = (32, 64, 128, 256, 512)

    def __post_init__(self):
        self.channels = _validate_channels(self.channels)


@dataclass
class SpecialistConfig:
    in_channels: int = 2  # cropped intensity + one initial binary mask
    out_channels: int = 1
    channels: tuple = (16, 32, 64, 128, 256)

    def __post_init__(self):
        self.channels = _validate_channels(self.channels)


def _check_input_map(x: Tensor, in_channels: int) -> None:
    if x.ndim != 4 or x.shape[0] != 1:
        raise DimensionError(f"expected a (1,C,H,W) input, got {x.shape}")
    if x.shape[1] != in_channels:
        raise DimensionError(f"expected {in_channels} input channels, got {x.shape[1]}")
    _, _, h, w = x.shape
    if h % SIDE_MULTIPLE or w % SIDE_MULTIPLE:
        raise ConfigError(f"input extents must be multiples of {SIDE_MULTIPLE}, got {h}x{w}")


class _UNetBackbone(Module):
    """Encoder/decoder skeleton shared by both stages; attention blocks differ."""

    def __init__(self, cfg, rng, dtype=None, cross_encoder: bool = False):
        super().__init__()
        c = cfg.channels
        self.cross_encoder = cross_encoder
        self.patch_embed = Conv2d(cfg.in_channels, c[0], 3, 1, 1, rng, dtype)
        for i in range(4):
            setattr(self, f"enc{i + 1}", ConvBlock(c[i], c[i], rng, dtype))
            attn = CrossAttentionBlock(c[i], rng, dtype) if cross_encoder else AttentionBlock(c[i], rng, dtype)
            setattr(self, f"enc{i + 1}_attn", attn)
            setattr(self, f"down{i + 1}", Downsample(c[i], rng, dtype))
        self.bottleneck = ConvBlock(c[4], c[4], rng, dtype)
        self.bottleneck_attn = AttentionBlock(c[4], rng, dtype)
        for i in range(4, 0, -1):
            setattr(self, f"up{i}", ConvTranspose2d(c[i], rng, dtype))
            setattr(self, f"dec{i}", ConvBlock(2 * c[i - 1], c[i - 1], rng, dtype))
            setattr(self, f"dec{i}_attn", AttentionBlock(c[i - 1], rng, dtype))
        self.head = Conv2d(c[0], cfg.out_channels, 1, 1, 0, rng, dtype)

    def _decode(self, x: Tensor, skips: list, mode: str) -> Tensor:
        for i in range(4, 0, -1):
            x = getattr(self, f"up{i}").forward(x)
            x = ops.concat_channels(x, skips[i - 1])
            x = getattr(self, f"dec{i}").forward(x, mode)
            x = getattr(self, f"dec{i}_attn").forward(x)
        return ops.sigmoid(self.head.forward(x))


class AttentionUNet(_UNetBackbone):
    """Stage-1 network: full-frame four-class sigmoid segmentation."""

    def __init__(self, cfg: UNetConfig | None = None, rng=None, dtype=None):
        self.cfg = cfg or UNetConfig()
        super().__init__(self.cfg, rng or np.random.default_rng(0), dtype, cross_encoder=False)
        self.assign_names()

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        _check_input_map(x, self.cfg.in_channels)
        x = self.patch_embed.forward(x)
        skips = []
        for i in range(1, 5):
            x = getattr(self, f"enc{i}").forward(x, mode)
            x = getattr(self, f"enc{i}_attn").forward(x)
            skips.append(x)
            x = getattr(self, f"down{i}").forward(x)
        x = self.bottleneck.forward(x, mode)
        x = self.bottleneck_attn.forward(x)
        return self._decode(x, skips, mode)


class SpecialistNet(_UNetBackbone):
    """Stage-2 refinement network.

    One parameter storage; ``forward_three`` runs the LV, RV and MYO
    passes through it simultaneously, coupling them by cross-attention
    at every encoder stage.  Decoders run independently with plain
    additive attention.
    """

    def __init__(self, cfg: SpecialistConfig | None = None, rng=None, dtype=None):
        self.cfg = cfg or SpecialistConfig()
        super().__init__(self.cfg, rng or np.random.default_rng(0), dtype, cross_encoder=True)
        self.assign_names()

    def forward_three(self, crop: Tensor, init_lv: Tensor, init_rv: Tensor, init_myo: Tensor,
                      mode: str = "train") -> tuple:
        inits = (init_lv, init_rv, init_myo)
        if any(m.shape != crop.shape for m in inits):
            raise DimensionError(
                f"crop/mask shape mismatch: {crop.shape} vs {[m.shape for m in inits]}"
            )
        _check_input_map(crop, 1)
        for m in inits:
            vals = np.unique(m.data)
            if not np.isin(vals, (0.0, 1.0)).all():
                raise ValidationError("initial masks must be binary (0/1)")

        xs = [ops.concat_channels(crop, m) for m in inits]
        xs = [self.patch_embed.forward(x) for x in xs]
        skips = [[], [], []]
        for i in range(1, 5):
            block = getattr(self, f"enc{i}")
            xs = [block.forward(x, mode) for x in xs]
            xs = list(getattr(self, f"enc{i}_attn").forward(xs))
            for s, x in zip(skips, xs):
                s.append(x)
            down = getattr(self, f"down{i}")
            xs = [down.forward(x) for x in xs]
        xs = [self.bottleneck.forward(x, mode) for x in xs]
        xs = [self.bottleneck_attn.forward(x) for x in xs]
        return tuple(self._decode(x, skips[k], mode) for k, x in enumerate(xs))


def specialists_forward(net: SpecialistNet, crop: Tensor, init_lv: Tensor, init_rv: Tensor,
                        init_myo: Tensor, mode: str = "train") -> tuple:
    """Run the three synchronized specialist passes over shared parameters."""
    return net.forward_three(crop, init_lv, init_rv, init_myo, mode)


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

def _conv_params(cin: int, cout: int, k: int) -> int:
    return cout * cin * k * k + cout


def _block_params(cin: int, cout: int) -> int:
    return _conv_params(cin, cout, 3) + 2 * cout + _conv_params(cout, cout, 3) + 2 * cout


def _attention_params(d: int) -> int:
    # wq, wk, w_out are d*d; w_attn, b_out, gamma, beta are d
    return 3 * d * d + 4 * d


def param_count(cfg: UNetConfig | SpecialistConfig) -> int:
    """Exact learnable-scalar count from the architecture formulas alone."""
    c = cfg.channels
    total = _conv_params(cfg.in_channels, c[0], 3)
    for i in range(4):
        total += _block_params(c[i], c[i]) + _attention_params(c[i])
        total += _conv_params(c[i], 2 * c[i], 2)  # downsample
    total += _block_params(c[4], c[4]) + _attention_params(c[4])
    for i in range(4, 0, -1):
        total += c[i] * (c[i] // 2) * 4 + c[i] // 2  # upsample
        total += _block_params(2 * c[i - 1], c[i - 1]) + _attention_params(c[i - 1])
    total += _conv_params(c[0], cfg.out_channels, 1)
    return total


def module_param_count(module: Module) -> int:
    """Learnable scalars actually held by a module (double-entry check)."""
    return sum(p.size for p in module.parameters())
