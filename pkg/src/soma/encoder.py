"""Two-modality feature pyramid extraction.

Each modality (optical, SAR) gets its own trainable backbone producing levels
{1, 2, 4, 8}; the l=16 features come either from a shared frozen coarse
encoder or, when that is switched off, from an extra trainable stage per
backbone.  Spatial sizes follow H/l x W/l exactly, so inputs must be divisible
by 16.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError
from .geometry import LEVELS

MODALITIES = ("optical", "sar")

DEFAULT_WIDTHS = {1: 32, 2: 64, 4: 128, 8: 256, 16: 64}


@dataclass
class FeaturePyramid:
    """Per-level feature maps for one image, keyed by downsampling factor."""

    levels: dict[int, torch.Tensor]
    modality: str

    def check(self, widths: dict[int, int] | None = None) -> None:
        if set(self.levels) != set(LEVELS):
            raise ValidationError(f"pyramid must carry levels {LEVELS}, got {sorted(self.levels)}")
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")
        base = self.levels[1]
        h, w = base.shape[-2:]
        for level, feat in self.levels.items():
            if feat.shape[-2:] != (h // level, w // level):
                raise ValidationError(
                    f"level {level} has spatial size {tuple(feat.shape[-2:])}, "
                    f"expected {(h // level, w // level)}")
            if widths is not None and feat.shape[-3] != widths[level]:
                raise ValidationError(
                    f"level {level} has width {feat.shape[-3]}, expected {widths[level]}")


def adapt_coarse_grid(raw: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Resample a coarse feature grid to the requested size (bilinear).

    Returns the input unchanged when the grid already matches.
    """
    h, w = raw.shape[-2:]
    th, tw = target
    if min(h, w) < 1 or min(th, tw) < 1:
        raise ValidationError(f"grid sizes must be positive, got {(h, w)} -> {target}")
    if (h, w) == (th, tw):
        return raw
    squeeze = raw.ndim == 3
    x = raw.unsqueeze(0) if squeeze else raw
    out = F.interpolate(x, size=target, mode="bilinear", align_corners=True)
    return out.squeeze(0) if squeeze else out


class CoarseEncoderHandle(nn.Module):
    """Wraps any coarse feature extractor and pins its grid to H/16 x W/16.

    The wrapped network sees a 3-channel image (single-channel inputs are
    repeated).  With ``frozen=True`` its parameters take no gradients and the
    forward runs without autograd history.
    """

    def __init__(self, net: nn.Module, frozen: bool = True):
        super().__init__()
        self.net = net
        self.frozen = frozen
        if frozen:
            self.net.eval()
            for p in self.net.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            self.net.eval()
        return self

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h, w = image.shape[-2:]
        c = image.shape[-3]
        if c == 1:
            image = image.expand(*image.shape[:-3], 3, h, w)
        elif c != 3:
            raise ValidationError(f"coarse encoder expects 1 or 3 channels, got {c}")
        if self.frozen:
            with torch.no_grad():
                raw = self.net(image)
        else:
            raw = self.net(image)
        return adapt_coarse_grid(raw, (h // 16, w // 16))


def build_default_coarse(out_channels: int, seed: int = 0) -> nn.Module:
    """Seeded random conv encoder with a /16 output grid, used in place of a
    pretrained model so the coarse path stays exercisable offline."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        widths = (16, 32, 64, out_channels)
        layers: list[nn.Module] = []
        cin = 3
        for cout in widths:
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.GELU()]
            cin = cout
        layers.append(nn.Conv2d(cin, out_channels, 1))
        return nn.Sequential(*layers)


def _norm(channels: int) -> nn.Module:
    return nn.GroupNorm(8 if channels % 8 == 0 else 1, channels)


def _block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        _norm(cout),
        nn.ReLU(inplace=True),
    )


class ModalityEncoder(nn.Module):
    """Trainable backbone for one modality: a stride-1 stem then stride-2 stages."""

    def __init__(self, in_channels: int, widths: dict[int, int],
                 with_coarse_stage: bool = False):
        super().__init__()
        w1, w2, w4, w8 = (widths[l] for l in (1, 2, 4, 8))
        self.proj = nn.Conv2d(in_channels, w1, 1)
        self.stem = nn.Sequential(_block(w1, w1), _block(w1, w1))
        self.stage2 = nn.Sequential(_block(w1, w2, stride=2), _block(w2, w2))
        self.stage4 = nn.Sequential(_block(w2, w4, stride=2), _block(w4, w4))
        self.stage8 = nn.Sequential(_block(w4, w8, stride=2), _block(w8, w8))
        self.stage16 = (nn.Sequential(_block(w8, widths[16], stride=2),
                                      _block(widths[16], widths[16]))
                        if with_coarse_stage else None)

    def forward(self, image: torch.Tensor) -> dict[int, torch.Tensor]:
        f1 = self.stem(self.proj(image))
        f2 = self.stage2(f1)
        f4 = self.stage4(f2)
        f8 = self.stage8(f4)
        out = {1: f1, 2: f2, 4: f4, 8: f8}
        if self.stage16 is not None:
            out[16] = self.stage16(f8)
        return out


class PyramidEncoder(nn.Module):
    """Builds both modality pyramids under one channel schedule.

    ``coarse="auto"`` constructs the default frozen encoder; passing ``None``
    leaves the coarse path unconfigured (encoding then fails) unless
    ``frozen_coarse`` is off, in which case each backbone grows its own
    trainable l=16 stage.
    """

    def __init__(self, widths: dict[int, int] | None = None,
                 optical_channels: int = 3, sar_channels: int = 1,
                 frozen_coarse: bool = True,
                 coarse: nn.Module | str | None = "auto",
                 coarse_seed: int = 0):
        super().__init__()
        self.widths = dict(widths or DEFAULT_WIDTHS)
        missing = set(LEVELS) - set(self.widths)
        if missing:
            raise ConfigurationError(f"channel schedule is missing levels {sorted(missing)}")
        self.frozen_coarse = frozen_coarse
        self.optical = ModalityEncoder(optical_channels, self.widths,
                                       with_coarse_stage=not frozen_coarse)
        self.sar = ModalityEncoder(sar_channels, self.widths,
                                   with_coarse_stage=not frozen_coarse)
        if not frozen_coarse:
            self.coarse = None
        elif coarse == "auto":
            self.coarse = CoarseEncoderHandle(
                build_default_coarse(self.widths[16], seed=coarse_seed), frozen=True)
        elif coarse is None:
            self.coarse = None
        else:
            self.coarse = coarse if isinstance(coarse, CoarseEncoderHandle) \
                else CoarseEncoderHandle(coarse, frozen=True)

    def encode(self, image: torch.Tensor, modality: str) -> FeaturePyramid:
        if modality not in MODALITIES:
            raise ValidationError(f"unknown modality {modality!r}")
        h, w = image.shape[-2:]
        if h % 16 or w % 16:
            raise ValidationError(f"input size {(h, w)} is not divisible by 16")
        squeeze = image.ndim == 3
        x = image.unsqueeze(0) if squeeze else image
        backbone = self.optical if modality == "optical" else self.sar
        levels = backbone(x)
        if 16 not in levels:
            if self.coarse is None:
                raise ConfigurationError("no coarse encoder is configured for level 16")
            levels[16] = self.coarse(x)
        if squeeze:
            levels = {l: f.squeeze(0) for l, f in levels.items()}
        pyramid = FeaturePyramid(levels=levels, modality=modality)
        pyramid.check(self.widths)
        return pyramid

    def forward(self, optical: torch.Tensor, sar: torch.Tensor):
        return self.encode(optical, "optical"), self.encode(sar, "sar")
