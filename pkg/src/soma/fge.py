"""Feature gradient enhancement for the intermediate pyramid levels {2, 4, 8}.

Per level, the stack is: spatial/channel redundancy reduction with a residual
connection, a fixed bank of 8 rotated derivative kernels applied depthwise,
1x1 fusion back to the input width, channel+spatial attention, dilated-conv
multi-scale fusion, and a trainable depthwise smoothing conv initialized as a
normalized Gaussian.  Output width and spatial size always equal the input's.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError

FGE_LEVELS = (2, 4, 8)
NUM_DIRECTIONS = 8

# horizontal-derivative base stencil; all other directions are rotations of it
_BASE_KERNEL = np.array([[-1.0, 0.0, 1.0],
                         [-2.0, 0.0, 2.0],
                         [-1.0, 0.0, 1.0]])


def _sample_base(x: float, y: float) -> float:
    """Bilinear lookup of the base stencil at offset coordinates in [-1, 1]."""
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    acc = 0.0
    for dy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
        for dx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
            if -1 <= dx <= 1 and -1 <= dy <= 1 and wx * wy:
                acc += wx * wy * _BASE_KERNEL[dy + 1, dx + 1]
    return acc


def _rotated_kernel(angle_deg: float) -> np.ndarray:
    """Rotate the base stencil by ``angle_deg`` and re-center to zero sum."""
    a = math.radians(angle_deg)
    cos_a, sin_a = math.cos(a), math.sin(a)
    out = np.zeros((3, 3))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            # inverse-rotate the target offset into the base kernel's frame
            sx = cos_a * dx + sin_a * dy
            sy = -sin_a * dx + cos_a * dy
            out[dy + 1, dx + 1] = _sample_base(sx, sy)
    return out - out.mean()


@dataclass(frozen=True, eq=False)
class GradientKernelBank:
    """Fixed, non-trainable bank of 8 directional 3x3 derivative kernels."""

    kernels: torch.Tensor  # (8, 3, 3)
    angles_deg: tuple[float, ...]

    def dump(self, path) -> None:
        """Write the bank as plain-text 3x3 matrices, one block per direction."""
        with open(path, "w") as fh:
            for angle, kernel in zip(self.angles_deg, self.kernels):
                fh.write(f"# direction {angle:.1f} deg\n")
                for row in kernel.tolist():
                    fh.write(" ".join(f"{v: .8f}" for v in row) + "\n")
                fh.write("\n")


def build_kernel_bank() -> GradientKernelBank:
    angles = tuple(i * 180.0 / NUM_DIRECTIONS for i in range(NUM_DIRECTIONS))
    kernels = np.stack([_rotated_kernel(a) for a in angles])
    return GradientKernelBank(torch.from_numpy(kernels).to(torch.float32), angles)


def dump_kernel_bank(path) -> None:
    build_kernel_bank().dump(path)


class SpatialReconstructionUnit(nn.Module):
    """Group-normalized spatial gating with cross-reconstruction of the two gates."""

    def __init__(self, channels: int, groups: int = 4, gate_threshold: float = 0.5):
        super().__init__()
        self.gn = nn.GroupNorm(groups, channels)
        self.gate_threshold = gate_threshold

    def forward(self, x):
        gn_x = self.gn(x)
        w = (self.gn.weight / self.gn.weight.sum()).view(1, -1, 1, 1)
        gates = torch.sigmoid(w * gn_x)
        informative = (gates >= self.gate_threshold).to(x.dtype) * gn_x
        residual = (gates < self.gate_threshold).to(x.dtype) * gn_x
        i1, i2 = torch.chunk(informative, 2, dim=1)
        r1, r2 = torch.chunk(residual, 2, dim=1)
        return torch.cat([i1 + r2, i2 + r1], dim=1)


class ChannelReconstructionUnit(nn.Module):
    """Split-squeeze-fuse channel reconstruction (rich path + cheap path)."""

    def __init__(self, channels: int, split_ratio: float = 0.5,
                 squeeze_ratio: int = 2, groups: int = 2):
        super().__init__()
        self.upper = int(channels * split_ratio)
        self.lower = channels - self.upper
        up_sq, low_sq = self.upper // squeeze_ratio, self.lower // squeeze_ratio
        self.squeeze_up = nn.Conv2d(self.upper, up_sq, 1, bias=False)
        self.squeeze_low = nn.Conv2d(self.lower, low_sq, 1, bias=False)
        self.gwc = nn.Conv2d(up_sq, channels, 3, padding=1, groups=groups, bias=False)
        self.pwc_up = nn.Conv2d(up_sq, channels, 1, bias=False)
        self.pwc_low = nn.Conv2d(low_sq, channels - low_sq, 1, bias=False)

    def forward(self, x):
        up, low = torch.split(x, [self.upper, self.lower], dim=1)
        up, low = self.squeeze_up(up), self.squeeze_low(low)
        rich = self.gwc(up) + self.pwc_up(up)
        cheap = torch.cat([low, self.pwc_low(low)], dim=1)
        merged = torch.cat([rich, cheap], dim=1)
        attn = torch.softmax(merged.mean(dim=(2, 3), keepdim=True), dim=1)
        merged = merged * attn
        a, b = torch.chunk(merged, 2, dim=1)
        return a + b


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def forward(self, x):
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x):
        avg = x.mean(dim=1, keepdim=True)
        mx = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


def _gaussian_kernel(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float32) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    k = torch.outer(g, g)
    return k / k.sum()


class FgeLevel(nn.Module):
    """Learnable enhancement state for one pyramid level."""

    def __init__(self, channels: int, attention_reduction: int = 16,
                 smoothing_size: int = 5, smoothing_sigma: float = 1.0):
        super().__init__()
        if channels % 8 != 0:
            raise ValidationError(f"channel width must be divisible by 8, got {channels}")
        self.channels = channels
        self.sru = SpatialReconstructionUnit(channels)
        self.cru = ChannelReconstructionUnit(channels)

        bank = build_kernel_bank()
        self.register_buffer("bank", bank.kernels)
        self.grad_fuse = nn.Conv2d(NUM_DIRECTIONS * channels, channels, 1)
        self.ca = ChannelAttention(channels, attention_reduction)
        self.sa = SpatialAttention()
        self.dilated = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=d, dilation=d) for d in (1, 2, 3))
        self.ms_fuse = nn.Conv2d(3 * channels, channels, 1)
        self.smooth = nn.Conv2d(channels, channels, smoothing_size,
                                padding=smoothing_size // 2, groups=channels,
                                padding_mode="replicate")
        self._init_parameters(smoothing_size, smoothing_sigma)

    def _init_parameters(self, smoothing_size: int, smoothing_sigma: float) -> None:
        # zero biases keep the whole stack exactly zero on zero input
        for conv in (self.grad_fuse, self.ms_fuse, *self.dilated, self.smooth):
            nn.init.zeros_(conv.bias)
        gauss = _gaussian_kernel(smoothing_size, smoothing_sigma)
        with torch.no_grad():
            self.smooth.weight.copy_(gauss.expand(self.channels, 1, -1, -1))

    def reduce_redundancy(self, phi):
        return self.cru(self.sru(phi)) + phi

    def directional_responses(self, features):
        """Apply the fixed bank depthwise; returns (B, N, C, H, W) pre-ReLU."""
        b, c, h, w = features.shape
        weight = self.bank.to(features.dtype).unsqueeze(1)            # (N, 1, 3, 3)
        weight = weight.repeat(c, 1, 1, 1)                            # (C*N, 1, 3, 3)
        padded = F.pad(features, (1, 1, 1, 1), mode="replicate")
        out = F.conv2d(padded, weight, groups=c)                      # channel-major order
        return out.view(b, c, NUM_DIRECTIONS, h, w).permute(0, 2, 1, 3, 4)

    def extract_gradients(self, recon):
        b, c, h, w = recon.shape
        responses = F.relu(self.directional_responses(recon))
        stacked = responses.reshape(b, NUM_DIRECTIONS * c, h, w)
        return self.grad_fuse(stacked) + recon

    def attend_and_fuse(self, grad):
        att = grad * self.ca(grad) * self.sa(grad) + grad
        multi = torch.cat([conv(att) for conv in self.dilated], dim=1)
        return att, self.ms_fuse(multi)

    def forward(self, phi):
        recon = self.reduce_redundancy(phi)
        grad = self.extract_gradients(recon)
        att, multi = self.attend_and_fuse(grad)
        return att + self.smooth(multi)


class FeatureGradientEnhancer(nn.Module):
    """Per-level enhancement applied to pyramid levels {2, 4, 8}.

    With ``enabled=False`` the module is an exact identity on features, which
    is the switched-off ablation configuration.
    """

    def __init__(self, channel_widths: dict[int, int], enabled: bool = True):
        super().__init__()
        unknown = set(channel_widths) - set(FGE_LEVELS)
        if unknown:
            raise ValidationError(f"enhancement only applies to levels {FGE_LEVELS}, got {sorted(unknown)}")
        self.enabled = enabled
        self.levels = nn.ModuleDict(
            {str(l): FgeLevel(c) for l, c in channel_widths.items()} if enabled else {})
        self._widths = dict(channel_widths)

    def enhance(self, phi: torch.Tensor, level: int) -> torch.Tensor:
        if level not in FGE_LEVELS:
            raise ValidationError(f"enhancement only applies to levels {FGE_LEVELS}, got {level}")
        if not self.enabled:
            return phi
        key = str(level)
        if key not in self.levels:
            raise ValidationError(f"no enhancement state configured for level {level}")
        squeeze = phi.ndim == 3
        x = phi.unsqueeze(0) if squeeze else phi
        out = self.levels[key](x)
        return out.squeeze(0) if squeeze else out
