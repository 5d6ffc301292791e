"""Global-local affine-flow matcher: hierarchical field estimation over the pyramid.

The matcher runs coarse-to-fine over levels 16 -> 1.  At the coarsest level an
affine regressor initializes the field; at intermediate levels affine and flow
regressors run side by side (the affine branch supervises training through the
consistency loss while the flow branch advances the accumulated field); at the
finest levels only the flow regressor remains, plus a certainty head at full
resolution.

All tensors carried by :class:`MatchResult` are batched: fields are
``(B, H_l, W_l, 2)`` in pixel units at their own level, certainty logits are
``(B, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import torch
import torch.nn as nn

from . import geometry
from .errors import ValidationError
from .geometry import DisplacementField

DEFAULT_AFFINE_LEVELS = (16, 8, 4)
DEFAULT_FLOW_LEVELS = (8, 4, 2, 1)


@dataclass
class LevelOutput:
    """Everything the matcher produced at one pyramid level."""

    level: int
    accumulated: torch.Tensor                  # running field at this level
    previous: torch.Tensor                     # carried-in field, same level
    flow_residual: torch.Tensor | None = None  # residual flow, if a flow head ran
    affine_field: torch.Tensor | None = None   # dense field of the affine estimate
    theta: torch.Tensor | None = None          # (B, 2, 3) affine parameters


@dataclass
class MatchResult:
    """Final field plus every intermediate level output, for loss computation."""

    final_field: torch.Tensor                  # (B, H, W, 2) at level 1
    certainty_logits: torch.Tensor | None
    per_level: dict[int, LevelOutput] = dc_field(default_factory=dict)

    @property
    def affine_levels(self) -> tuple[int, ...]:
        return tuple(l for l, out in sorted(self.per_level.items(), reverse=True)
                     if out.affine_field is not None)

    @property
    def flow_levels(self) -> tuple[int, ...]:
        return tuple(l for l, out in sorted(self.per_level.items(), reverse=True)
                     if out.flow_residual is not None)

    def final_displacement(self, index: int = 0) -> DisplacementField:
        return DisplacementField(self.final_field[index].detach(), 1)


def _norm(channels: int) -> nn.Module:
    return nn.GroupNorm(8 if channels % 8 == 0 else 1, channels)


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        _norm(cout),
        nn.ReLU(inplace=True),
    )


class AffineRegressor(nn.Module):
    """Predicts a residual 2x3 affine from concatenated feature pairs.

    Two conv blocks, global average pooling, then a small MLP whose final
    layer starts at zero so a fresh regressor outputs exactly the identity.
    """

    def __init__(self, in_channels: int, hidden: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, hidden, 1)
        self.body = nn.Sequential(_block(hidden, hidden), _block(hidden, hidden))
        self.mlp = nn.Sequential(
            nn.Linear(hidden, max(hidden // 2, 8)),
            nn.ReLU(inplace=True),
            nn.Linear(max(hidden // 2, 8), 6),
        )
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)
        self.register_buffer("identity", torch.tensor([[1.0, 0.0, 0.0],
                                                       [0.0, 1.0, 0.0]]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.body(self.proj(x)).mean(dim=(2, 3))
        delta = self.mlp(feats).view(-1, 2, 3)
        return delta + self.identity


class FlowRegressor(nn.Module):
    """Predicts a residual displacement field from concatenated feature pairs.

    A 1x1 projection equalizes the input width, three conv blocks follow, and
    a zero-initialized 2-channel head emits the field, so a fresh regressor
    outputs exactly zero.  Also returns its penultimate features for the
    certainty branch.
    """

    def __init__(self, in_channels: int, hidden: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, hidden, 1)
        self.body = nn.Sequential(_block(hidden, hidden), _block(hidden, hidden),
                                  _block(hidden, hidden))
        self.head = nn.Conv2d(hidden, 2, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.body(self.proj(x))
        flow = self.head(feats).permute(0, 2, 3, 1)
        return flow, feats


def _hidden(width: int) -> int:
    return min(width, 128)


class GlamMatcher(nn.Module):
    """Coarse-to-fine matcher over the feature pyramids.

    ``affine_levels`` and ``flow_levels`` select which regressors exist; the
    defaults give affine-only initialization at l=16, coupled levels at 8 and
    4, and flow-only refinement at 2 and 1 with a certainty head at full
    resolution.  The flow branch advances the accumulated field at coupled
    levels; the affine branch feeds the consistency loss.
    """

    def __init__(self, widths: dict[int, int],
                 affine_levels: tuple[int, ...] = DEFAULT_AFFINE_LEVELS,
                 flow_levels: tuple[int, ...] = DEFAULT_FLOW_LEVELS):
        super().__init__()
        for l in (*affine_levels, *flow_levels):
            if l not in geometry.LEVELS:
                raise ValidationError(f"unknown pyramid level {l}")
            if l not in widths:
                raise ValidationError(f"no channel width configured for level {l}")
        if not flow_levels and not affine_levels:
            raise ValidationError("matcher needs at least one regressor level")
        self.affine_levels = tuple(sorted(affine_levels, reverse=True))
        self.flow_levels = tuple(sorted(flow_levels, reverse=True))
        self.affine = nn.ModuleDict(
            {str(l): AffineRegressor(2 * widths[l], _hidden(widths[l]))
             for l in self.affine_levels})
        self.flow = nn.ModuleDict(
            {str(l): FlowRegressor(2 * widths[l], _hidden(widths[l]))
             for l in self.flow_levels})
        if 1 in self.flow_levels:
            self.certainty = nn.Conv2d(_hidden(widths[1]), 1, 3, padding=1)
            nn.init.zeros_(self.certainty.weight)
            nn.init.zeros_(self.certainty.bias)
        else:
            self.certainty = None

    def match(self, pyr_o, pyr_s, with_certainty: bool = True) -> MatchResult:
        levels_o = pyr_o.levels if hasattr(pyr_o, "levels") else pyr_o
        levels_s = pyr_s.levels if hasattr(pyr_s, "levels") else pyr_s
        schedule = sorted(set(self.affine_levels) | set(self.flow_levels), reverse=True)
        for l in schedule:
            if l not in levels_o or l not in levels_s:
                raise ValidationError(f"both pyramids must provide level {l}")
            if levels_o[l].shape[-2:] != levels_s[l].shape[-2:]:
                raise ValidationError(
                    f"pyramid spatial mismatch at level {l}: "
                    f"{tuple(levels_o[l].shape[-2:])} vs {tuple(levels_s[l].shape[-2:])}")

        per_level: dict[int, LevelOutput] = {}
        acc = None
        prev_level = None
        logits = None
        for l in schedule:
            phi_o, phi_s = levels_o[l], levels_s[l]
            if phi_o.ndim == 3:
                phi_o, phi_s = phi_o.unsqueeze(0), phi_s.unsqueeze(0)
            b, _, h, w = phi_o.shape
            if acc is None:
                prev = phi_o.new_zeros(b, h, w, 2)
            else:
                prev = geometry.resize_flow(acc, (h, w), float(prev_level // l))
            warped = geometry.warp(phi_s, prev)
            paired = torch.cat([phi_o, warped], dim=1)

            theta = afield = resid = None
            if l in self.affine_levels:
                theta = self.affine[str(l)](paired)
                afield = geometry.affine_to_flow(theta, h, w)
            if l in self.flow_levels:
                resid, feats = self.flow[str(l)](paired)
                acc = geometry.compose(prev, resid)
                if l == 1 and with_certainty and self.certainty is not None:
                    logits = self.certainty(feats).squeeze(1)
            elif acc is None:
                acc = afield
            else:
                acc = geometry.compose(prev, afield)
            per_level[l] = LevelOutput(level=l, accumulated=acc, previous=prev,
                                       flow_residual=resid, affine_field=afield,
                                       theta=theta)
            prev_level = l

        if prev_level != 1:
            h, w = levels_o[1].shape[-2:]
            acc = geometry.resize_flow(acc, (h, w), float(prev_level))
        return MatchResult(final_field=acc, certainty_logits=logits,
                           per_level=per_level)

    forward = match
