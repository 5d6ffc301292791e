"""Full registration model: encoder, gradient enhancement, and matcher.

The three ablation switches reproduce the component-analysis grid: the frozen
coarse encoder on/off (off grows a trainable coarse stage per backbone), the
gradient enhancer on/off, and the hierarchical matcher on/off (off falls back
to a flow decoder at every level with no affine path).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoder import DEFAULT_WIDTHS, PyramidEncoder
from .errors import ConfigurationError
from .fge import FGE_LEVELS, FeatureGradientEnhancer
from .glam import DEFAULT_AFFINE_LEVELS, DEFAULT_FLOW_LEVELS, GlamMatcher, MatchResult


@dataclass(frozen=True)
class AblationFlags:
    """Which of the three optional components are active."""

    dino: bool = True
    fge: bool = True
    glam: bool = True


ABLATION_PRESETS = {
    "baseline": AblationFlags(dino=False, fge=False, glam=False),
    "dino": AblationFlags(dino=True, fge=False, glam=False),
    "fge": AblationFlags(dino=False, fge=True, glam=False),
    "glam": AblationFlags(dino=False, fge=False, glam=True),
    "dino_fge": AblationFlags(dino=True, fge=True, glam=False),
    "dino_glam": AblationFlags(dino=True, fge=False, glam=True),
    "fge_glam": AblationFlags(dino=False, fge=True, glam=True),
    "full": AblationFlags(dino=True, fge=True, glam=True),
}


class SomaModel(nn.Module):
    def __init__(self, widths: dict[int, int] | None = None,
                 flags: AblationFlags = AblationFlags(),
                 optical_channels: int = 3, sar_channels: int = 1,
                 affine_levels: tuple[int, ...] = DEFAULT_AFFINE_LEVELS,
                 flow_levels: tuple[int, ...] = DEFAULT_FLOW_LEVELS,
                 coarse_seed: int = 0):
        super().__init__()
        widths = dict(widths or DEFAULT_WIDTHS)
        self.flags = flags
        self.widths = widths
        self.encoder = PyramidEncoder(widths, optical_channels=optical_channels,
                                      sar_channels=sar_channels,
                                      frozen_coarse=flags.dino,
                                      coarse_seed=coarse_seed)
        # one enhancer shared by both modality pyramids
        self.fge = FeatureGradientEnhancer({l: widths[l] for l in FGE_LEVELS},
                                           enabled=flags.fge)
        if flags.glam:
            self.matcher = GlamMatcher(widths, affine_levels, flow_levels)
        else:
            self.matcher = GlamMatcher(widths, affine_levels=(),
                                       flow_levels=(16, 8, 4, 2, 1))

    def forward(self, optical: torch.Tensor, sar: torch.Tensor,
                with_certainty: bool = True) -> MatchResult:
        pyr_o = self.encoder.encode(optical, "optical")
        pyr_s = self.encoder.encode(sar, "sar")
        if self.fge.enabled:
            for l in FGE_LEVELS:
                pyr_o.levels[l] = self.fge.enhance(pyr_o.levels[l], l)
                pyr_s.levels[l] = self.fge.enhance(pyr_s.levels[l], l)
        return self.matcher.match(pyr_o, pyr_s, with_certainty=with_certainty)

    def parameter_signature(self) -> tuple[int, int]:
        """(trainable, frozen) parameter counts; distinct per ablation setup."""
        trainable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        frozen = sum(p.numel() for p in self.parameters() if not p.requires_grad)
        return trainable, frozen

    def frozen_parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            if not p.requires_grad:
                h.update(name.encode())
                h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def build_model(preset: str = "full", **kwargs) -> SomaModel:
    if preset not in ABLATION_PRESETS:
        raise ConfigurationError(f"unknown ablation preset {preset!r}, "
                                 f"expected one of {sorted(ABLATION_PRESETS)}")
    return SomaModel(flags=ABLATION_PRESETS[preset], **kwargs)
