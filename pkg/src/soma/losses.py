"""The five-term training objective and its weighted combination.

total = warp + lambda_cons * cons + alpha_cert * cert + alpha_delta * delta
        + alpha_uni * uni

All terms operate on pixel-unit displacement fields and are differentiable.
Batched inputs are reduced per sample first, then averaged over the batch, so
a batch of one reproduces the single-pair definitions exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import torch

from .errors import ValidationError
from .geometry import DisplacementField, _as_batched_field, resize_flow
from .glam import MatchResult

CONSISTENCY_LEVELS = (8, 4)
DELTA_LEVELS = (8, 4, 2, 1)

DEFAULT_LEVEL_WEIGHTS = {8: 0.125, 4: 0.25, 2: 0.5, 1: 1.0}


@dataclass(frozen=True)
class LossWeights:
    lambda_cons: float = 0.5
    alpha_cert: float = 0.1
    alpha_delta: float = 0.1
    alpha_uni: float = 0.1
    level_weights: dict[int, float] = dc_field(
        default_factory=lambda: dict(DEFAULT_LEVEL_WEIGHTS))

    def __post_init__(self):
        values = [self.lambda_cons, self.alpha_cert, self.alpha_delta, self.alpha_uni]
        values += list(self.level_weights.values())
        if any(v < 0 for v in values):
            raise ValidationError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    warp: torch.Tensor
    cons: torch.Tensor
    cert: torch.Tensor
    delta: torch.Tensor
    uni: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach())
                for name in ("warp", "cons", "cert", "delta", "uni", "total")}


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    """Element-wise sqrt with a zero subgradient at zero.

    Plain sqrt backpropagates an infinite slope at 0, which turns an
    exactly-zero loss term (routine at initialization) into NaN parameter
    updates.  Values are untouched: sqrt(x) for x > 0, exactly 0 at 0.
    """
    positive = x > 0
    guarded = torch.where(positive, x, torch.ones_like(x))
    return torch.where(positive, guarded.sqrt(), torch.zeros_like(x))


def _per_sample_rmse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(B,) root-mean-square end-point error per sample."""
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    sq = ((a - b) ** 2).sum(dim=-1)
    return _safe_sqrt(sq.mean(dim=(1, 2)))


def _gt_tensor(gt) -> torch.Tensor:
    if isinstance(gt, DisplacementField) and gt.level != 1:
        raise ValidationError(f"ground-truth field must be at level 1, got level {gt.level}")
    t, _ = _as_batched_field(gt)
    return t


def warp_loss(result: MatchResult, gt) -> torch.Tensor:
    """RMSE between the finest predicted field and the ground-truth warp."""
    gt_t = _gt_tensor(gt)
    pred = result.final_field
    if pred.shape[0] != gt_t.shape[0]:
        if gt_t.shape[0] == 1:
            gt_t = gt_t.expand_as(pred)
        else:
            raise ValidationError("batch mismatch between prediction and ground truth")
    return _per_sample_rmse(pred, gt_t).mean()


def consistency_loss(result: MatchResult, levels=CONSISTENCY_LEVELS) -> torch.Tensor:
    """Sum over coupled levels of the flow-vs-affine field RMSE at native resolution."""
    total = None
    for level in levels:
        out = result.per_level.get(level)
        if out is None or out.flow_residual is None or out.affine_field is None:
            raise ValidationError(
                f"consistency loss needs both flow and affine fields at level {level}")
        term = _per_sample_rmse(out.flow_residual, out.affine_field).mean()
        total = term if total is None else total + term
    if total is None:
        raise ValidationError("consistency loss needs at least one level")
    return total


def certainty_loss(logits: torch.Tensor, predicted, gt) -> torch.Tensor:
    """Mean squared gap between sigmoid(logits) and exp(-end-point error)."""
    pred_t, _ = _as_batched_field(predicted)
    gt_t = _gt_tensor(gt)
    if logits.ndim == 2:
        logits = logits.unsqueeze(0)
    if logits.shape != pred_t.shape[:3]:
        raise ValidationError(
            f"logits shape {tuple(logits.shape)} does not match fields {tuple(pred_t.shape[:3])}")
    if pred_t.shape != gt_t.shape:
        raise ValidationError("predicted and ground-truth fields differ in shape")
    epe = _safe_sqrt((pred_t - gt_t).square().sum(dim=-1))
    target = torch.exp(-epe)
    return ((torch.sigmoid(logits) - target) ** 2).mean()


def delta_loss(result: MatchResult, gt, level_weights=None) -> torch.Tensor:
    """Weighted mean-L1 residual supervision at every flow level.

    Each level's residual flow is upsampled to full resolution and compared to
    the gap left by the carried-in field: gt - upsample(previous).
    """
    weights = dict(DEFAULT_LEVEL_WEIGHTS if level_weights is None else level_weights)
    gt_t = _gt_tensor(gt)
    h, w = gt_t.shape[1], gt_t.shape[2]
    total = None
    for level in DELTA_LEVELS:
        out = result.per_level.get(level)
        if out is None or out.flow_residual is None:
            raise ValidationError(f"delta loss needs a flow residual at level {level}")
        residual = _to_full_res(out.flow_residual, level, (h, w))
        prev = _to_full_res(out.previous, level, (h, w))
        gap = gt_t - prev
        term = (residual - gap).abs().mean(dim=(1, 2, 3)).mean()
        total = weights[level] * term if total is None else total + weights[level] * term
    return total


def _to_full_res(flow: torch.Tensor, level: int, size: tuple[int, int]) -> torch.Tensor:
    if level == 1:
        if flow.shape[1:3] != size:
            raise ValidationError("level-1 field does not match ground-truth size")
        return flow
    return resize_flow(flow, size, float(level))


def uniformity_loss(predicted, gt) -> torch.Tensor:
    """Population standard deviation of the four quadrant RMSEs."""
    pred_t, _ = _as_batched_field(predicted)
    gt_t = _gt_tensor(gt)
    if pred_t.shape != gt_t.shape:
        raise ValidationError("predicted and ground-truth fields differ in shape")
    h, w = pred_t.shape[1], pred_t.shape[2]
    if h % 2 or w % 2:
        raise ValidationError(f"uniformity loss needs even dimensions, got {(h, w)}")
    hh, hw = h // 2, w // 2
    quads = []
    for ys, xs in ((slice(0, hh), slice(0, hw)), (slice(0, hh), slice(hw, w)),
                   (slice(hh, h), slice(0, hw)), (slice(hh, h), slice(hw, w))):
        quads.append(_per_sample_rmse(pred_t[:, ys, xs], gt_t[:, ys, xs]))
    stacked = torch.stack(quads, dim=1)                       # (B, 4)
    variance = stacked.var(dim=1, unbiased=False)
    return _safe_sqrt(variance).mean()


def total_loss(result: MatchResult, gt, logits: torch.Tensor | None = None,
               weights: LossWeights | None = None) -> LossBreakdown:
    """Combine all five terms; skips consistency when no affine branch ran."""
    weights = weights or LossWeights()
    if logits is None:
        logits = result.certainty_logits
    if logits is None:
        raise ValidationError("total loss needs certainty logits")

    warp = warp_loss(result, gt)
    cons_levels = [l for l in CONSISTENCY_LEVELS
                   if (out := result.per_level.get(l)) is not None
                   and out.affine_field is not None and out.flow_residual is not None]
    if cons_levels:
        cons = consistency_loss(result, levels=tuple(cons_levels))
    else:
        cons = torch.zeros((), dtype=warp.dtype, device=warp.device)
    cert = certainty_loss(logits, result.final_field, gt)
    delta = delta_loss(result, gt, weights.level_weights)
    uni = uniformity_loss(result.final_field, gt)
    total = (warp + weights.lambda_cons * cons + weights.alpha_cert * cert
             + weights.alpha_delta * delta + weights.alpha_uni * uni)
    return LossBreakdown(warp=warp, cons=cons, cert=cert, delta=delta, uni=uni, total=total)
