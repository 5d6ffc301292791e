"""Registration metrics and report files.

Per pair, the registration error is the masked end-point RMSE between the
predicted and ground-truth level-1 fields, in pixels.  CMR@t is the percentage
of pairs with error strictly below t; R_avg is the plain mean of the per-pair
errors.  Reports land in two CSVs: a wide ``metrics.csv`` with one row per
method and a raw ``errors_<method>.csv`` for distribution plots.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import DegenerateInputError, ValidationError
from .geometry import DisplacementField

DEFAULT_THRESHOLDS = (1, 2, 3, 4, 5)

METRICS_NAME = "metrics.csv"


@dataclass(frozen=True)
class EvalRecord:
    pair_id: str
    error: float
    quadrant_errors: tuple[float, float, float, float]

    def __post_init__(self):
        values = (self.error, *self.quadrant_errors)
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise ValidationError(f"record {self.pair_id!r} has invalid errors {values}")


def _as_field_tensor(field) -> torch.Tensor:
    t = field.data if isinstance(field, DisplacementField) else field
    if t.ndim != 3 or t.shape[-1] != 2:
        raise ValidationError(f"expected an (H, W, 2) field, got {tuple(t.shape)}")
    return t


def pair_error(predicted, gt, mask: torch.Tensor | None = None) -> float:
    """Masked end-point RMSE between two level-1 fields, in pixels."""
    p = _as_field_tensor(predicted)
    g = _as_field_tensor(gt)
    if p.shape != g.shape:
        raise ValidationError(f"field shapes differ: {tuple(p.shape)} vs {tuple(g.shape)}")
    sq = (p.double() - g.double()).square().sum(dim=-1)
    if mask is not None:
        if mask.shape != sq.shape:
            raise ValidationError(f"mask shape {tuple(mask.shape)} does not match field")
        mask = mask.bool()
        if not mask.any():
            raise DegenerateInputError("validity mask excludes every pixel")
        sq = sq[mask]
    return float(torch.sqrt(sq.mean()))


def quadrant_errors(predicted, gt,
                    mask: torch.Tensor | None = None) -> tuple[float, float, float, float]:
    """Per-quadrant end-point RMSEs (top-left, top-right, bottom-left, bottom-right)."""
    p = _as_field_tensor(predicted)
    h, w = p.shape[:2]
    hh, hw = h // 2, w // 2
    slices = ((slice(0, hh), slice(0, hw)), (slice(0, hh), slice(hw, w)),
              (slice(hh, h), slice(0, hw)), (slice(hh, h), slice(hw, w)))
    g = _as_field_tensor(gt)
    out = []
    for sy, sx in slices:
        sub_mask = mask[sy, sx] if mask is not None else None
        out.append(pair_error(p[sy, sx], g[sy, sx], sub_mask))
    return tuple(out)


def make_record(pair_id: str, predicted, gt,
                mask: torch.Tensor | None = None) -> EvalRecord:
    return EvalRecord(pair_id=pair_id,
                      error=pair_error(predicted, gt, mask),
                      quadrant_errors=quadrant_errors(predicted, gt, mask))


def r_avg(records: list[EvalRecord]) -> float:
    if not records:
        raise DegenerateInputError("no evaluation records")
    return sum(r.error for r in records) / len(records)


def cmr(records: list[EvalRecord], threshold: float) -> float:
    """Percentage of pairs whose error is strictly below the threshold."""
    if not records:
        raise DegenerateInputError("no evaluation records")
    if threshold <= 0:
        raise ValidationError(f"threshold must be positive, got {threshold}")
    below = sum(1 for r in records if r.error < threshold)
    return round(100.0 * below / len(records), 2)


def report(records: list[EvalRecord], out_dir, method: str = "soma",
           thresholds: tuple[int, ...] = DEFAULT_THRESHOLDS) -> Path:
    """Write/refresh ``metrics.csv`` (one row per method) and the raw error list."""
    if not records:
        raise DegenerateInputError("no evaluation records")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    header = ["method", *[f"cmr@{t}px" for t in thresholds], "r_avg", "n_pairs"]
    row = [method, *[f"{cmr(records, t):.2f}" for t in thresholds],
           f"{r_avg(records):.6f}", str(len(records))]

    metrics_path = out_dir / METRICS_NAME
    rows: dict[str, list[str]] = {}
    if metrics_path.exists():
        with open(metrics_path, newline="") as fh:
            reader = csv.reader(fh)
            existing_header = next(reader, None)
            if existing_header == header:
                for existing in reader:
                    rows[existing[0]] = existing
    rows[method] = row
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for name in sorted(rows):
            writer.writerow(rows[name])

    with open(out_dir / f"errors_{method}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "error",
                         "q_tl", "q_tr", "q_bl", "q_br"])
        for rec in records:
            writer.writerow([rec.pair_id, f"{rec.error:.6f}",
                             *[f"{q:.6f}" for q in rec.quadrant_errors]])
    return metrics_path
