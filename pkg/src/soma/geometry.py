"""Coordinate conventions, displacement-field algebra, and differentiable warping.

Conventions used throughout the package:

* A displacement field is a ``(H, W, 2)`` tensor of ``(dx, dy)`` vectors in
  pixel units at its own pyramid level.  Batched variants ``(B, H, W, 2)``
  are accepted by every functional op.
* Warping is backward: ``warp(f, d)(x) = f(x + d(x))`` with bilinear
  interpolation.
* Normalized coordinates span ``[-1, 1]`` with corner pixel centers mapping
  exactly to ``-1`` and ``+1`` (the ``align_corners=True`` convention).
  Mixing conventions shifts fields by half a pixel, so every resampling op
  in this module pins this one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError

LEVELS = (1, 2, 4, 8, 16)

_FIELD_MAGIC = b"SOMAFLD\x01"
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
_CODE_DTYPES = {0: torch.float32, 1: torch.float64}


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise ValidationError(f"{what} contains NaN or Inf entries")


@dataclass(frozen=True, eq=False)
class AffineParams:
    """A 2x3 affine transform in normalized coordinates (both axes span [-1, 1])."""

    theta: torch.Tensor

    def __post_init__(self):
        if self.theta.shape != (2, 3):
            raise ValidationError(f"theta must have shape (2, 3), got {tuple(self.theta.shape)}")
        _check_finite(self.theta, "theta")

    @staticmethod
    def identity(dtype: torch.dtype = torch.float32) -> "AffineParams":
        return AffineParams(torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=dtype))

    def matrix3(self) -> torch.Tensor:
        """Return the 3x3 augmented matrix."""
        bottom = torch.tensor([[0.0, 0.0, 1.0]], dtype=self.theta.dtype, device=self.theta.device)
        return torch.cat([self.theta, bottom], dim=0)

    def compose(self, other: "AffineParams") -> "AffineParams":
        """Transform applying ``other`` first, then ``self``."""
        return AffineParams((self.matrix3() @ other.matrix3())[:2])

    def inverse(self) -> "AffineParams":
        return AffineParams(torch.linalg.inv(self.matrix3())[:2])


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Dense per-pixel (dx, dy) field in pixel units at its own pyramid level."""

    data: torch.Tensor
    level: int

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[-1] != 2:
            raise ValidationError(
                f"field data must have shape (H, W, 2), got {tuple(self.data.shape)}"
            )
        if self.level not in LEVELS:
            raise ValidationError(f"level must be one of {LEVELS}, got {self.level}")
        _check_finite(self.data, "field data")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @staticmethod
    def zeros(height: int, width: int, level: int = 1,
              dtype: torch.dtype = torch.float32) -> "DisplacementField":
        return DisplacementField(torch.zeros(height, width, 2, dtype=dtype), level)


def pixel_grid(height: int, width: int, dtype: torch.dtype = torch.float32,
               device=None) -> torch.Tensor:
    """Return an (H, W, 2) grid where entry (y, x) equals (x, y) in pixels."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1)


def normalize_coords(pix: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Map pixel coordinates (..., 2) to [-1, 1] with corners at the extremes."""
    sx = 2.0 / max(width - 1, 1)
    sy = 2.0 / max(height - 1, 1)
    scale = torch.tensor([sx, sy], dtype=pix.dtype, device=pix.device)
    return pix * scale - 1.0


def denormalize_coords(norm: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`normalize_coords`."""
    sx = (width - 1) / 2.0
    sy = (height - 1) / 2.0
    scale = torch.tensor([sx, sy], dtype=norm.dtype, device=norm.device)
    return (norm + 1.0) * scale


def _as_batched_field(field) -> tuple[torch.Tensor, bool]:
    """Accept DisplacementField, (H, W, 2) or (B, H, W, 2); return (B, H, W, 2)."""
    t = field.data if isinstance(field, DisplacementField) else field
    if t.ndim == 3:
        return t.unsqueeze(0), True
    if t.ndim == 4:
        return t, False
    raise ValidationError(f"expected (H, W, 2) or (B, H, W, 2) field, got {tuple(t.shape)}")


def affine_to_flow(theta, height: int, width: int) -> torch.Tensor:
    """Convert normalized affine parameters to a pixel-unit displacement field.

    ``theta`` is (2, 3), (B, 2, 3) or AffineParams.  The result D satisfies
    D(x) = P(A(N(x))) - x where N/P map pixel coordinates to/from the
    normalized [-1, 1] square.  Differentiable with respect to theta.
    Returns (H, W, 2) for unbatched theta, else (B, H, W, 2).
    """
    if isinstance(theta, AffineParams):
        theta = theta.theta
    squeeze = theta.ndim == 2
    if squeeze:
        theta = theta.unsqueeze(0)
    if theta.ndim != 3 or theta.shape[-2:] != (2, 3):
        raise ValidationError(f"theta must have shape (2, 3) or (B, 2, 3), got {tuple(theta.shape)}")
    _check_finite(theta, "theta")
    if height < 2 or width < 2:
        raise ValidationError("affine_to_flow requires height, width >= 2")

    grid = pixel_grid(height, width, dtype=theta.dtype, device=theta.device)
    norm = normalize_coords(grid, height, width)                      # (H, W, 2)
    ones = torch.ones_like(norm[..., :1])
    homog = torch.cat([norm, ones], dim=-1).reshape(-1, 3)            # (H*W, 3)
    moved = torch.einsum("bij,nj->bni", theta, homog)                 # (B, H*W, 2)
    moved = moved.reshape(theta.shape[0], height, width, 2)
    # subtracting the round-tripped grid (not the grid itself) makes the
    # identity transform produce a bitwise-zero field
    base = denormalize_coords(norm, height, width)
    flow = denormalize_coords(moved, height, width) - base
    return flow.squeeze(0) if squeeze else flow


def warp(feature: torch.Tensor, field, padding: str = "zeros") -> torch.Tensor:
    """Backward-warp ``feature`` by ``field``: output(x) = feature(x + field(x)).

    ``feature`` is (C, H, W) or (B, C, H, W); ``field`` is a DisplacementField,
    (H, W, 2) or (B, H, W, 2) in pixel units.  Bilinear sampling; out-of-bounds
    samples take zero padding by default ("border" replicates edges).
    Gradients flow to both the feature and the field.
    """
    if padding not in ("zeros", "border"):
        raise ValidationError(f"padding must be 'zeros' or 'border', got {padding!r}")
    flow, _ = _as_batched_field(field)
    squeeze = feature.ndim == 3
    feat = feature.unsqueeze(0) if squeeze else feature
    if feat.ndim != 4:
        raise ValidationError(f"feature must be (C, H, W) or (B, C, H, W), got {tuple(feature.shape)}")
    b, _, h, w = feat.shape
    if flow.shape[1:3] != (h, w):
        raise ValidationError(
            f"field spatial size {tuple(flow.shape[1:3])} does not match feature {(h, w)}"
        )
    if flow.shape[0] == 1 and b > 1:
        flow = flow.expand(b, -1, -1, -1)
    elif flow.shape[0] != b:
        raise ValidationError(f"batch mismatch: feature {b} vs field {flow.shape[0]}")

    base = pixel_grid(h, w, dtype=flow.dtype, device=flow.device)
    grid = normalize_coords(base + flow, h, w)
    out = F.grid_sample(feat.to(flow.dtype), grid, mode="bilinear",
                        padding_mode=padding, align_corners=True)
    out = out.to(feature.dtype)
    return out.squeeze(0) if squeeze else out


def compose(prev, delta, padding: str = "zeros"):
    """Chain two fields at the same level: result(x) = prev(x + delta(x)) + delta(x).

    ``prev`` is sampled bilinearly at the delta-displaced positions.  Exact for
    constant translations; the standard residual-flow composition otherwise.
    Returns the same container kind as the inputs (DisplacementField in,
    DisplacementField out).
    """
    wrapped = isinstance(prev, DisplacementField) and isinstance(delta, DisplacementField)
    if wrapped and prev.level != delta.level:
        raise ValidationError(f"level mismatch: prev level {prev.level} vs delta level {delta.level}")
    p, _ = _as_batched_field(prev)
    d, d_single = _as_batched_field(delta)
    if p.shape[1:] != d.shape[1:]:
        raise ValidationError(f"shape mismatch: prev {tuple(p.shape)} vs delta {tuple(d.shape)}")
    sampled = warp(p.permute(0, 3, 1, 2), d, padding=padding).permute(0, 2, 3, 1)
    out = sampled + d
    if wrapped:
        return DisplacementField(out.squeeze(0), prev.level)
    return out.squeeze(0) if d_single else out


def resize_flow(flow: torch.Tensor, size: tuple[int, int], scale: float) -> torch.Tensor:
    """Bilinearly resize a (B, H, W, 2) flow to ``size`` and scale its values."""
    resized = F.interpolate(flow.permute(0, 3, 1, 2), size=size,
                            mode="bilinear", align_corners=True)
    return resized.permute(0, 2, 3, 1) * scale


def upsample_field(field: DisplacementField, target_level: int) -> DisplacementField:
    """Upsample a field to a finer level, rescaling values to the new pixel units.

    A displacement of one pixel at level ``l`` spans ``l / target_level`` pixels
    at the target level, so values are multiplied by that factor.
    """
    if not isinstance(field, DisplacementField):
        raise ValidationError("upsample_field requires a DisplacementField input")
    if target_level not in LEVELS:
        raise ValidationError(f"target level must be one of {LEVELS}, got {target_level}")
    if target_level >= field.level:
        raise ValidationError(
            f"target level {target_level} must be finer than field level {field.level}"
        )
    factor = field.level // target_level
    t = field.data.unsqueeze(0)
    out = resize_flow(t, (field.height * factor, field.width * factor), float(factor))
    return DisplacementField(out.squeeze(0), target_level)


def field_rmse(a, b) -> torch.Tensor:
    """Root-mean-square end-point error between two fields.

    sqrt(mean over pixels of squared Euclidean displacement difference).
    For batched inputs the per-sample RMSEs are averaged.
    """
    ta, _ = _as_batched_field(a)
    tb, _ = _as_batched_field(b)
    if ta.shape != tb.shape:
        raise ValidationError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    sq = ((ta - tb) ** 2).sum(dim=-1)            # (B, H, W) squared end-point error
    return torch.sqrt(sq.mean(dim=(1, 2))).mean()


def pixel_matrix_to_theta(matrix: np.ndarray, height: int, width: int) -> AffineParams:
    """Convert a 3x3 pixel-space affine matrix to normalized parameters."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValidationError(f"expected a 3x3 pixel-space matrix, got {m.shape}")
    sx, sy = 2.0 / (width - 1), 2.0 / (height - 1)
    n = np.array([[sx, 0.0, -1.0], [0.0, sy, -1.0], [0.0, 0.0, 1.0]])
    p = np.linalg.inv(n)
    theta = (n @ m @ p)[:2]
    return AffineParams(torch.from_numpy(np.ascontiguousarray(theta)).to(torch.float32))


def theta_to_pixel_matrix(theta: AffineParams, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`pixel_matrix_to_theta`; returns a 3x3 numpy matrix."""
    sx, sy = 2.0 / (width - 1), 2.0 / (height - 1)
    n = np.array([[sx, 0.0, -1.0], [0.0, sy, -1.0], [0.0, 0.0, 1.0]])
    a = theta.matrix3().detach().cpu().double().numpy()
    return np.linalg.inv(n) @ a @ n


def save_field(field: DisplacementField, path) -> None:
    """Write a field to the flat binary container (see docs/field_format.md)."""
    data = field.data.detach().cpu().contiguous()
    code = _DTYPE_CODES.get(data.dtype)
    if code is None:
        raise ValidationError(f"unsupported field dtype {data.dtype}")
    arr = data.numpy()
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(struct.pack("<IIII", field.level, code, field.height, field.width))
        fh.write(arr.tobytes())


def load_field(path) -> DisplacementField:
    """Read a field written by :func:`save_field`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_FIELD_MAGIC))
        if magic != _FIELD_MAGIC:
            raise ValidationError(f"{path}: not a field container (bad magic)")
        level, code, h, w = struct.unpack("<IIII", fh.read(16))
        if code not in _CODE_DTYPES:
            raise ValidationError(f"{path}: unknown dtype code {code}")
        dtype = _CODE_DTYPES[code]
        itemsize = torch.tensor([], dtype=dtype).element_size()
        raw = fh.read(h * w * 2 * itemsize)
    if len(raw) != h * w * 2 * itemsize:
        raise ValidationError(f"{path}: truncated field payload")
    np_dtype = np.dtype("<f4" if code == 0 else "<f8")
    arr = np.frombuffer(raw, dtype=np_dtype).reshape(h, w, 2)
    return DisplacementField(torch.from_numpy(arr.copy()).to(dtype), level)
