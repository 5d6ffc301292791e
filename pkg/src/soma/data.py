"""Dataset ingestion and the synthetic perturbation protocol.

Aligned optical/SAR tile pairs live in ``root/{split}/{optical,sar}/<id>.<ext>``
with matching filenames.  Ground truth is manufactured: the SAR tile is warped
by a random affine (rotation and scale about the image center, then
translation) and the inverse displacement field becomes the registration
target, so ``warp(sar_perturbed, gt_field)`` re-aligns with the optical tile.

Train-split perturbations are sampled on the fly from a seeded stream; val and
test splits read fixed per-tile manifests (``perturbations.csv``) so repeated
evaluations see identical geometry.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataLoadError, ValidationError
from .geometry import (
    AffineParams,
    DisplacementField,
    affine_to_flow,
    pixel_grid,
    pixel_matrix_to_theta,
    warp,
)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".tif", ".tiff")

SPLITS = ("train", "val", "test")

MANIFEST_NAME = "perturbations.csv"
_THETA_COLUMNS = ("t00", "t01", "t02", "t10", "t11", "t12")


@dataclass(frozen=True)
class PerturbationSpec:
    """Bounds for the random affine protocol, plus the tile size the pixel
    bounds refer to.  Sampling is deterministic given the seed."""

    max_translation_px: float = 32.0
    scale_delta: float = 0.2
    max_rotation_deg: float = 5.0
    height: int = 128
    width: int = 128
    seed: int = 0

    def __post_init__(self):
        if min(self.max_translation_px, self.scale_delta, self.max_rotation_deg) < 0:
            raise ValidationError("perturbation bounds must be non-negative")
        if self.height < 2 or self.width < 2:
            raise ValidationError("tile size must be at least 2x2")

    @classmethod
    def extended(cls, **overrides) -> "PerturbationSpec":
        """The harder protocol variant: 50 px translations, rotations to 20 degrees."""
        base = dict(max_translation_px=50.0, max_rotation_deg=20.0)
        base.update(overrides)
        return cls(**base)


@dataclass
class ImagePair:
    """One training/evaluation sample: aligned optical, perturbed SAR, truth."""

    optical: torch.Tensor          # (C_o, H, W) in [0, 1]
    sar: torch.Tensor              # (1, H, W) in [0, 1]
    gt_field: DisplacementField    # level 1, pixel units
    mask: torch.Tensor             # (H, W) bool, False where SAR padding leaked in
    meta: dict = dc_field(default_factory=dict)

    def validate(self) -> None:
        h, w = self.optical.shape[-2:]
        if h % 16 or w % 16:
            raise ValidationError(f"tile size {(h, w)} is not divisible by 16")
        if self.sar.shape[-2:] != (h, w):
            raise ValidationError("optical and SAR sizes differ")
        if self.gt_field.data.shape[:2] != (h, w) or self.gt_field.level != 1:
            raise ValidationError("gt_field must be a level-1 field of the tile size")
        for name, img in (("optical", self.optical), ("sar", self.sar)):
            if not torch.isfinite(img).all():
                raise ValidationError(f"{name} tile contains non-finite values")
            if img.min() < 0 or img.max() > 1:
                raise ValidationError(f"{name} intensities fall outside [0, 1]")
        if not torch.isfinite(self.gt_field.data).all():
            raise ValidationError("gt_field contains non-finite values")


def sample_perturbation(spec: PerturbationSpec, rng=None) -> AffineParams:
    """Draw a random affine: rotation and scale about the image center, then
    translation; every parameter uniform within its bound."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    rot = math.radians(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
    scale = rng.uniform(1.0 - spec.scale_delta, 1.0 + spec.scale_delta)
    tx = rng.uniform(-spec.max_translation_px, spec.max_translation_px)
    ty = rng.uniform(-spec.max_translation_px, spec.max_translation_px)

    cx, cy = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0
    cos_r, sin_r = math.cos(rot) * scale, math.sin(rot) * scale
    linear = np.array([[cos_r, -sin_r], [sin_r, cos_r]])
    center = np.array([cx, cy])
    offset = center + np.array([tx, ty]) - linear @ center
    matrix = np.eye(3)
    matrix[:2, :2] = linear
    matrix[:2, 2] = offset
    return pixel_matrix_to_theta(matrix, spec.height, spec.width)


def apply_perturbation(optical: torch.Tensor, sar: torch.Tensor,
                       theta: AffineParams, meta: dict | None = None) -> ImagePair:
    """Warp the SAR tile by ``theta`` and manufacture the ground-truth field."""
    if optical.shape[-2:] != sar.shape[-2:]:
        raise ValidationError(
            f"aligned tiles must share a size, got {tuple(optical.shape[-2:])} "
            f"vs {tuple(sar.shape[-2:])}")
    h, w = sar.shape[-2:]
    inverse_flow = affine_to_flow(theta.inverse(), h, w)
    perturbed = warp(sar, inverse_flow, padding="zeros").clamp_(0.0, 1.0)

    coords = pixel_grid(h, w) + inverse_flow
    mask = ((coords[..., 0] >= 0) & (coords[..., 0] <= w - 1)
            & (coords[..., 1] >= 0) & (coords[..., 1] <= h - 1))

    gt = DisplacementField(affine_to_flow(theta, h, w), level=1)
    info = {"theta": theta}
    info.update(meta or {})
    pair = ImagePair(optical=optical, sar=perturbed, gt_field=gt,
                     mask=mask, meta=info)
    pair.validate()
    return pair


def load_image(path) -> torch.Tensor:
    """Read an 8/16-bit grayscale or RGB raster as float channels in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode == "I;16":
                arr = np.asarray(img, dtype=np.float32) / 65535.0
            elif img.mode in ("L", "RGB"):
                arr = np.asarray(img, dtype=np.float32) / 255.0
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataLoadError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


def save_image(tensor: torch.Tensor, path) -> None:
    arr = tensor.detach().cpu().clamp(0, 1).numpy()
    arr = (arr * 255.0).round().astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def _tile_ids(split_dir: Path) -> list[str]:
    optical_dir = split_dir / "optical"
    if not optical_dir.is_dir():
        return []
    return sorted(p.stem for p in optical_dir.iterdir()
                  if p.suffix.lower() in IMAGE_EXTENSIONS)


def _find_tile(directory: Path, tile_id: str) -> Path:
    for ext in IMAGE_EXTENSIONS:
        candidate = directory / f"{tile_id}{ext}"
        if candidate.exists():
            return candidate
    raise DataLoadError(f"tile {tile_id!r} has no raster under {directory}")


def read_manifest(path) -> dict[str, tuple[AffineParams, int]]:
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"perturbation manifest missing: {path}")
    out: dict[str, tuple[AffineParams, int]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = [float(row[c]) for c in _THETA_COLUMNS]
            theta = AffineParams(torch.tensor(vals).view(2, 3))
            out[row["tile_id"]] = (theta, int(row["seed"]))
    return out


def write_manifest(path, entries: dict[str, tuple[AffineParams, int]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("tile_id", *_THETA_COLUMNS, "seed"))
        for tile_id in sorted(entries):
            theta, seed = entries[tile_id]
            flat = [f"{v!r}" for v in theta.theta.double().flatten().tolist()]
            writer.writerow((tile_id, *flat, seed))


def load_dataset(root, split: str, spec: PerturbationSpec | None = None) -> list[ImagePair]:
    """Load every pair of one split, perturbing SAR tiles as it goes.

    Ordering is the sorted tile id order.  An absent or empty split directory
    yields an empty list; a tile present in one modality but not the other is
    an error.
    """
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {SPLITS}, got {split!r}")
    root = Path(root)
    split_dir = root / split
    ids = _tile_ids(split_dir)
    if not ids:
        return []

    manifest = None
    if split != "train":
        manifest = read_manifest(split_dir / MANIFEST_NAME)

    pairs = []
    for index, tile_id in enumerate(ids):
        optical = load_image(_find_tile(split_dir / "optical", tile_id))
        sar_path = _find_tile(split_dir / "sar", tile_id)
        sar = load_image(sar_path)
        if sar.shape[0] != 1:
            sar = sar.mean(dim=0, keepdim=True)
        h, w = optical.shape[-2:]

        if manifest is None:
            base = spec or PerturbationSpec()
            tile_spec = replace(base, height=h, width=w)
            rng = np.random.default_rng([tile_spec.seed, index])
            theta = sample_perturbation(tile_spec, rng)
            seed_used = tile_spec.seed
        else:
            if tile_id not in manifest:
                raise DataLoadError(f"tile {tile_id!r} missing from {MANIFEST_NAME}")
            theta, seed_used = manifest[tile_id]

        pairs.append(apply_perturbation(
            optical, sar, theta,
            meta={"source": str(root), "tile_id": tile_id, "split": split,
                  "seed": seed_used}))
    return pairs


# ---------------------------------------------------------------------------
# procedural mini-dataset


def _smooth_background(rng, size, cells=6):
    coarse = rng.uniform(0.25, 0.75, size=(cells, cells)).astype(np.float32)
    t = torch.from_numpy(coarse)[None, None]
    up = torch.nn.functional.interpolate(t, size=(size, size), mode="bilinear",
                                         align_corners=True)
    return up[0, 0].numpy()


def _render_shapes(rng, size):
    """A field of random rectangles, disks and bars with distinct intensities."""
    canvas = _smooth_background(rng, size)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    for _ in range(rng.integers(10, 16)):
        kind = rng.integers(0, 3)
        val = rng.uniform(0.05, 0.95)
        cx, cy = rng.uniform(0.1 * size, 0.9 * size, size=2)
        if kind == 0:        # disk
            r = rng.uniform(0.04, 0.14) * size
            inside = (xs - cx) ** 2 + (ys - cy) ** 2 < r * r
        elif kind == 1:      # rotated rectangle
            ang = rng.uniform(0, math.pi)
            hw, hh = rng.uniform(0.05, 0.2, size=2) * size
            u = (xs - cx) * math.cos(ang) + (ys - cy) * math.sin(ang)
            v = -(xs - cx) * math.sin(ang) + (ys - cy) * math.cos(ang)
            inside = (np.abs(u) < hw) & (np.abs(v) < hh)
        else:                # bar
            ang = rng.uniform(0, math.pi)
            width = rng.uniform(0.01, 0.03) * size
            d = (xs - cx) * math.sin(ang) - (ys - cy) * math.cos(ang)
            inside = np.abs(d) < width
        canvas = np.where(inside, val, canvas)
    return canvas.astype(np.float32)


def _speckle(rng, intensity, looks=4.0):
    noise = rng.gamma(looks, 1.0 / looks, size=intensity.shape).astype(np.float32)
    return np.clip(intensity * noise, 0.0, 1.0)


def render_tile(rng, size) -> tuple[np.ndarray, np.ndarray]:
    """One aligned pseudo-optical (3, s, s) / pseudo-SAR (1, s, s) pair."""
    scene = _render_shapes(rng, size)
    optical = np.stack([
        np.clip(scene * 0.9 + 0.05, 0, 1),
        np.clip(scene * 0.8 + 0.12, 0, 1),
        np.clip(scene * 0.7 + 0.18, 0, 1),
    ])
    gy, gx = np.gradient(scene)
    edges = np.clip(np.hypot(gx, gy) * 4.0, 0, 1)
    radiometry = np.clip(0.15 + 0.55 * (1.0 - scene) + 0.4 * edges, 0, 1)
    sar = _speckle(rng, radiometry)[None]
    return optical.astype(np.float32), sar.astype(np.float32)


def generate_mini_dataset(root, counts: dict[str, int] | None = None,
                          size: int = 128, seed: int = 0,
                          spec: PerturbationSpec | None = None) -> None:
    """Write a small fully synthetic dataset in the expected layout.

    Defaults to 16 pairs total (8 train / 4 val / 4 test).  Val and test get
    fixed perturbation manifests; train perturbations are sampled at load time.
    """
    counts = counts or {"train": 8, "val": 4, "test": 4}
    root = Path(root)
    rng = np.random.default_rng(seed)
    for split, n in counts.items():
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        (root / split / "optical").mkdir(parents=True, exist_ok=True)
        (root / split / "sar").mkdir(parents=True, exist_ok=True)
        entries = {}
        for i in range(n):
            tile_id = f"tile_{i:03d}"
            optical, sar = render_tile(rng, size)
            save_image(torch.from_numpy(optical), root / split / "optical" / f"{tile_id}.png")
            save_image(torch.from_numpy(sar), root / split / "sar" / f"{tile_id}.png")
            if split != "train":
                base = spec or PerturbationSpec()
                tile_seed = int(rng.integers(0, 2 ** 31))
                tile_spec = replace(base, height=size, width=size, seed=tile_seed)
                entries[tile_id] = (sample_perturbation(tile_spec), tile_seed)
        if entries:
            write_manifest(root / split / MANIFEST_NAME, entries)
