"""Training loop, evaluation pass, and one-shot registration.

Runs are deterministic by construction: global seeding up front, an epoch-keyed
perturbation seed for the train split, and checkpoints that carry optimizer and
RNG state so a resumed run continues bit-for-bit.
"""

from __future__ import annotations

import csv
import hashlib
import math
import random
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim import AdamW

from .config import RunConfig, save_config, serialize
from .data import (ImagePair, PerturbationSpec, load_dataset, load_image,
                   save_image)
from .errors import DataLoadError, DivergenceError
from .geometry import DisplacementField, save_field, warp
from .losses import LossBreakdown, total_loss
from .metrics import EvalRecord, make_record, report
from .model import AblationFlags, SomaModel

LOG_NAME = "train_log.csv"
LOG_HEADER = ("epoch", "step", "warp", "cons", "cert", "delta", "uni",
              "total", "lr")
CHECKPOINT_NAME = "last.pt"


def set_determinism(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


def model_from_config(cfg: RunConfig) -> SomaModel:
    flags = AblationFlags(dino=cfg.dino, fge=cfg.fge, glam=cfg.glam)
    return SomaModel(widths=cfg.channels, flags=flags,
                     optical_channels=cfg.optical_channels,
                     sar_channels=cfg.sar_channels,
                     affine_levels=cfg.affine_levels,
                     flow_levels=cfg.flow_levels,
                     coarse_seed=cfg.coarse_seed)


def spec_from_config(cfg: RunConfig, seed: int | None = None) -> PerturbationSpec:
    return PerturbationSpec(max_translation_px=cfg.max_translation_px,
                            scale_delta=cfg.scale_delta,
                            max_rotation_deg=cfg.max_rotation_deg,
                            height=cfg.image_size, width=cfg.image_size,
                            seed=cfg.seed if seed is None else seed)


def _collate(pairs: list[ImagePair]):
    optical = torch.stack([p.optical for p in pairs])
    sar = torch.stack([p.sar for p in pairs])
    gt = torch.stack([p.gt_field.data for p in pairs])
    return optical, sar, gt


def save_checkpoint(path, model: SomaModel, optimizer, epoch: int,
                    global_step: int, cfg: RunConfig) -> None:
    text = serialize(cfg)
    torch.save({
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "epoch": epoch,
        "global_step": global_step,
        "config": text,
        "config_hash": hashlib.sha256(text.encode()).hexdigest(),
        "rng": {
            "python": random.getstate(),
            "numpy": np.random.get_state(),
            "torch": torch.get_rng_state(),
        },
    }, path)


def load_checkpoint(path, model: SomaModel | None = None, optimizer=None,
                    restore_rng: bool = False) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"checkpoint not found: {path}")
    state = torch.load(path, weights_only=False)
    if model is not None:
        model.load_state_dict(state["model"])
    if optimizer is not None:
        optimizer.load_state_dict(state["optimizer"])
    if restore_rng:
        rng = state["rng"]
        random.setstate(rng["python"])
        np.random.set_state(rng["numpy"])
        torch.set_rng_state(rng["torch"])
    return state


def _check_finite(breakdown: LossBreakdown, epoch: int, step: int) -> None:
    for name, value in breakdown.as_floats().items():
        if not math.isfinite(value):
            raise DivergenceError(
                f"loss term {name!r} became {value} at epoch {epoch} step {step}")


def train(cfg: RunConfig, run_dir, max_steps: int | None = None,
          resume=None) -> tuple[SomaModel, list[dict[str, float]]]:
    """Run (or continue) training; returns the model and per-step loss rows."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.cfg")
    set_determinism(cfg.seed, cfg.deterministic)

    model = model_from_config(cfg)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)

    start_epoch, global_step = 0, 0
    if resume is not None:
        state = load_checkpoint(resume, model, optimizer, restore_rng=True)
        start_epoch, global_step = state["epoch"], state["global_step"]

    log_path = run_dir / LOG_NAME
    log_mode = "a" if resume is not None and log_path.exists() else "w"
    history: list[dict[str, float]] = []
    weights = cfg.loss_weights()
    model.train()

    with open(log_path, log_mode, newline="") as log_file:
        log = csv.writer(log_file)
        if log_mode == "w":
            log.writerow(LOG_HEADER)
        for epoch in range(start_epoch, cfg.epochs):
            pairs = load_dataset(cfg.data_root, "train",
                                 spec_from_config(cfg, seed=cfg.seed + epoch))
            if not pairs:
                raise DataLoadError(f"no training tiles under {cfg.data_root}")
            steps_per_epoch = math.ceil(len(pairs) / cfg.batch_size)
            warmup_steps = max(1, cfg.warmup_epochs * steps_per_epoch)
            # a mid-epoch checkpoint resumes at the first unseen batch
            done = min(max(global_step - epoch * steps_per_epoch, 0),
                       steps_per_epoch)
            for start in range(done * cfg.batch_size, len(pairs),
                               cfg.batch_size):
                optical, sar, gt = _collate(pairs[start:start + cfg.batch_size])
                result = model(optical, sar)
                breakdown = total_loss(result, gt, weights=weights)
                _check_finite(breakdown, epoch, global_step)

                lr = cfg.lr * min(1.0, (global_step + 1) / warmup_steps)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()

                row = breakdown.as_floats()
                row.update(epoch=epoch, step=global_step, lr=lr)
                history.append(row)
                log.writerow([row[k] for k in LOG_HEADER])
                global_step += 1
                if max_steps is not None and global_step >= max_steps:
                    save_checkpoint(run_dir / CHECKPOINT_NAME, model, optimizer,
                                    epoch, global_step, cfg)
                    return model, history
            save_checkpoint(run_dir / f"checkpoint_{epoch + 1:04d}.pt", model,
                            optimizer, epoch + 1, global_step, cfg)
            save_checkpoint(run_dir / CHECKPOINT_NAME, model, optimizer,
                            epoch + 1, global_step, cfg)
    return model, history


def evaluate(cfg: RunConfig, run_dir, checkpoint=None, split: str = "test",
             method: str = "soma",
             model: SomaModel | None = None) -> tuple[list[EvalRecord], Path]:
    """Score a split against its fixed manifest and refresh the report CSVs."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    set_determinism(cfg.seed, cfg.deterministic)
    if model is None:
        model = model_from_config(cfg)
        if checkpoint is not None:
            load_checkpoint(checkpoint, model)
    model.eval()

    pairs = load_dataset(cfg.data_root, split, spec_from_config(cfg))
    if not pairs:
        raise DataLoadError(f"no {split} tiles under {cfg.data_root}")
    records = []
    with torch.no_grad():
        for i, pair in enumerate(pairs):
            result = model(pair.optical[None], pair.sar[None],
                           with_certainty=False)
            pair_id = pair.meta.get("tile_id", f"{split}_{i:04d}")
            records.append(make_record(pair_id, result.final_field[0],
                                       pair.gt_field.data, pair.mask))
    return records, report(records, run_dir, method=method)


def register(model: SomaModel, optical: torch.Tensor,
             sar: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Align one pair: returns the optical image resampled onto the SAR frame
    and the estimated level-1 field.  Inputs of any size are replicate-padded
    to the next multiple of 16 and the outputs cropped back."""
    unbatched = optical.ndim == 3
    if unbatched:
        optical, sar = optical[None], sar[None]
    h, w = optical.shape[-2:]
    pad_h, pad_w = (-h) % 16, (-w) % 16
    optical_in, sar_in = optical, sar
    if pad_h or pad_w:
        optical_in = F.pad(optical, (0, pad_w, 0, pad_h), mode="replicate")
        sar_in = F.pad(sar, (0, pad_w, 0, pad_h), mode="replicate")
    model.eval()
    with torch.no_grad():
        result = model(optical_in, sar_in, with_certainty=False)
    field = result.final_field[:, :h, :w]
    warped = warp(optical, field, padding="border")
    if unbatched:
        return warped[0], field[0]
    return warped, field


def register_files(cfg: RunConfig, checkpoint, optical_path, sar_path,
                   out_dir) -> tuple[Path, Path]:
    """File-level wrapper around :func:`register`; writes the resampled
    optical raster and the field in the package's flow container."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = model_from_config(cfg)
    if checkpoint is not None:
        load_checkpoint(checkpoint, model)
    optical = load_image(optical_path)
    sar = load_image(sar_path)
    warped, field = register(model, optical, sar)
    raster_path = out_dir / "registered_optical.png"
    field_path = out_dir / "field.fld"
    save_image(warped.clamp(0.0, 1.0), raster_path)
    save_field(DisplacementField(field, 1), field_path)
    return raster_path, field_path
