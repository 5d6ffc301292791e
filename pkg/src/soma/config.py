"""Run configuration: a flat dataclass with plain-text serialization.

The on-disk format is one ``dotted.key=value`` pair per line, ``#`` comments
allowed.  Serialization writes every effective value (no hidden defaults) and
parsing starts from defaults, so presets may be partial but run directories
always carry the complete picture.  Floats round-trip exactly via repr.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

from .encoder import DEFAULT_WIDTHS
from .errors import ConfigurationError
from .geometry import LEVELS
from .glam import DEFAULT_AFFINE_LEVELS, DEFAULT_FLOW_LEVELS
from .losses import DEFAULT_LEVEL_WEIGHTS, LossWeights


@dataclass(frozen=True)
class RunConfig:
    # data and perturbation protocol
    data_root: str = "data/mini"
    image_size: int = 128
    max_translation_px: float = 32.0
    scale_delta: float = 0.2
    max_rotation_deg: float = 5.0
    # model
    channels: dict[int, int] = dc_field(default_factory=lambda: dict(DEFAULT_WIDTHS))
    dino: bool = True
    fge: bool = True
    glam: bool = True
    affine_levels: tuple[int, ...] = DEFAULT_AFFINE_LEVELS
    flow_levels: tuple[int, ...] = DEFAULT_FLOW_LEVELS
    optical_channels: int = 3
    sar_channels: int = 1
    coarse_seed: int = 0
    # objective
    lambda_cons: float = 0.5
    alpha_cert: float = 0.1
    alpha_delta: float = 0.1
    alpha_uni: float = 0.1
    level_weights: dict[int, float] = dc_field(
        default_factory=lambda: dict(DEFAULT_LEVEL_WEIGHTS))
    # optimization
    lr: float = 5e-5
    weight_decay: float = 0.01
    epochs: int = 100
    batch_size: int = 4
    warmup_epochs: int = 5
    # run control
    seed: int = 0
    deterministic: bool = True

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_cons=self.lambda_cons,
                           alpha_cert=self.alpha_cert,
                           alpha_delta=self.alpha_delta,
                           alpha_uni=self.alpha_uni,
                           level_weights=dict(self.level_weights))

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str, key: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ConfigurationError(f"{key}: expected true/false, got {text!r}")


def _parse_levels(text: str, key: str) -> tuple[int, ...]:
    if not text:
        return ()
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigurationError(f"{key}: bad level list {text!r}") from exc
    for v in values:
        if v not in LEVELS:
            raise ConfigurationError(f"{key}: {v} is not a pyramid level")
    return values


def serialize(cfg: RunConfig) -> str:
    lines = [
        f"data.root={cfg.data_root}",
        f"data.image_size={cfg.image_size}",
        f"protocol.max_translation_px={_fmt(cfg.max_translation_px)}",
        f"protocol.scale_delta={_fmt(cfg.scale_delta)}",
        f"protocol.max_rotation_deg={_fmt(cfg.max_rotation_deg)}",
    ]
    lines += [f"model.channels.{l}={cfg.channels[l]}" for l in sorted(cfg.channels)]
    lines += [
        f"model.optical_channels={cfg.optical_channels}",
        f"model.sar_channels={cfg.sar_channels}",
        f"model.coarse_seed={cfg.coarse_seed}",
        f"dino.enabled={_fmt(cfg.dino)}",
        f"fge.enabled={_fmt(cfg.fge)}",
        f"glam.enabled={_fmt(cfg.glam)}",
        "glam.affine_levels=" + ",".join(map(str, cfg.affine_levels)),
        "glam.flow_levels=" + ",".join(map(str, cfg.flow_levels)),
        f"loss.lambda_cons={_fmt(cfg.lambda_cons)}",
        f"loss.alpha_cert={_fmt(cfg.alpha_cert)}",
        f"loss.alpha_delta={_fmt(cfg.alpha_delta)}",
        f"loss.alpha_uni={_fmt(cfg.alpha_uni)}",
    ]
    lines += [f"loss.level_weights.{l}={_fmt(cfg.level_weights[l])}"
              for l in sorted(cfg.level_weights)]
    lines += [
        f"optim.lr={_fmt(cfg.lr)}",
        f"optim.weight_decay={_fmt(cfg.weight_decay)}",
        f"train.epochs={cfg.epochs}",
        f"train.batch_size={cfg.batch_size}",
        f"train.warmup_epochs={cfg.warmup_epochs}",
        f"run.seed={cfg.seed}",
        f"run.deterministic={_fmt(cfg.deterministic)}",
    ]
    return "\n".join(lines) + "\n"


_SIMPLE_KEYS = {
    "data.root": ("data_root", str),
    "data.image_size": ("image_size", int),
    "protocol.max_translation_px": ("max_translation_px", float),
    "protocol.scale_delta": ("scale_delta", float),
    "protocol.max_rotation_deg": ("max_rotation_deg", float),
    "model.optical_channels": ("optical_channels", int),
    "model.sar_channels": ("sar_channels", int),
    "model.coarse_seed": ("coarse_seed", int),
    "loss.lambda_cons": ("lambda_cons", float),
    "loss.alpha_cert": ("alpha_cert", float),
    "loss.alpha_delta": ("alpha_delta", float),
    "loss.alpha_uni": ("alpha_uni", float),
    "optim.lr": ("lr", float),
    "optim.weight_decay": ("weight_decay", float),
    "train.epochs": ("epochs", int),
    "train.batch_size": ("batch_size", int),
    "train.warmup_epochs": ("warmup_epochs", int),
    "run.seed": ("seed", int),
}

_BOOL_KEYS = {"dino.enabled": "dino", "fge.enabled": "fge",
              "glam.enabled": "glam", "run.deterministic": "deterministic"}

_LEVEL_KEYS = {"glam.affine_levels": "affine_levels",
               "glam.flow_levels": "flow_levels"}


def parse(text: str) -> RunConfig:
    updates: dict = {}
    channels: dict[int, int] = {}
    level_weights: dict[int, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        try:
            if key in _SIMPLE_KEYS:
                attr, cast = _SIMPLE_KEYS[key]
                updates[attr] = cast(value)
            elif key in _BOOL_KEYS:
                updates[_BOOL_KEYS[key]] = _parse_bool(value, key)
            elif key in _LEVEL_KEYS:
                updates[_LEVEL_KEYS[key]] = _parse_levels(value, key)
            elif key.startswith("model.channels."):
                channels[int(key.rsplit(".", 1)[1])] = int(value)
            elif key.startswith("loss.level_weights."):
                level_weights[int(key.rsplit(".", 1)[1])] = float(value)
            else:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        except ConfigurationError:
            raise
        except ValueError as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    if channels:
        updates["channels"] = channels
    if level_weights:
        updates["level_weights"] = level_weights
    return RunConfig(**updates)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return parse(path.read_text())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(serialize(cfg))


def load_preset(name: str) -> RunConfig:
    preset = Path(__file__).parent / "presets" / f"{name}.cfg"
    if not preset.exists():
        raise ConfigurationError(f"no preset named {name!r}")
    return parse(preset.read_text())
