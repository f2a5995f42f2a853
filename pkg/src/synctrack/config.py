"""Line-oriented `key = value` run configuration.

Every tracker knob has a documented key whose default matches the reference
operating point. `#` starts a comment; unknown keys, unparsable values and
missing files are rejected with the offending key and line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .bevhead import VoxelGridConfig
from .tracker import TrackerConfig


class ConfigError(ValueError):
    pass


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered not in ("true", "false"):
        raise ValueError(f"expected true or false, got {text!r}")
    return lowered == "true"


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(","))


def _parse_float_pair(text: str) -> tuple[float, float]:
    parts = [float(part) for part in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated reals, got {text!r}")
    return (parts[0], parts[1])


def _parse_choice(*choices: str):
    def parse(text: str) -> str:
        if text not in choices:
            raise ValueError(f"expected one of {choices}, got {text!r}")
        return text

    return parse


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Flat, file-backed view of TrackerConfig plus the voxel grid."""

    n_template: int = 512
    n_search: int = 1024
    heads: int = 2
    channels: tuple[int, ...] = (32, 64, 128)
    tokens: tuple[int, ...] = (256, 128, 64)
    knn_k: int = 16
    head_channels: int = 32
    voxel: float = 0.3
    range_x: tuple[float, float] = (-5.6, 5.6)
    range_y: tuple[float, float] = (-3.6, 3.6)
    range_z: tuple[float, float] = (-2.4, 2.4)
    epochs: int = 40
    batch: int = 64
    lr: float = 0.001
    lr_decay: float = 5.0
    lr_decay_every: int = 10
    loss_cls: float = 1.0
    loss_offset: float = 1.0
    loss_z: float = 2.0
    mask_radius: float = 2.0
    enlarge_xy: float = 2.0
    enlarge_z: float = 1.0
    attentive_softmax: bool = False
    min_search_points: int = 5
    jitter_translation: float = 0.3
    jitter_yaw_deg: float = 5.0
    seed: int = 0
    precision: str = "single"


_RUN_PARSERS = {
    "n_template": _parse_int,
    "n_search": _parse_int,
    "heads": _parse_int,
    "channels": _parse_int_tuple,
    "tokens": _parse_int_tuple,
    "knn_k": _parse_int,
    "head_channels": _parse_int,
    "voxel": _parse_float,
    "range_x": _parse_float_pair,
    "range_y": _parse_float_pair,
    "range_z": _parse_float_pair,
    "epochs": _parse_int,
    "batch": _parse_int,
    "lr": _parse_float,
    "lr_decay": _parse_float,
    "lr_decay_every": _parse_int,
    "loss_cls": _parse_float,
    "loss_offset": _parse_float,
    "loss_z": _parse_float,
    "mask_radius": _parse_float,
    "enlarge_xy": _parse_float,
    "enlarge_z": _parse_float,
    "attentive_softmax": _parse_bool,
    "min_search_points": _parse_int,
    "jitter_translation": _parse_float,
    "jitter_yaw_deg": _parse_float,
    "seed": _parse_int,
    "precision": _parse_choice("single", "double"),
}


def parse_keyvalue_file(path: str, parsers: dict) -> dict:
    """Generic `key = value` reader shared by run and scene configurations."""
    if not os.path.isfile(path):
        raise ConfigError(f"{path}: no such config file")
    values: dict = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected `key = value` (line {lineno})")
            key, _, text = line.partition("=")
            key, text = key.strip(), text.strip()
            if key not in parsers:
                raise ConfigError(f"unknown key {key!r} (line {lineno})")
            try:
                values[key] = parsers[key](text)
            except ValueError as exc:
                raise ConfigError(
                    f"invalid value for key {key!r} (line {lineno}): {exc}"
                ) from exc
    return values


def parse_config(path: str) -> RunConfig:
    """Read a run configuration; absent keys keep their defaults."""
    return RunConfig(**parse_keyvalue_file(path, _RUN_PARSERS))


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; re-parsing it yields an equal RunConfig."""
    lines = [f"{f.name} = {_fmt(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def to_tracker_config(cfg: RunConfig) -> TrackerConfig:
    grid = VoxelGridConfig(
        cfg.range_x, cfg.range_y, cfg.range_z, (cfg.voxel,) * 3
    )
    return TrackerConfig(
        n_template=cfg.n_template,
        n_search=cfg.n_search,
        heads=cfg.heads,
        channels=cfg.channels,
        tokens=cfg.tokens,
        knn_k=cfg.knn_k,
        head_channels=cfg.head_channels,
        grid=grid,
        enlarge_xy=cfg.enlarge_xy,
        enlarge_z=cfg.enlarge_z,
        loss_weights=(cfg.loss_cls, cfg.loss_offset, cfg.loss_z),
        mask_radius=cfg.mask_radius,
        epochs=cfg.epochs,
        batch=cfg.batch,
        lr=cfg.lr,
        lr_decay=cfg.lr_decay,
        lr_decay_every=cfg.lr_decay_every,
        attentive_softmax=cfg.attentive_softmax,
        min_search_points=cfg.min_search_points,
        jitter_translation=cfg.jitter_translation,
        jitter_yaw_deg=cfg.jitter_yaw_deg,
        seed=cfg.seed,
        precision=cfg.precision,
    )


def _parse_float_triple(text: str) -> tuple[float, float, float]:
    parts = [float(part) for part in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated reals, got {text!r}")
    return (parts[0], parts[1], parts[2])


_SCENE_PARSERS = {
    "sequences": _parse_int,
    "frames": _parse_int,
    "extents": _parse_float_triple,
    "surface_density": _parse_float,
    "clutter_density": _parse_float,
    "noise_sigma": _parse_float,
    "speed_min": _parse_float,
    "speed_max": _parse_float,
    "yaw_rate_max": _parse_float,
}


def parse_scene_spec(path: str) -> "SceneFamilySpec":
    from .synthdata import SceneFamilySpec

    return SceneFamilySpec(**parse_keyvalue_file(path, _SCENE_PARSERS))
