"""Config files: JSON documents validated against the shipped schemas."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .encoder import EncoderConfig
from .fpid import PositionMode
from .pipeline import PHASE_ORDER, PhaseConfig, default_trainable_groups
from .schemas import SchemaValidationError, validate
from .vlm import DecoderConfig, VisionLanguageModel


class ConfigError(ValueError):
    pass


def _load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}")


def model_configs(model: dict) -> tuple[EncoderConfig, DecoderConfig]:
    enc = EncoderConfig(
        tile_px=model.get("tile_px", 336),
        patch_px=model.get("patch_px", 14),
        d_v=model.get("d_v", 64),
        n_layers=model.get("encoder_layers", 2),
        n_heads=model.get("encoder_heads", 4),
    )
    dec = DecoderConfig(
        d_m=model.get("d_m", 128),
        n_layers=model.get("decoder_layers", 4),
        n_heads=model.get("decoder_heads", 4),
        vocab=model.get("vocab", 512),
        rope_base=model.get("rope_base", 10000.0),
        ffn_mult=model.get("ffn_mult", 4),
    )
    return enc, dec


def build_model(model_section: dict | None, seed: int) -> VisionLanguageModel:
    enc, dec = model_configs(model_section or {})
    return VisionLanguageModel(enc, dec, seed=seed)


@dataclass
class TrainConfig:
    seed: int
    model: dict
    phases: list[PhaseConfig]


def load_train_config(path: str | Path) -> TrainConfig:
    doc = _load_json(path)
    try:
        validate(doc, "train_config")
    except SchemaValidationError as exc:
        raise ConfigError(str(exc))
    order = [PHASE_ORDER.index(p["phase"]) for p in doc["phases"]]
    if order != sorted(order) or len(set(order)) != len(order):
        raise ConfigError(
            "field 'phases': phases must appear at most once each, "
            "in alignment < multitask < sft order"
        )
    default_window = doc.get("merge_window_train", 2)
    phases = []
    for i, section in enumerate(doc["phases"]):
        groups = section.get("trainable_groups")
        try:
            phases.append(
                PhaseConfig(
                    phase=section["phase"],
                    steps=section["steps"],
                    batch_size=section["batch_size"],
                    base_lr=section["base_lr"],
                    momentum=section.get("momentum", 0.0),
                    merge_window=section.get("merge_window", default_window),
                    position_mode=PositionMode(section.get("position_mode", "shared_fpid")),
                    encoder_layer_decay=section.get("encoder_layer_decay", 1.0),
                    seed=section.get("seed", doc["seed"] + i),
                    image_px=section.get("image_px", 336),
                    prefetch=section.get("prefetch", True),
                    trainable_groups=(
                        frozenset(groups) if groups is not None
                        else default_trainable_groups(section["phase"])
                    ),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"field 'phases/{i}': {exc}")
    return TrainConfig(seed=doc["seed"], model=doc.get("model", {}), phases=phases)


@dataclass
class EvalConfig:
    seed: int = 99
    n_samples: int = 16
    kinds: tuple[str, ...] = ("image_caption", "video_caption")
    merge_windows: tuple[int, ...] = (1, 3)
    position_mode: PositionMode = PositionMode.SHARED_FPID
    image_px: int = 336
    timing_repeats: int = 5
    timing_frames: int | None = None
    dtype: str = "float64"
    model: dict | None = None


def load_eval_config(path: str | Path) -> EvalConfig:
    doc = _load_json(path)
    try:
        validate(doc, "eval_config")
    except SchemaValidationError as exc:
        raise ConfigError(str(exc))
    return EvalConfig(
        seed=doc.get("seed", 99),
        n_samples=doc.get("n_samples", 16),
        kinds=tuple(doc.get("kinds", ["image_caption", "video_caption"])),
        merge_windows=tuple(doc.get("merge_window_eval", [1, 3])),
        position_mode=PositionMode(doc.get("position_mode", "shared_fpid")),
        image_px=doc.get("image_px", 336),
        timing_repeats=doc.get("timing_repeats", 5),
        timing_frames=doc.get("timing_frames"),
        dtype=doc.get("dtype", "float64"),
        model=doc.get("model"),
    )
