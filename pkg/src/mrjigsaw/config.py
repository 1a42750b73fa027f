"""Run configuration: every block of a command in one JSON document."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import SyntheticSpec
from .models import DownstreamModelConfig, PretextModelConfig
from .patchgen import Geometry
from .training import DownstreamTrainConfig, PretextTrainConfig

ENV_STORE = "MRJIGSAW_STORE"
ENV_RUNS = "MRJIGSAW_RUNS"


class ConfigError(ValueError):
    """Config failed validation; ``messages`` holds one line per offending field."""

    def __init__(self, messages: list[str]):
        self.messages = messages
        super().__init__("\n".join(messages))


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeometryConfig(_Block):
    frame_size: int = Field(256, ge=24)
    patch_size: int = Field(64, ge=8)

    def build(self) -> Geometry:
        return Geometry(frame_size=self.frame_size, patch_size=self.patch_size)


class PermsetConfig(_Block):
    n_patches: int = 9
    threshold: int = 4
    classes: int = Field(500, ge=1)
    file: str | None = None


class EvalConfig(_Block):
    n_bootstrap: int = Field(1000, ge=10)
    level: float = Field(0.90, gt=0, lt=1)
    threshold: float = 0.5


class RunConfig(_Block):
    seed: int = 0
    store: str | None = None
    runs_dir: str | None = None
    width_divisor: int = Field(1, ge=1)
    geometry: GeometryConfig = GeometryConfig()
    permset: PermsetConfig = PermsetConfig()
    pretext_model: PretextModelConfig = PretextModelConfig()
    downstream_model: DownstreamModelConfig = DownstreamModelConfig()
    pretext_train: PretextTrainConfig = PretextTrainConfig()
    downstream_train: DownstreamTrainConfig = DownstreamTrainConfig()
    eval: EvalConfig = EvalConfig()
    synthetic: SyntheticSpec | None = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.pretext_model.patch_size != self.geometry.patch_size:
            raise ValueError(
                f"pretext_model.patch_size {self.pretext_model.patch_size} != geometry.patch_size {self.geometry.patch_size}"
            )
        if self.downstream_model.frame_size != self.geometry.frame_size:
            raise ValueError(
                f"downstream_model.frame_size {self.downstream_model.frame_size} != geometry.frame_size {self.geometry.frame_size}"
            )
        self.geometry.build()
        return self

    def resolved_pretext_model(self) -> PretextModelConfig:
        cfg = self.pretext_model.model_copy(update={"class_count": self.permset.classes})
        return cfg.scaled(self.width_divisor) if self.width_divisor > 1 else cfg

    def resolved_downstream_model(self) -> DownstreamModelConfig:
        cfg = self.downstream_model.model_copy(update={"frame_cap": self.downstream_train.frame_cap})
        return cfg.scaled(self.width_divisor) if self.width_divisor > 1 else cfg

    def resolved_store(self) -> Path | None:
        store = os.environ.get(ENV_STORE) or self.store
        return Path(store) if store else None

    def resolved_runs_dir(self) -> Path:
        return Path(os.environ.get(ENV_RUNS) or self.runs_dir or "runs")


def _messages(exc: ValidationError) -> list[str]:
    return [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]


def parse_config(doc: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_messages(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    return parse_config(doc)


def parse_block(model: type[BaseModel], doc: dict):
    try:
        return model.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_messages(exc)) from exc


def derive_seed(seed: int, name: str) -> int:
    """Module seed = first 4 bytes of sha256("<seed>:<name>")."""
    return int.from_bytes(hashlib.sha256(f"{seed}:{name}".encode()).digest()[:4], "little")


def toy_config(**overrides) -> RunConfig:
    """Desk-scale preset: 128 px frames, 32 px patches, widths / 8, ten classes."""
    doc = {
        "seed": 0,
        "width_divisor": 8,
        "geometry": {"frame_size": 128, "patch_size": 32},
        "permset": {"classes": 10},
        "pretext_model": {"patch_size": 32},
        "downstream_model": {"frame_size": 128},
        "pretext_train": {"max_epochs": 30},
        "downstream_train": {"lr": 1e-4, "max_epochs": 10, "frame_cap": 9, "monitor": "val_auc"},
        "synthetic": {"n_per_class": 100, "frame_size": 128, "frames_min": 6, "frames_max": 10},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key] = {**doc[key], **value}
        else:
            doc[key] = value
    return parse_config(doc)
