"""Experiment configuration: a flat ``key = value`` text file plus overrides.

Values are Python literals (``3``, ``0.07``, ``[2, 3, 4]``, ``true``); bare
words are read as strings.  Unknown keys are rejected.
"""
from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable

from .backbone import BackboneConfig
from .data import TASKS, SyntheticTaskSpec
from .hub import FAMILIES, GATE_AXES, SimilarityConfig
from .model import MODES, LayerSchedule


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass(frozen=True)
class ExperimentConfig:
    # backbone
    n_layers: int = 6
    d_vision: int = 32
    d_text: int = 32
    n_heads: int = 4
    mlp_ratio: int = 2
    vocab_size: int = 64
    channels: int = 1
    image_size: int = 8
    patch_size: int = 4
    text_len: int = 8
    backbone_seed: int = 0
    # prompts and interaction
    mode: str = "epic"
    interaction_layers: tuple = (2, 3, 4)
    prompt_len: int = 3
    similarity: str = "cos"
    gate_axis: str = "feature"
    mmd_bandwidth: float = 0.0  # 0 selects the median heuristic
    gate_temperature: float = 1.0
    # task
    task: str = "uni"
    n_classes: int = 4
    n_train: int = 256
    n_val: int = 128
    n_test: int = 256
    noise: float = 0.3
    pixel_noise: float = 0.5
    token_noise: float = 0.2
    # classifier and objective
    tau: float = 0.07
    tau_trainable: bool = False
    literal_losses: bool = False
    # optimisation
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    # ----------------------------------------------------------- validation

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            object.__setattr__(self, f.name, _coerce(f.name, f.type, value))
        positive = ("n_layers", "d_vision", "d_text", "n_heads", "mlp_ratio", "vocab_size",
                    "channels", "image_size", "patch_size", "text_len", "n_train", "n_val",
                    "n_test", "epochs", "batch_size")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.prompt_len < 1:
            raise ConfigError("prompt_len", "must be >= 1")
        for key in ("d_vision", "d_text"):
            if getattr(self, key) % self.n_heads:
                raise ConfigError(key, f"must be divisible by n_heads={self.n_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size", f"not divisible by patch_size={self.patch_size}")
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}")
        if self.similarity not in FAMILIES:
            raise ConfigError("similarity", f"must be one of {FAMILIES}")
        if self.gate_axis not in GATE_AXES:
            raise ConfigError("gate_axis", f"must be one of {GATE_AXES}")
        if self.task not in TASKS:
            raise ConfigError("task", f"must be one of {TASKS}")
        if self.optimizer != "adam":
            raise ConfigError("optimizer", "only 'adam' is supported")
        bad = [l for l in self.interaction_layers if not 0 <= l < self.n_layers]
        if bad:
            raise ConfigError("interaction_layers",
                              f"indices {bad} outside [0, {self.n_layers})")
        if len(set(self.interaction_layers)) != len(self.interaction_layers):
            raise ConfigError("interaction_layers", "duplicate indices")
        if self.mode != "baseline" and not self.interaction_layers:
            raise ConfigError("interaction_layers", f"mode {self.mode} needs at least one")
        if not 0.0 <= self.noise < 0.5:
            raise ConfigError("noise", "must lie in [0, 0.5)")
        if self.tau <= 0:
            raise ConfigError("tau", "must be positive")
        if self.mmd_bandwidth < 0:
            raise ConfigError("mmd_bandwidth", "must be >= 0")
        if self.gate_temperature <= 0:
            raise ConfigError("gate_temperature", "must be positive")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")

    # -------------------------------------------------------------- derived

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            n_layers=self.n_layers, d_vision=self.d_vision, d_text=self.d_text,
            n_heads=self.n_heads, mlp_ratio=self.mlp_ratio, vocab_size=self.vocab_size,
            channels=self.channels, image_size=self.image_size, patch_size=self.patch_size,
            text_len=self.text_len, seed=self.backbone_seed)

    @property
    def schedule(self) -> LayerSchedule:
        layers = () if self.mode == "baseline" else self.interaction_layers
        return LayerSchedule(layers, self.n_layers)

    @property
    def similarity_config(self) -> SimilarityConfig:
        return SimilarityConfig(self.similarity, self.gate_axis,
                                self.mmd_bandwidth or None, self.gate_temperature)

    @property
    def task_spec(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(self.task, self.n_classes, self.n_train, self.n_val,
                                 self.n_test, self.noise, self.pixel_noise, self.token_noise,
                                 self.seed)

    @property
    def run_id(self) -> str:
        layers = "-".join(str(l) for l in self.schedule.interaction_layers) or "none"
        return f"{self.mode}_{self.similarity}_L{layers}_s{self.seed}"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, overrides: Iterable[str]) -> "ExperimentConfig":
        changes = {}
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(item, "override must look like key=value")
            key = key.strip()
            _check_key(key)
            changes[key] = parse_value(raw)
        return self.replace(**changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        values: dict[str, Any] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
            key = key.strip()
            _check_key(key)
            values[key] = parse_value(raw)
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


_KEYS = {f.name for f in fields(ExperimentConfig)}


def _check_key(key: str) -> None:
    if key not in _KEYS:
        raise ConfigError(key, "unknown key")


def parse_value(raw: str) -> Any:
    raw = raw.strip()
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def _coerce(key: str, typ: str, value: Any) -> Any:
    if typ == "bool":
        if isinstance(value, bool):
            return value
        raise ConfigError(key, f"expected true/false, got {value!r}")
    if typ == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if typ == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if typ == "tuple":
        if isinstance(value, int) and not isinstance(value, bool):
            value = (value,)
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(key, f"expected a list of integers, got {value!r}")
        return tuple(value)
    if typ == "str":
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value
