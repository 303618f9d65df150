"""Training configuration and its line-based ``key = value`` file format.

Keys are dotted: ``model.embed_dim = 32``, ``sft.lam = 1.0``, ``vlpo.G = 8``.
Top-level keys (``K``, ``seed``, ``out_dir``) carry no section. ``#`` starts a
comment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .synth import TaskConfig
from .vlpo import VlpoConfig


class ConfigError(ValueError):
    pass


@dataclass
class SftConfig:
    epochs: int = 20
    lam: float = 1.0
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    eval_size: int = 500
    align_to_visual: bool = False  # True: alignment also trains the visual pathway


@dataclass
class StageTwoConfig:
    steps: int = 300
    lr: float = 1e-4
    prompts_per_step: int = 4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    kl_ceiling: float = 1.0
    eval_size: int = 500


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    vlpo: VlpoConfig = field(default_factory=VlpoConfig)
    stage2: StageTwoConfig = field(default_factory=StageTwoConfig)
    K: int = 8
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self) -> None:
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.model.n_glyphs != self.task.n_glyphs:
            raise ConfigError("model.n_glyphs and task.n_glyphs disagree")
        if self.model.image_side != self.task.image_side or self.model.patch_size != self.task.patch_size:
            raise ConfigError("model and task image geometry disagree")
        self.task.validate()
        self.vlpo.validate()
        if self.vlpo.K != self.K:
            self.vlpo.K = self.K

    def with_seed(self, seed: int) -> "TrainConfig":
        cfg = dataclasses.replace(self, seed=seed, model=dataclasses.replace(self.model, seed=seed))
        return cfg


_SECTIONS = ("model", "task", "sft", "vlpo", "stage2")


def _coerce(raw: str, current, key: str, lineno: int):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("true", "on", "yes", "1"):
            return True
        if raw.lower() in ("false", "off", "no", "0"):
            return False
        raise ConfigError(f"line {lineno}: {key} expects a boolean, got {raw!r}")
    try:
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {type(current).__name__}, got {raw!r}") from None
    return raw.strip("\"'")


def set_key(cfg: TrainConfig, key: str, raw: str, lineno: int = 0) -> None:
    parts = key.split(".")
    if len(parts) == 1:
        target, name = cfg, parts[0]
    elif len(parts) == 2 and parts[0] in _SECTIONS:
        target, name = getattr(cfg, parts[0]), parts[1]
    else:
        raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if name not in {f.name for f in dataclasses.fields(target)} or name in _SECTIONS:
        raise ConfigError(f"line {lineno}: unknown key {key!r}")
    object.__setattr__(target, name, _coerce(raw, getattr(target, name), key, lineno))


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base if base is not None else TrainConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        set_key(cfg, key.strip(), raw, lineno)
    # keep the shared symbols in sync
    cfg.vlpo.K = cfg.K
    cfg.model.n_glyphs = cfg.task.n_glyphs
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> TrainConfig:
    if path is None:
        cfg = TrainConfig()
        cfg.validate()
        return cfg
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if dataclasses.is_dataclass(val):
            for g in dataclasses.fields(val):
                lines.append(f"{f.name}.{g.name} = {getattr(val, g.name)}")
        else:
            lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"
