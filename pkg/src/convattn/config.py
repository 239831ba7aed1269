"""Flat key=value run configuration files.

Example::

    # model
    num_layers=4
    model_dim=64
    num_heads=4
    attention_window=inf:2
    # schedule
    warmup_steps=400
    lr_multiplier=1.0
    # run
    data=data/train
    out_dir=runs/exp1
    epochs=5
    frames_per_batch=2000
    seed=1

``attention_window`` is a single ``left:right`` window applied to every
layer, or a comma-separated per-layer list. ``inf`` marks an unrestricted
side. Lines starting with ``#`` and blank lines are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig, TimeWindow
from .training import ScheduleConfig


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_windows(s: str):
    return [TimeWindow.parse(part) for part in s.split(",")]


_MODEL_KEYS = {
    "num_layers": int,
    "model_dim": int,
    "num_heads": int,
    "ffn_dim": int,
    "kernel_size": int,
    "feature_dim": int,
    "output_dim": int,
    "use_positional_encoding": _parse_bool,
    "pe_scale": float,
    "use_conv": _parse_bool,
    "conv_residual": _parse_bool,
    "extra_final_norm": _parse_bool,
    "dropout_p": float,
    "block_order": str,
    "attention_window": _parse_windows,
}

_RUN_KEYS = {
    "warmup_steps": int,
    "lr_multiplier": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_eps": float,
    "grad_clip": float,
    "epochs": int,
    "frames_per_batch": int,
    "seed": int,
    "data": str,
    "out_dir": str,
    "log_interval": int,
    "patience": int,
    "apply_cmvn": _parse_bool,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    warmup_steps: int = 400
    lr_multiplier: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: Optional[float] = None
    epochs: int = 5
    frames_per_batch: int = 2000
    seed: Optional[int] = None  # must be set explicitly; no wall-clock default
    data: Optional[str] = None
    out_dir: Optional[str] = None
    log_interval: int = 20
    patience: Optional[int] = None
    apply_cmvn: bool = True

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(model_dim=self.model.model_dim,
                              warmup_steps=self.warmup_steps,
                              multiplier=self.lr_multiplier)


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    model_kw = {}
    run_kw = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        try:
            if key in _MODEL_KEYS:
                if key in model_kw:
                    raise ConfigError(f"duplicate key {key!r}")
                model_kw[key] = _MODEL_KEYS[key](value)
            elif key in _RUN_KEYS:
                if key in run_kw:
                    raise ConfigError(f"duplicate key {key!r}")
                run_kw[key] = _RUN_KEYS[key](value)
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: field {key!r}: {e}") from None
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: field {key!r}: {e}") from None
    model = ModelConfig(**model_kw)
    if "attention_window" in model_kw and len(model_kw["attention_window"]) == 1:
        model.attention_window = model_kw["attention_window"][0]
    return RunConfig(model=model, **run_kw)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_run_config(path.read_text(), source=str(path))
