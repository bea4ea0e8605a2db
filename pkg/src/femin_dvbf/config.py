"""Configuration objects, presets and the JSON config file format.

A config file is a JSON object with up to three sections::

    {
      "family":   {... FamilyConfig keys ...},
      "model":    {... DvbfConfig keys (n_b, dim_p are set from data) ...},
      "training": {... TrainConfig keys other than "model" ...}
    }

Unknown keys raise :class:`ConfigError` naming the key.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional, Tuple

from .dvbf import DvbfConfig
from .nn import ConfigError

__all__ = [
    "FamilyConfig",
    "OptimConfig",
    "TrainConfig",
    "PRESETS",
    "preset",
    "load_config",
]


@dataclass(frozen=True)
class FamilyConfig:
    """Mesh and load-case family from which designs are drawn.

    Steel-like defaults: 20 bar elements of 5 mm with a 50 x 3.5 mm section.
    Elements ``0 .. n_replaced-1`` form a weaker zone that the surrogate will
    replace; the remaining elements stay elastic.
    """

    kind: str = "BI"
    n_designs: int = 22
    n_elements: int = 20
    n_replaced: int = 10
    element_length: float = 5e-3
    stiffness: float = 7.35e9
    element_mass: float = 6.87e-3
    weak_yield: float = 30e3
    strong_yield: float = 1e15
    hardening_ratio: float = 0.02
    end_mass: float = 3.0
    T: int = 6000
    dt_fraction: float = 0.5
    # BI
    v_range: Tuple[float, float] = (-30.0, -10.0)
    gap_range: Tuple[float, float] = (0.0, 5e-3)
    penalty: float = 5e9
    use_p: bool = True
    # TCT
    freq_range: Tuple[float, float] = (1050.0, 3000.0)
    amplitude: float = 2.5e-4

    def __post_init__(self):
        if self.kind not in ("BI", "TCT"):
            raise ConfigError(f"family.kind: unknown load case {self.kind!r}")
        if not 0 < self.n_replaced < self.n_elements:
            raise ConfigError("family.n_replaced must lie strictly inside the chain")
        if self.n_designs < 1:
            raise ConfigError("family.n_designs must be >= 1")
        if not 0 < self.dt_fraction <= 0.9:
            raise ConfigError("family.dt_fraction must lie in (0, 0.9]")
        if self.T < 0:
            raise ConfigError("family.T must be >= 0")

    @property
    def dim_p(self) -> int:
        return 2 if (self.kind == "BI" and self.use_p) else 0


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "lion"
    max_lr: float = 1e-3
    warmup_steps: int = 30
    decay_steps: int = 300
    decay_rate: float = 0.5
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("lion", "sgd"):
            raise ConfigError(f"training.optimizer.kind: unknown optimizer {self.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    model: DvbfConfig = field(default_factory=DvbfConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    stride: int = 150
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    selection: str = "offline_nll"
    online_val: bool = False
    full_seq_val: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("training.batch_size must be >= 1")
        if self.stride < 1:
            raise ConfigError("training.stride must be >= 1")
        if self.selection not in ("offline_nll", "online_nll", "online_mse"):
            raise ConfigError(f"training.selection: unknown metric {self.selection!r}")
        if self.selection.startswith("online") and not self.online_val:
            raise ConfigError("training.selection: online metrics need online_val = true")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        model = DvbfConfig.from_dict(data.pop("model", {}))
        optim = OptimConfig(**data.pop("optimizer", {}))
        return cls(model=model, optimizer=optim, **data)


def _bi_a1() -> TrainConfig:
    model = DvbfConfig(
        latent=32, window=300, K=7, n_bases=128, scale=0.2, noise=0.1,
        init_hidden=(256,) * 5, init_trans_hidden=(64,), encoder_hidden=(256,) * 4,
        alpha_hidden=(64,), decoder_hidden=(256,) * 4,
    )
    optim = OptimConfig(max_lr=6.13e-5, warmup_steps=300, decay_steps=10000, decay_rate=0.64, weight_decay=0.4)
    return TrainConfig(model=model, optimizer=optim, batch_size=256, stride=150, epochs=60)


def _tct_a2() -> TrainConfig:
    model = DvbfConfig(
        latent=64, window=300, K=9, n_bases=16, scale=0.2, noise=0.18,
        init_hidden=(128,) * 3, init_trans_hidden=(128,) * 2, encoder_hidden=(512,) * 2,
        alpha_hidden=(256,) * 3, decoder_hidden=(512,) * 4,
    )
    optim = OptimConfig(max_lr=2.35e-5, warmup_steps=300, decay_steps=10000, decay_rate=0.7, weight_decay=1.0)
    return TrainConfig(model=model, optimizer=optim, batch_size=256, stride=150, epochs=60)


def _desk() -> TrainConfig:
    return TrainConfig()


PRESETS = {"desk": _desk, "bi-a1": _bi_a1, "tct-a2": _tct_a2}


def preset(name: str) -> TrainConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"preset: unknown preset {name!r} (choose from {sorted(PRESETS)})") from None


def _merge(base, overrides: dict, section: str):
    names = {f.name for f in dataclasses.fields(base)}
    for key in overrides:
        if key not in names:
            raise ConfigError(f"{section}.{key}: unknown key")
    values = {}
    for key, val in overrides.items():
        if isinstance(val, list):
            val = tuple(val)
        values[key] = val
    try:
        return dataclasses.replace(base, **values)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def load_config(path: Optional[str] = None, preset_name: Optional[str] = None):
    """Return ``(FamilyConfig, TrainConfig)`` from a preset plus file overrides."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be an object")
    for key in data:
        if key not in ("family", "model", "training", "preset"):
            raise ConfigError(f"{key}: unknown top-level key")
    preset_name = preset_name or data.get("preset", "desk")
    train = preset(preset_name)
    family = _merge(FamilyConfig(), data.get("family", {}), "family")
    model = _merge(train.model, data.get("model", {}), "model")
    tdata = dict(data.get("training", {}))
    optim = _merge(train.optimizer, tdata.pop("optimizer", {}), "training.optimizer")
    train = _merge(train, tdata, "training")
    train = dataclasses.replace(train, model=model, optimizer=optim)
    return family, train
