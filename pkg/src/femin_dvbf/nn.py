"""Parameter storage, MLP blocks, optimizers and checkpoint I/O."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ConfigError",
    "ParamStore",
    "MlpSpec",
    "init_mlp",
    "forward_mlp",
    "OptimizerState",
    "lr_at",
    "Lion",
    "SGD",
    "save_checkpoint",
    "load_checkpoint",
]

HEAD_ACTIVATIONS = ("linear", "softplus", "sigmoid")
SIGMA_FLOOR = 1e-6


class ConfigError(ValueError):
    pass


class ParamStore:
    """Named trainable tensors; each value carries its own ``.grad``."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in self._params.items()}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, p in self._params.items():
            if state[k].shape != p.data.shape:
                raise ConfigError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def n_values(self) -> int:
        return sum(p.data.size for p in self._params.values())


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: Tuple[int, ...] = ()
    heads: Tuple[Tuple[str, int, str], ...] = ()
    hidden_activation: str = "gelu"

    def __post_init__(self):
        if self.input_dim < 1 or any(w < 1 for w in self.hidden):
            raise ConfigError("MLP widths must be >= 1")
        if not self.heads:
            raise ConfigError("MLP needs at least one output head")
        for name, width, act in self.heads:
            if width < 1:
                raise ConfigError(f"head {name!r} has width {width}")
            if act not in HEAD_ACTIVATIONS:
                raise ConfigError(f"unknown head activation {act!r}")
        if self.hidden_activation != "gelu":
            raise ConfigError("only gelu hidden layers are supported")


def init_mlp(spec: MlpSpec, store: ParamStore, prefix: str, rng: np.random.Generator):
    """Uniform fan-in weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
    fan_in = spec.input_dim
    for i, width in enumerate(spec.hidden):
        bound = 1.0 / math.sqrt(fan_in)
        store.add(f"{prefix}.h{i}.w", rng.uniform(-bound, bound, size=(fan_in, width)))
        store.add(f"{prefix}.h{i}.b", np.zeros(width))
        fan_in = width
    for name, width, _ in spec.heads:
        bound = 1.0 / math.sqrt(fan_in)
        store.add(f"{prefix}.{name}.w", rng.uniform(-bound, bound, size=(fan_in, width)))
        store.add(f"{prefix}.{name}.b", np.zeros(width))


def forward_mlp(spec: MlpSpec, store: ParamStore, x, prefix: str) -> Dict[str, Tensor]:
    x = ad.tensor(x)
    if x.shape[-1] != spec.input_dim:
        raise ConfigError(f"{prefix}: input width {x.shape[-1]} != {spec.input_dim}")
    h = x
    for i in range(len(spec.hidden)):
        h = ad.dense(h, store[f"{prefix}.h{i}.w"], store[f"{prefix}.h{i}.b"], spec.hidden_activation)
    return {name: ad.dense(h, store[f"{prefix}.{name}.w"], store[f"{prefix}.{name}.b"], act)
            for name, _, act in spec.heads}


# ---------------------------------------------------------------------------
# optimization


@dataclass
class OptimizerState:
    max_lr: float
    warmup_steps: int
    decay_steps: int
    decay_rate: float
    weight_decay: float = 0.0
    step: int = 0
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.max_lr > 0:
            raise ConfigError("maximum learning rate must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ConfigError("decay rate must lie in (0, 1]")
        if self.warmup_steps < 0 or self.decay_steps <= 0:
            raise ConfigError("warm-up steps must be >= 0 and decay steps > 0")


def lr_at(state: OptimizerState) -> float:
    """Linear warm-up to ``max_lr`` then exponential decay."""
    b = state.step
    if b < state.warmup_steps:
        return state.max_lr * b / state.warmup_steps
    return state.max_lr * state.decay_rate ** ((b - state.warmup_steps) / state.decay_steps)


class Lion:
    """Sign-momentum update with decoupled weight decay.

    For gradient g and momentum m::

        c = beta1 m + (1 - beta1) g
        p = p - lr (sign(c) + wd p)
        m = beta2 m + (1 - beta2) g
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.99, clip_norm: Optional[float] = None):
        self.beta1 = beta1
        self.beta2 = beta2
        self.clip_norm = clip_norm

    def step(self, store: ParamStore, state: OptimizerState) -> float:
        lr = lr_at(state)
        grads = _clipped(store, self.clip_norm)
        for name, p in store.items():
            g = grads[name]
            m = state.momentum.get(name)
            if m is None:
                m = np.zeros_like(p.data)
            c = self.beta1 * m + (1.0 - self.beta1) * g
            p.data = p.data * (1.0 - lr * state.weight_decay) - lr * np.sign(c)
            state.momentum[name] = self.beta2 * m + (1.0 - self.beta2) * g
        state.step += 1
        return lr


class SGD:
    """Plain gradient descent with the same schedule and decoupled decay."""

    def __init__(self, clip_norm: Optional[float] = None):
        self.clip_norm = clip_norm

    def step(self, store: ParamStore, state: OptimizerState) -> float:
        lr = lr_at(state)
        grads = _clipped(store, self.clip_norm)
        for name, p in store.items():
            p.data = p.data * (1.0 - lr * state.weight_decay) - lr * grads[name]
        state.step += 1
        return lr


def _clipped(store: ParamStore, clip_norm: Optional[float]) -> Dict[str, np.ndarray]:
    grads = store.grads()
    if clip_norm is None:
        return grads
    norm = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    if norm > clip_norm:
        scale = clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads


# ---------------------------------------------------------------------------
# checkpoint file: b"FDVB" | uint64 LE manifest length | JSON manifest | float64 LE payload

_MAGIC = b"FDVB"


def save_checkpoint(path, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    entries, offset, chunks = [], 0, []
    for name, arr in tensors.items():
        arr = np.require(arr, dtype="<f8", requirements="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[4:12])
    manifest = json.loads(raw[12:12 + n].decode())
    base = 12 + n
    out = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        out[e["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(e["shape"]).astype(np.float64)
    return out, manifest["meta"]
