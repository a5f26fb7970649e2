"""Encoder, mental-health classifier, and gender discriminator over fixed embeddings.

The encoder is a stack of affine+ReLU blocks standing in for a speech
foundation model; both heads share one structure (affine, ReLU, affine)
ending in a two-way softmax. Array-level entry points (:func:`encode`,
:func:`classify`, :func:`discriminate`) run a forward pass and return
values; the ``*_graph`` builders expose the same computations as autodiff
graphs for training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ndnum
from .errors import ConfigError, ShapeError

NUM_CLASSES = 2


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 768
    encoder_layers: int = 2
    encoder_hidden: int = 128
    head_hidden: int = 256
    seed: int = 0

    def validate(self) -> None:
        for name in ("input_dim", "encoder_layers", "encoder_hidden", "head_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")


class ParamSet:
    """Named float64 parameter tensors, grouped by dotted prefix."""

    def __init__(self, entries: dict[str, np.ndarray]):
        self._entries = dict(entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def group(self, prefix: str) -> list[str]:
        return [n for n in self._entries if n.startswith(prefix + ".")]

    def replace(self, updates: dict[str, np.ndarray]) -> "ParamSet":
        merged = dict(self._entries)
        for name, value in updates.items():
            if name not in merged:
                raise KeyError(f"unknown parameter {name!r}")
            merged[name] = value
        return ParamSet(merged)

    def copy(self) -> "ParamSet":
        return ParamSet({n: v.copy() for n, v in self._entries.items()})

    def count(self) -> int:
        return sum(v.size for v in self._entries.values())

    def allclose_bitwise(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            self._entries[n].tobytes() == other._entries[n].tobytes() for n in self._entries
        )


def _layer_dims(config: ModelConfig) -> list[tuple[str, int, int]]:
    dims: list[tuple[str, int, int]] = []
    fan_in = config.input_dim
    for i in range(config.encoder_layers):
        dims.append((f"encoder.{i}", fan_in, config.encoder_hidden))
        fan_in = config.encoder_hidden
    for head in ("classifier", "discriminator"):
        dims.append((f"{head}.hidden", config.encoder_hidden, config.head_hidden))
        dims.append((f"{head}.out", config.head_hidden, NUM_CLASSES))
    return dims


def param_count(config: ModelConfig) -> int:
    """Closed-form number of learnable scalars for a configuration."""
    return sum(fi * fo + fo for _, fi, fo in _layer_dims(config))


def init_params(config: ModelConfig) -> ParamSet:
    """Glorot-uniform weights on [-sqrt(6/(fan_in+fan_out)), +...], zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    entries: dict[str, np.ndarray] = {}
    for name, fan_in, fan_out in _layer_dims(config):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        entries[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        entries[f"{name}.bias"] = np.zeros(fan_out)
    return ParamSet(entries)


def config_from_params(params: ParamSet) -> ModelConfig:
    """Recover structural dimensions from parameter shapes."""
    encoder = sorted(params.group("encoder"))
    layers = len(encoder) // 2
    first_w = params["encoder.0.weight"]
    return ModelConfig(
        input_dim=first_w.shape[0],
        encoder_layers=layers,
        encoder_hidden=first_w.shape[1],
        head_hidden=params["classifier.hidden.weight"].shape[1],
    )


def param_nodes(params: ParamSet) -> dict[str, ndnum.Node]:
    return {name: ndnum.input_node(value, name=name) for name, value in params.items()}


def encoder_graph(pnodes: dict[str, ndnum.Node], x: ndnum.Node) -> ndnum.Node:
    h = x
    i = 0
    while f"encoder.{i}.weight" in pnodes:
        h = ndnum.relu(ndnum.add_bias(ndnum.matmul(h, pnodes[f"encoder.{i}.weight"]), pnodes[f"encoder.{i}.bias"]))
        i += 1
    return h


def head_graph(pnodes: dict[str, ndnum.Node], h: ndnum.Node, head: str) -> ndnum.Node:
    """Logits of one head: affine, ReLU, affine. Softmax lives in the loss."""
    z = ndnum.relu(ndnum.add_bias(ndnum.matmul(h, pnodes[f"{head}.hidden.weight"]), pnodes[f"{head}.hidden.bias"]))
    return ndnum.add_bias(ndnum.matmul(z, pnodes[f"{head}.out.weight"]), pnodes[f"{head}.out.bias"])


def discriminator_graph(pnodes: dict[str, ndnum.Node], h: ndnum.Node, lam: float) -> ndnum.Node:
    """Discriminator logits behind a gradient-reversal node with coefficient ``lam``."""
    return head_graph(pnodes, ndnum.grad_reverse(h, lam), "discriminator")


def _as_batch(x, width: int, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ShapeError(f"{what} expects width {width}, got shape {arr.shape}")
    return arr


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def encode(params: ParamSet, x) -> np.ndarray:
    """Map an embedding batch through the encoder blocks."""
    batch = _as_batch(x, params["encoder.0.weight"].shape[0], "encode")
    pnodes = param_nodes(params)
    root = encoder_graph(pnodes, ndnum.input_node(batch))
    return ndnum.forward(root)


def classify(params: ParamSet, h) -> np.ndarray:
    """Per-row class probabilities of the mental-health head."""
    batch = _as_batch(h, params["classifier.hidden.weight"].shape[0], "classify")
    pnodes = param_nodes(params)
    root = head_graph(pnodes, ndnum.input_node(batch), "classifier")
    return _softmax(ndnum.forward(root))


def discriminate(params: ParamSet, h, lam: float) -> np.ndarray:
    """Gender-head probabilities; ``lam`` only affects gradients, never the forward value."""
    batch = _as_batch(h, params["discriminator.hidden.weight"].shape[0], "discriminate")
    pnodes = param_nodes(params)
    root = discriminator_graph(pnodes, ndnum.input_node(batch), lam)
    return _softmax(ndnum.forward(root))
