"""Named parameter collections, initialization, and small network builders."""

from __future__ import annotations

from collections.abc import Mapping
from typing import Callable, Iterator, Sequence

import numpy as np

from masd.nn import tensor as T
from masd.nn.tensor import ShapeError, Tensor

ROLES = ("encoder", "decoder", "grouper", "aggregator", "actor", "critic", "grouper_critic", "codebook", "mixed")


class ParameterSet(Mapping):
    """Ordered map from parameter name to float64 array, iterated lexicographically."""

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None, role: str = "mixed"):
        if role not in ROLES:
            raise ValueError(f"unknown parameter role {role!r}")
        self.role = role
        self._entries = {k: np.asarray(v, dtype=np.float64) for k, v in (entries or {}).items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}:{tuple(self[k].shape)}" for k in self)
        return f"ParameterSet(role={self.role}, {shapes})"

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParameterSet":
        merged = dict(self._entries)
        for name, value in updates.items():
            if name not in merged:
                raise KeyError(name)
            if np.shape(value) != merged[name].shape:
                raise ShapeError(f"{name}: replacement shape {np.shape(value)} != {merged[name].shape}")
            merged[name] = np.asarray(value, dtype=np.float64)
        return ParameterSet(merged, self.role)

    def merged(self, other: Mapping[str, np.ndarray]) -> "ParameterSet":
        merged = dict(self._entries)
        for name in other:
            if name in merged:
                raise KeyError(f"duplicate parameter {name}")
            merged[name] = np.asarray(other[name], dtype=np.float64)
        return ParameterSet(merged, "mixed")

    def subset(self, prefix: str, role: str | None = None) -> "ParameterSet":
        return ParameterSet({k: v for k, v in self._entries.items() if k.startswith(prefix)}, role or self.role)

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self._entries.items()}, self.role)

    def as_tensors(self, trainable: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(self[k], requires_grad=trainable) for k in self}

    def count(self) -> int:
        return int(sum(v.size for v in self._entries.values()))


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape: Sequence[int]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_mlp(rng: np.random.Generator, prefix: str, sizes: Sequence[int], out_bias: bool = True) -> dict[str, np.ndarray]:
    """Weights ``{prefix}W{i}``/``{prefix}b{i}`` for a tanh MLP with the given layer sizes."""
    out: dict[str, np.ndarray] = {}
    last = len(sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        out[f"{prefix}W{i}"] = uniform_fan_in(rng, fan_in, (fan_in, fan_out))
        if i < last or out_bias:
            out[f"{prefix}b{i}"] = uniform_fan_in(rng, fan_in, (fan_out,))
    return out


def mlp(p: Mapping[str, Tensor], prefix: str, x: Tensor, activation: Callable[[Tensor], Tensor] = T.tanh) -> Tensor:
    """Apply the MLP stored under ``prefix``; no activation after the last layer."""
    i = 0
    while f"{prefix}W{i + 1}" in p:
        x = activation(T.affine(x, p[f"{prefix}W{i}"], p.get(f"{prefix}b{i}")))
        i += 1
    return T.affine(x, p[f"{prefix}W{i}"], p.get(f"{prefix}b{i}"))


def mlp_numpy(p: Mapping[str, np.ndarray], prefix: str, x: np.ndarray) -> np.ndarray:
    """Forward-only version of :func:`mlp` for rollouts."""
    i = 0
    while f"{prefix}W{i + 1}" in p:
        x = x @ p[f"{prefix}W{i}"]
        if f"{prefix}b{i}" in p:
            x = x + p[f"{prefix}b{i}"]
        x = np.tanh(x)
        i += 1
    x = x @ p[f"{prefix}W{i}"]
    if f"{prefix}b{i}" in p:
        x = x + p[f"{prefix}b{i}"]
    return x
