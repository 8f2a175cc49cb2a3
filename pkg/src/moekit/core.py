"""SMoE data types and forward semantics.

Weights are stored as float32; every forward computation upcasts to float64
so that accumulations (matmuls, routing sums, means) are carried out in
double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes disagree."""


class ConfigurationError(ValueError):
    """Raised for invalid layer or model configuration (e.g. k > n)."""


def _frozen_f32(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float32, copy=True)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


def silu(z: np.ndarray) -> np.ndarray:
    # z * sigmoid(z), written to avoid overflow in exp for large |z|
    return z * (0.5 * (1.0 + np.tanh(0.5 * z)))


@dataclass(frozen=True, eq=False)
class ExpertWeights:
    """One gated FFN expert: ``(silu(x W_gate) * (x W_up)) W_down``."""

    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w_gate", _frozen_f32(self.w_gate, "w_gate"))
        object.__setattr__(self, "w_up", _frozen_f32(self.w_up, "w_up"))
        object.__setattr__(self, "w_down", _frozen_f32(self.w_down, "w_down"))
        d_h, d_m = self.w_gate.shape
        if self.w_up.shape != (d_h, d_m):
            raise DimensionError(f"w_up shape {self.w_up.shape} != w_gate shape {(d_h, d_m)}")
        if self.w_down.shape != (d_m, d_h):
            raise DimensionError(f"w_down shape {self.w_down.shape} != {(d_m, d_h)}")

    @property
    def d_h(self) -> int:
        return self.w_gate.shape[0]

    @property
    def d_m(self) -> int:
        return self.w_gate.shape[1]

    @property
    def n_params(self) -> int:
        return 3 * self.d_h * self.d_m

    def identical_to(self, other: "ExpertWeights") -> bool:
        return (
            np.array_equal(self.w_gate, other.w_gate)
            and np.array_equal(self.w_up, other.w_up)
            and np.array_equal(self.w_down, other.w_down)
        )


@dataclass(frozen=True, eq=False)
class MoeLayer:
    """A sparse MoE layer.

    ``router`` is ``d_h x n``. ``experts`` holds the stored experts and
    ``remap[i]`` names the stored expert that routing slot ``i`` dispatches
    to. For an unmerged layer ``remap`` is the identity.
    """

    router: np.ndarray
    experts: tuple
    remap: tuple = None
    k: int = 2

    def __post_init__(self):
        router = _frozen_f32(self.router, "router")
        experts = tuple(self.experts)
        if not experts:
            raise ConfigurationError("a layer needs at least one stored expert")
        for e in experts:
            if not isinstance(e, ExpertWeights):
                raise TypeError("experts must be ExpertWeights")
        d_h, n = router.shape
        d_m = experts[0].d_m
        for e in experts:
            if e.d_h != d_h or e.d_m != d_m:
                raise DimensionError(
                    f"expert shape (d_h={e.d_h}, d_m={e.d_m}) does not match layer "
                    f"(d_h={d_h}, d_m={d_m})"
                )
        remap = tuple(range(n)) if self.remap is None else tuple(int(j) for j in self.remap)
        if len(remap) != n:
            raise ConfigurationError(f"remap has {len(remap)} entries for {n} routing slots")
        if any(j < 0 or j >= len(experts) for j in remap):
            raise ConfigurationError("remap points outside stored experts")
        if set(remap) != set(range(len(experts))):
            raise ConfigurationError("remap must be surjective onto the stored experts")
        k = int(self.k)
        if k < 1 or k > n:
            raise ConfigurationError(f"top-k must satisfy 1 <= k <= n, got k={k}, n={n}")
        object.__setattr__(self, "router", router)
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "remap", remap)
        object.__setattr__(self, "k", k)

    @property
    def n(self) -> int:
        return self.router.shape[1]

    @property
    def n_storage(self) -> int:
        return len(self.experts)

    @property
    def d_h(self) -> int:
        return self.router.shape[0]

    @property
    def d_m(self) -> int:
        return self.experts[0].d_m

    @property
    def is_merged(self) -> bool:
        return self.remap != tuple(range(self.n))

    def expert_params(self) -> int:
        return sum(e.n_params for e in self.experts)


@dataclass(frozen=True, eq=False)
class MoeModel:
    layers: tuple
    d_h: int
    d_m: int

    def __post_init__(self):
        layers = tuple(self.layers)
        for i, layer in enumerate(layers):
            if layer.d_h != self.d_h:
                raise DimensionError(f"layer {i} has d_h={layer.d_h}, model d_h={self.d_h}")
            if layer.d_m != self.d_m:
                raise DimensionError(f"layer {i} has d_m={layer.d_m}, model d_m={self.d_m}")
        object.__setattr__(self, "layers", layers)

    @classmethod
    def from_layers(cls, layers: Sequence[MoeLayer]) -> "MoeModel":
        if not layers:
            raise ConfigurationError("from_layers needs at least one layer; use MoeModel((), d_h, d_m)")
        return cls(tuple(layers), layers[0].d_h, layers[0].d_m)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def expert_params(self) -> int:
        return sum(layer.expert_params() for layer in self.layers)

    def replace_layer(self, index: int, layer: MoeLayer) -> "MoeModel":
        layers = list(self.layers)
        layers[index] = layer
        return MoeModel(tuple(layers), self.d_h, self.d_m)


@dataclass(frozen=True, eq=False)
class TokenBatch:
    """Calibration hidden states, one row per token."""

    vectors: np.ndarray = field()

    def __post_init__(self):
        arr = _frozen_f32(self.vectors, "batch")
        if arr.shape[0] < 1:
            raise ValueError("batch must contain at least one token")
        object.__setattr__(self, "vectors", arr)

    @property
    def T(self) -> int:
        return self.vectors.shape[0]

    @property
    def d_h(self) -> int:
        return self.vectors.shape[1]


def _as_rows(x, d_h: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    rows = arr[None, :] if single else arr
    if rows.ndim != 2 or rows.shape[1] != d_h:
        raise DimensionError(f"input width {rows.shape[-1]} does not match d_h={d_h}")
    return rows, single


def expert_activations(e: ExpertWeights, x, apply_silu: bool = True) -> np.ndarray:
    """Intermediate features ``silu(x W_gate) * (x W_up)``, shape ``(..., d_m)``."""
    rows, single = _as_rows(x, e.d_h)
    gate = rows @ e.w_gate.astype(np.float64)
    if apply_silu:
        gate = silu(gate)
    act = gate * (rows @ e.w_up.astype(np.float64))
    return act[0] if single else act


def expert_forward(e: ExpertWeights, x) -> np.ndarray:
    """Evaluate one expert on a vector or a ``T x d_h`` matrix."""
    rows, single = _as_rows(x, e.d_h)
    out = expert_activations(e, rows) @ e.w_down.astype(np.float64)
    return out[0] if single else out


def top_k(logits: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the k largest logits per row (ties -> lowest index) and their softmax."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n = logits.shape[1]
    if k < 1 or k > n:
        raise ConfigurationError(f"top-k must satisfy 1 <= k <= n, got k={k}, n={n}")
    idx = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(logits, idx, axis=1)
    z = np.exp(top - top[:, :1])
    return idx, z / z.sum(axis=1, keepdims=True)


def router_logits(layer: MoeLayer, x) -> np.ndarray:
    rows, single = _as_rows(x, layer.d_h)
    logits = rows @ layer.router.astype(np.float64)
    return logits[0] if single else logits


def route_batch(layer: MoeLayer, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(slots, probs)``, each ``T x k``; slots ordered by descending logit."""
    rows, _ = _as_rows(x, layer.d_h)
    return top_k(router_logits(layer, rows), layer.k)


def route(layer: MoeLayer, x) -> dict[int, float]:
    """Sparse routing weights ``{slot: probability}`` for a single token."""
    rows, single = _as_rows(x, layer.d_h)
    if not single:
        raise DimensionError("route takes a single token vector; use route_batch for matrices")
    idx, p = route_batch(layer, rows)
    return {int(i): float(w) for i, w in zip(idx[0], p[0])}


def routing_matrix(layer: MoeLayer, x) -> np.ndarray:
    """Dense ``T x n`` routing weights, zero off the top-k."""
    rows, _ = _as_rows(x, layer.d_h)
    idx, p = route_batch(layer, rows)
    dense = np.zeros((rows.shape[0], layer.n))
    np.put_along_axis(dense, idx, p, axis=1)
    return dense


def stored_expert_outputs(layer: MoeLayer, rows: np.ndarray) -> np.ndarray:
    """Dense evaluation of every stored expert: shape ``(n_storage, T, d_h)``."""
    return np.stack([expert_forward(e, rows) for e in layer.experts])


def combine(layer: MoeLayer, outputs: np.ndarray, slots: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Weighted sum of pre-computed stored-expert outputs, summed in routing-rank order."""
    remap = np.asarray(layer.remap)
    T = slots.shape[0]
    tokens = np.arange(T)
    y = np.zeros((T, outputs.shape[2]))
    for r in range(slots.shape[1]):
        y += probs[:, r, None] * outputs[remap[slots[:, r]], tokens]
    return y


def smoe_forward(layer: MoeLayer, x) -> np.ndarray:
    """Layer output ``sum_i P_i(x) * E_{remap[i]}(x)`` for a vector or matrix input."""
    rows, single = _as_rows(x, layer.d_h)
    slots, probs = route_batch(layer, rows)
    y = combine(layer, stored_expert_outputs(layer, rows), slots, probs)
    return y[0] if single else y


def layer_inputs(model: MoeModel, batch) -> list[np.ndarray]:
    """Inputs reaching each layer, plus the final output as the last entry."""
    x = batch.vectors if isinstance(batch, TokenBatch) else batch
    rows, _ = _as_rows(x, model.d_h)
    if rows.shape[0] < 1:
        raise ValueError("empty batch")
    states = [rows]
    for layer in model.layers:
        states.append(smoe_forward(layer, states[-1]))
    return states


def model_forward(model: MoeModel, batch) -> np.ndarray:
    """Apply the layer stack in order (no residual path); returns ``T x d_h`` float64."""
    return layer_inputs(model, batch)[-1]
