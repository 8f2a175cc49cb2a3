"""Calibration statistics: mean expert outputs, usage frequencies, router scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    ExpertWeights,
    MoeModel,
    TokenBatch,
    expert_activations,
    layer_inputs,
    route_batch,
    router_logits,
    stored_expert_outputs,
)

DEFAULT_MAX_CACHE_BYTES = 2 << 30


class ActivationCacheError(MemoryError):
    pass


@dataclass(eq=False)
class LayerStats:
    """Per-layer statistics, indexed by routing slot (expert) ``i``.

    ``logit_profile[i]`` is the mean router-logit vector over the tokens that
    selected expert ``i`` (zeros if it was never selected).
    ``activations``, when cached, has shape ``(n, T, d_m)``.
    """

    mean_output: np.ndarray
    frequency: np.ndarray
    router_score: np.ndarray
    logit_profile: np.ndarray
    k: int
    activations: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.frequency)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "mean_output": self.mean_output.tolist(),
            "frequency": [int(f) for f in self.frequency],
            "router_score": self.router_score.tolist(),
            "logit_profile": self.logit_profile.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerStats":
        return cls(
            mean_output=np.asarray(d["mean_output"], dtype=np.float64),
            frequency=np.asarray(d["frequency"], dtype=np.int64),
            router_score=np.asarray(d["router_score"], dtype=np.float64),
            logit_profile=np.asarray(d["logit_profile"], dtype=np.float64),
            k=int(d["k"]),
        )


@dataclass(eq=False)
class CalibrationStats:
    layers: list
    token_count: int

    @property
    def has_activations(self) -> bool:
        return bool(self.layers) and all(s.activations is not None for s in self.layers)

    def to_dict(self) -> dict:
        return {"token_count": self.token_count, "layers": [s.to_dict() for s in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationStats":
        return cls([LayerStats.from_dict(s) for s in d["layers"]], int(d["token_count"]))


def activation_features(e: ExpertWeights, rows, apply_silu: bool = True) -> np.ndarray:
    """Activations entering ``W_down``: ``silu(x W_gate) * (x W_up)``, shape ``T x d_m``.

    ``apply_silu=False`` drops the nonlinearity, giving ``(x W_gate) * (x W_up)``.
    """
    return np.atleast_2d(expert_activations(e, rows, apply_silu=apply_silu))


def collect_stats(
    model: MoeModel,
    batch: TokenBatch,
    cache_activations: bool = False,
    apply_silu: bool = True,
    max_cache_bytes: int = DEFAULT_MAX_CACHE_BYTES,
) -> CalibrationStats:
    """Run ``batch`` through ``model`` once and accumulate per-expert statistics.

    Every expert is evaluated on every token reaching its layer, so mean
    outputs are dense averages independent of routing.
    """
    rows = batch.vectors if isinstance(batch, TokenBatch) else np.asarray(batch)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("calibration batch must be a non-empty T x d_h matrix")
    T = rows.shape[0]
    if cache_activations:
        for li, layer in enumerate(model.layers):
            need = layer.n * T * layer.d_m * 4
            if need > max_cache_bytes:
                raise ActivationCacheError(
                    f"activation cache for layer {li} needs T x d_m x n = {T} x {layer.d_m} x "
                    f"{layer.n} float32 values ({need} bytes), above the {max_cache_bytes}-byte limit"
                )

    states = layer_inputs(model, rows)
    out = []
    for layer, x in zip(model.layers, states):
        remap = np.asarray(layer.remap)
        outputs = stored_expert_outputs(layer, x)
        mean_output = outputs.mean(axis=1)[remap]

        slots, probs = route_batch(layer, x)
        frequency = np.bincount(slots.ravel(), minlength=layer.n).astype(np.int64)
        router_score = np.zeros(layer.n)
        np.add.at(router_score, slots.ravel(), probs.ravel())

        logits = router_logits(layer, x)
        selected = np.zeros((T, layer.n))
        np.put_along_axis(selected, slots, 1.0, axis=1)
        profile = selected.T @ logits
        profile /= np.maximum(frequency, 1)[:, None]

        acts = None
        if cache_activations:
            acts = np.stack(
                [activation_features(layer.experts[j], x, apply_silu) for j in remap]
            ).astype(np.float32)
        out.append(LayerStats(mean_output, frequency, router_score, profile, layer.k, acts))
    return CalibrationStats(out, T)
