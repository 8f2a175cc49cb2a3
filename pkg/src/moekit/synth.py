"""Synthetic MoE models with planted expert redundancy.

Randomness comes from the Philox-4x64 counter-based generator keyed with
``(seed, stream)``: stream 0 draws model weights, stream 1 draws tokens.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .core import ExpertWeights, MoeLayer, MoeModel, TokenBatch

MODEL_STREAM = 0
BATCH_STREAM = 1


@dataclass(frozen=True)
class PlantedSpec:
    layers: int = 4
    experts: int = 16
    clusters: int = 4
    d_h: int = 32
    d_m: int = 64
    k: int = 2
    noise: float = 0.01
    seed: int = 0
    tokens: int = 512

    def __post_init__(self):
        if self.clusters < 1 or self.clusters > self.experts:
            raise ValueError(f"need 1 <= clusters <= experts, got {self.clusters}, {self.experts}")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if not 1 <= self.k <= self.experts:
            raise ValueError(f"need 1 <= k <= experts, got k={self.k}")
        if min(self.layers, self.d_h, self.d_m, self.tokens) < 0 or min(self.d_h, self.d_m) < 1:
            raise ValueError("dimensions must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    def replace(self, **kw) -> "PlantedSpec":
        return PlantedSpec(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)


def parse_spec(text: str) -> PlantedSpec:
    """Read a ``key=value`` config; ``#`` starts a comment, unknown keys are errors."""
    types = {f.name: f.type for f in fields(PlantedSpec)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = float(val) if types[key] in (float, "float") else int(val)
    return PlantedSpec(**values)


def format_spec(spec: PlantedSpec) -> str:
    return "".join(f"{k}={v}\n" for k, v in asdict(spec).items())


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))


def planted_labels(spec: PlantedSpec) -> tuple[int, ...]:
    """Expert i belongs to planted group ``i mod clusters``."""
    return tuple(i % spec.clusters for i in range(spec.experts))


def gen_planted_model(spec: PlantedSpec) -> tuple[MoeModel, list[tuple[int, ...]]]:
    """Experts are multiplicative perturbations ``w * (1 + noise * eps)`` of shared bases."""
    rng = _rng(spec.seed, MODEL_STREAM)
    scale = 1.0 / np.sqrt(spec.d_h)
    truth = planted_labels(spec)
    layers = []
    for _ in range(spec.layers):
        bases = [
            (
                rng.standard_normal((spec.d_h, spec.d_m)) * scale,
                rng.standard_normal((spec.d_h, spec.d_m)) * scale,
                rng.standard_normal((spec.d_m, spec.d_h)) * scale,
            )
            for _ in range(spec.clusters)
        ]
        experts = []
        for g in truth:
            mats = [
                (w * (1.0 + spec.noise * rng.standard_normal(w.shape))).astype(np.float32)
                for w in bases[g]
            ]
            experts.append(ExpertWeights(*mats))
        router = (rng.standard_normal((spec.d_h, spec.experts)) * scale).astype(np.float32)
        layers.append(MoeLayer(router, tuple(experts), None, spec.k))
    return MoeModel(tuple(layers), spec.d_h, spec.d_m), [truth] * spec.layers


def gen_batch(spec: PlantedSpec, T: int | None = None) -> TokenBatch:
    T = spec.tokens if T is None else T
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = _rng(spec.seed, BATCH_STREAM)
    return TokenBatch(rng.standard_normal((T, spec.d_h)).astype(np.float32))
