"""Retraining-free comparison methods: frequency/score/output pruning and one-shot grouping."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationStats, LayerStats
from .clustering import ClusterAssignment, FeatureMatrix, canonical_labels, global_keep
from .core import MoeLayer, MoeModel, TokenBatch, layer_inputs, router_logits, stored_expert_outputs

MAX_EXHAUSTIVE = 10**6


class CombinatorialError(ValueError):
    pass


@dataclass(frozen=True)
class PruneResult:
    kept: tuple
    method: str
    objective: tuple | None = None
    enumeration: tuple | None = None

    def __post_init__(self):
        kept = tuple(tuple(sorted(int(i) for i in k)) for k in self.kept)
        for k in kept:
            if not k:
                raise ValueError("a layer must keep at least one expert")
            if len(set(k)) != len(k):
                raise ValueError(f"duplicate expert indices in {k}")
        object.__setattr__(self, "kept", kept)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "kept": [list(k) for k in self.kept],
            "objective": None if self.objective is None else list(self.objective),
        }


def _check_ratio(keep_ratio: float):
    if not 0.0 < keep_ratio < 1.0:
        raise ValueError(f"keep_ratio must lie strictly between 0 and 1, got {keep_ratio}")


def f_prune(stats: CalibrationStats, keep_ratio: float) -> PruneResult:
    """Keep the globally most frequently selected experts."""
    _check_ratio(keep_ratio)
    if not stats.layers:
        raise ValueError("empty statistics")
    return PruneResult(tuple(global_keep([s.frequency for s in stats.layers], keep_ratio)), "f-prune")


def s_prune(stats: CalibrationStats, keep_ratio: float) -> PruneResult:
    """Keep the experts with the largest accumulated router probability."""
    _check_ratio(keep_ratio)
    if not stats.layers:
        raise ValueError("empty statistics")
    return PruneResult(tuple(global_keep([s.router_score for s in stats.layers], keep_ratio)), "s-prune")


def unrank_combination(rank: int, n: int, r: int) -> tuple[int, ...]:
    """The ``rank``-th r-subset of ``range(n)`` in lexicographic order."""
    out = []
    x = 0
    for slot in range(r):
        while True:
            block = math.comb(n - x - 1, r - slot - 1)
            if rank < block:
                break
            rank -= block
            x += 1
        out.append(x)
        x += 1
    return tuple(out)


def prune_layer(layer: MoeLayer, kept) -> MoeLayer:
    """Drop every routing slot outside ``kept``; top-k is clamped to the survivors."""
    kept = sorted(int(i) for i in kept)
    if not kept:
        raise ValueError("cannot prune every expert of a layer")
    if kept[0] < 0 or kept[-1] >= layer.n:
        raise ValueError("kept index out of range")
    stored = sorted({layer.remap[i] for i in kept})
    pos = {j: p for p, j in enumerate(stored)}
    return MoeLayer(
        layer.router[:, kept],
        tuple(layer.experts[j] for j in stored),
        tuple(pos[layer.remap[i]] for i in kept),
        min(layer.k, len(kept)),
    )


def apply_prune(model: MoeModel, result: PruneResult) -> MoeModel:
    if len(result.kept) != model.num_layers:
        raise ValueError(f"prune result covers {len(result.kept)} layers, model has {model.num_layers}")
    return MoeModel(
        tuple(prune_layer(layer, kept) for layer, kept in zip(model.layers, result.kept)),
        model.d_h,
        model.d_m,
    )


def _subset_errors(
    logits: np.ndarray, outputs: np.ndarray, y_ref: np.ndarray, subsets: np.ndarray, k: int
) -> np.ndarray:
    """Sum over tokens of ||y_ref - y_S|| for each candidate subset S (rows of ``subsets``)."""
    T = logits.shape[0]
    kk = min(k, subsets.shape[1])
    sub = np.transpose(logits[:, subsets], (1, 0, 2))  # B x T x r
    order = np.argsort(-sub, axis=2, kind="stable")[:, :, :kk]
    top = np.take_along_axis(sub, order, axis=2)
    p = np.exp(top - top[:, :, :1])
    p /= p.sum(axis=2, keepdims=True)
    slots = np.take_along_axis(np.broadcast_to(subsets[:, None, :], sub.shape), order, axis=2)
    tokens = np.arange(T)[None, :]
    y = np.zeros((subsets.shape[0], T, outputs.shape[2]))
    for j in range(kk):
        y += p[:, :, j, None] * outputs[slots[:, :, j], tokens]
    diff = y - y_ref[None]
    return np.ascontiguousarray(np.sqrt((diff * diff).sum(axis=2))).sum(axis=1)


def _candidate_subsets(n: int, r: int, budget, rng_seed: int | None):
    total = math.comb(n, r)
    if budget == "exhaustive":
        if total > MAX_EXHAUSTIVE:
            raise CombinatorialError(
                f"C({n},{r}) = {total} subsets exceeds the exhaustive limit of {MAX_EXHAUSTIVE}; "
                "use sampled mode"
            )
        return np.array(list(itertools.combinations(range(n), r)), dtype=np.int64)
    kind, count = budget
    if kind != "sampled":
        raise ValueError(f"unknown o-prune budget {budget!r}")
    count = min(int(count), total)
    rng = np.random.Generator(np.random.Philox(rng_seed or 0))
    ranks = np.sort(rng.choice(total, size=count, replace=False))
    return np.array([unrank_combination(int(q), n, r) for q in ranks], dtype=np.int64)


def o_prune(
    model: MoeModel,
    batch: TokenBatch,
    r,
    budget="exhaustive",
    seed: int = 0,
    end_to_end: bool = False,
    debug: bool = False,
    chunk: int = 256,
) -> PruneResult:
    """Layer-by-layer search for the r-subset whose pruned layer deviates least.

    ``budget`` is ``"exhaustive"`` or ``("sampled", N)``. The default objective
    is measured at each layer's output on the original model's inputs to that
    layer; ``end_to_end=True`` measures at the final output instead, with
    earlier layers already pruned. Ties go to the lexicographically smallest
    subset.
    """
    rows = batch.vectors if isinstance(batch, TokenBatch) else np.asarray(batch)
    rs = [r] * model.num_layers if np.isscalar(r) else list(r)
    states = layer_inputs(model, rows)
    kept_all, objectives, enumerations = [], [], []
    current = model
    for li, layer in enumerate(model.layers):
        rl = int(rs[li])
        if not 1 <= rl < layer.n:
            raise ValueError(f"o-prune needs 1 <= r < n, got r={rl}, n={layer.n}")
        subsets = _candidate_subsets(layer.n, rl, budget, seed + li)
        if end_to_end:
            errs = _end_to_end_errors(current, li, rows, states[-1], subsets)
        else:
            x = states[li]
            outputs = stored_expert_outputs(layer, x)[np.asarray(layer.remap)]
            logits = router_logits(layer, x)
            errs = np.concatenate(
                [
                    _subset_errors(logits, outputs, states[li + 1], subsets[s : s + chunk], layer.k)
                    for s in range(0, len(subsets), chunk)
                ]
            )
        best = int(np.argmin(errs))
        kept_all.append(tuple(int(i) for i in subsets[best]))
        objectives.append(float(errs[best]))
        if debug:
            enumerations.append(tuple((tuple(map(int, s)), float(e)) for s, e in zip(subsets, errs)))
        if end_to_end:
            current = current.replace_layer(li, prune_layer(layer, kept_all[-1]))
    tag = "o-prune" if budget == "exhaustive" else f"o-prune-sampled-{budget[1]}"
    return PruneResult(
        tuple(kept_all), tag, tuple(objectives), tuple(enumerations) if debug else None
    )


def _end_to_end_errors(current: MoeModel, li: int, rows, y_ref, subsets) -> np.ndarray:
    from .core import model_forward

    errs = np.empty(len(subsets))
    for b, s in enumerate(subsets):
        cand = current.replace_layer(li, prune_layer(current.layers[li], s))
        diff = model_forward(cand, rows) - y_ref
        errs[b] = np.sqrt((diff * diff).sum(axis=1)).sum()
    return errs


def msmoe_group(stats: LayerStats, r: int, features: FeatureMatrix) -> ClusterAssignment:
    """One-shot grouping: the r most used experts seed clusters, the rest join the nearest seed.

    Distances are Euclidean on ``features`` (router-space features in the
    usual setup); there is no re-centring after assignment.
    """
    n = stats.n
    if not 1 <= r <= n:
        raise ValueError(f"target cluster count r={r} outside 1..{n}")
    if features.n != n:
        raise ValueError("feature rows must match the number of experts")
    order = sorted(range(n), key=lambda i: (-int(stats.frequency[i]), i))
    seeds = sorted(order[:r])
    x = features.rows
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        if i in seeds:
            labels[i] = seeds.index(i)
        else:
            d = np.sqrt(((x[seeds] - x[i]) ** 2).sum(axis=1))
            labels[i] = int(np.argmin(d))
    return ClusterAssignment(canonical_labels(labels), r, (), "msmoe")
