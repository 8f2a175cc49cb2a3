"""Weight-space merging of expert clusters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationStats
from .clustering import ClusterAssignment
from .core import ExpertWeights, MoeLayer, MoeModel

STRATEGIES = ("average", "frequency", "fixdom")
FIXDOM_FEATURES = ("act", "weight", "act+weight")


class MissingActivationCache(ValueError):
    pass


@dataclass(frozen=True)
class LayerPlan:
    assignment: ClusterAssignment
    strategy: str
    alphas: tuple
    dominant: tuple | None = None
    features: str = "act"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown merge strategy {self.strategy!r}")
        clusters = self.assignment.clusters()
        if len(self.alphas) != len(clusters):
            raise ValueError("one alpha list per cluster required")
        for members, alpha in zip(clusters, self.alphas):
            if len(alpha) != len(members):
                raise ValueError("alpha list length must match cluster size")
            if min(alpha) < 0 or abs(sum(alpha) - 1.0) > 1e-6:
                raise ValueError(f"alphas {alpha} must be nonnegative and sum to 1")
        if self.dominant is not None:
            for members, dom in zip(clusters, self.dominant):
                if dom not in members:
                    raise ValueError(f"dominant expert {dom} is not in cluster {members}")

    def to_dict(self) -> dict:
        return {
            "assignment": self.assignment.to_dict(),
            "strategy": self.strategy,
            "alphas": [list(a) for a in self.alphas],
            "dominant": None if self.dominant is None else list(self.dominant),
            "features": self.features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerPlan":
        dom = d.get("dominant")
        return cls(
            ClusterAssignment.from_dict(d["assignment"]),
            d["strategy"],
            tuple(tuple(float(x) for x in a) for a in d["alphas"]),
            None if dom is None else tuple(int(x) for x in dom),
            d.get("features", "act"),
        )


@dataclass(frozen=True)
class MergePlan:
    layers: tuple

    def to_dict(self) -> dict:
        return {"layers": [p.to_dict() for p in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "MergePlan":
        return cls(tuple(LayerPlan.from_dict(p) for p in d["layers"]))


def build_alphas(cluster, frequency, strategy: str) -> list[float]:
    """Merge coefficients for one cluster; a zero-usage cluster falls back to averaging."""
    members = list(cluster)
    if not members:
        raise ValueError("empty cluster")
    uniform = [1.0 / len(members)] * len(members)
    if strategy in ("average", "fixdom"):
        return uniform
    if strategy != "frequency":
        raise ValueError(f"unknown merge strategy {strategy!r}")
    f = np.asarray([float(frequency[i]) for i in members])
    total = f.sum()
    if total <= 0:
        return uniform
    return (f / total).tolist()


def merge_linear(experts, alphas) -> ExpertWeights:
    """Alpha-weighted sum of the members' matrices."""
    experts = list(experts)
    alphas = np.asarray(alphas, dtype=np.float64)
    if len(experts) != len(alphas) or not experts:
        raise ValueError("need one alpha per expert")
    shape = experts[0].w_gate.shape
    if any(e.w_gate.shape != shape for e in experts):
        raise ValueError("experts in a cluster have different shapes")
    if len(experts) == 1:
        e = experts[0]
        return ExpertWeights(e.w_gate, e.w_up, e.w_down)
    mats = []
    for name in ("w_gate", "w_up", "w_down"):
        acc = sum(a * getattr(e, name).astype(np.float64) for a, e in zip(alphas, experts))
        mats.append(acc.astype(np.float32))
    return ExpertWeights(*mats)


def _weight_columns(e: ExpertWeights) -> np.ndarray:
    # one column per intermediate unit: its W_gate column, W_up column, W_down row
    return np.vstack([e.w_gate, e.w_up, e.w_down.T]).astype(np.float64)


def _zscore_columns(a: np.ndarray) -> np.ndarray:
    centered = a - a.mean(axis=0)
    std = centered.std(axis=0)
    return np.divide(centered, std, out=np.zeros_like(centered), where=std > 0)


def fixdom_feature_matrix(e: ExpertWeights, kind: str, activations=None) -> np.ndarray:
    """Samples x d_m feature matrix used to align intermediate units."""
    if kind == "weight":
        return _weight_columns(e)
    if activations is None:
        raise MissingActivationCache(
            "fix-dom merging with activation features needs cached activations; "
            "re-run calibration with cache_activations=True (--cache-activations)"
        )
    act = np.asarray(activations, dtype=np.float64)
    if kind == "act":
        return act
    if kind == "act+weight":
        return np.vstack([_zscore_columns(act), _zscore_columns(_weight_columns(e))])
    raise ValueError(f"unknown fix-dom feature kind {kind!r}")


def column_correlation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pearson correlation between every column of ``a`` and every column of ``b``.

    Columns with zero variance correlate 0 with everything.
    """
    def unit(x):
        c = x - x.mean(axis=0)
        norm = np.sqrt((c * c).sum(axis=0))
        return np.divide(c, norm, out=np.zeros_like(c), where=norm > 0)

    return unit(a).T @ unit(b)


def fixdom_match(features, dominant_features) -> np.ndarray:
    """For each unit of an expert, the dominant unit it correlates with most (ties -> lowest)."""
    return np.argmax(column_correlation(features, dominant_features), axis=1)


def fixdom_merge(experts, dominant: int, features, alphas) -> ExpertWeights:
    """Merge a cluster while keeping the dominant expert's unit order.

    ``dominant`` is a position in ``experts``; ``features[i]`` is the
    samples x d_m feature matrix of ``experts[i]``. Every unit of a
    non-dominant expert joins the dominant unit it correlates with most, and
    each output unit is the alpha-weighted mean of the units grouped onto it.
    """
    experts = list(experts)
    if not 0 <= dominant < len(experts):
        raise ValueError("dominant index outside cluster")
    alphas = np.asarray(alphas, dtype=np.float64)
    d_m = experts[dominant].d_m
    dom_feat = np.asarray(features[dominant], dtype=np.float64)
    targets = [
        np.arange(d_m) if pos == dominant else fixdom_match(np.asarray(feat), dom_feat)
        for pos, feat in enumerate(features)
    ]
    weight = np.zeros(d_m)
    for a, t in zip(alphas, targets):
        np.add.at(weight, t, a)
    if np.any(weight <= 0):
        # a unit fed only by zero-weight members: average that cluster plainly
        alphas = np.full(len(experts), 1.0 / len(experts))
        weight = np.zeros(d_m)
        for a, t in zip(alphas, targets):
            np.add.at(weight, t, a)

    gate = np.zeros((d_m, experts[0].d_h))
    up = np.zeros_like(gate)
    down = np.zeros_like(gate)
    for a, t, e in zip(alphas, targets, experts):
        np.add.at(gate, t, a * e.w_gate.T.astype(np.float64))
        np.add.at(up, t, a * e.w_up.T.astype(np.float64))
        np.add.at(down, t, a * e.w_down.astype(np.float64))
    w = weight[:, None]
    return ExpertWeights(
        (gate / w).T.astype(np.float32),
        (up / w).T.astype(np.float32),
        (down / w).astype(np.float32),
    )


def default_dominants(assignment: ClusterAssignment, frequency) -> tuple[int, ...]:
    """Most frequently used member of each cluster (ties -> lowest index)."""
    return tuple(max(c, key=lambda i: (frequency[i], -i)) for c in assignment.clusters())


def make_layer_plan(
    assignment: ClusterAssignment,
    frequency,
    strategy: str = "frequency",
    features: str = "act",
    dominant=None,
) -> LayerPlan:
    clusters = assignment.clusters()
    alphas = tuple(tuple(build_alphas(c, frequency, strategy)) for c in clusters)
    if strategy == "fixdom":
        if features not in FIXDOM_FEATURES:
            raise ValueError(f"unknown fix-dom feature kind {features!r}")
        dominant = tuple(dominant) if dominant is not None else default_dominants(assignment, frequency)
    else:
        dominant = None
    return LayerPlan(assignment, strategy, alphas, dominant, features)


def make_merge_plan(
    assignments,
    stats: CalibrationStats,
    strategy: str = "frequency",
    features: str = "act",
) -> MergePlan:
    if len(assignments) != len(stats.layers):
        raise ValueError("one assignment per layer required")
    return MergePlan(
        tuple(
            make_layer_plan(a, s.frequency, strategy, features)
            for a, s in zip(assignments, stats.layers)
        )
    )


def merge_layer(layer: MoeLayer, plan: LayerPlan, activations=None) -> MoeLayer:
    if plan.assignment.n != layer.n:
        raise ValueError(f"plan covers {plan.assignment.n} experts, layer routes to {layer.n}")
    merged = []
    for j, (members, alphas) in enumerate(zip(plan.assignment.clusters(), plan.alphas)):
        experts = [layer.experts[layer.remap[i]] for i in members]
        if plan.strategy == "fixdom":
            feats = [
                fixdom_feature_matrix(
                    e, plan.features, None if activations is None else activations[i]
                )
                for e, i in zip(experts, members)
            ]
            merged.append(fixdom_merge(experts, members.index(plan.dominant[j]), feats, alphas))
        else:
            merged.append(merge_linear(experts, alphas))
    return MoeLayer(layer.router, tuple(merged), plan.assignment.labels, layer.k)


def apply_merge_plan(model: MoeModel, plan: MergePlan, stats: CalibrationStats | None = None) -> MoeModel:
    """Replace each layer's experts with one merged expert per cluster; router untouched."""
    if len(plan.layers) != model.num_layers:
        raise ValueError(f"plan has {len(plan.layers)} layers, model has {model.num_layers}")
    layers = []
    for li, (layer, lp) in enumerate(zip(model.layers, plan.layers)):
        acts = None
        if lp.strategy == "fixdom" and lp.features != "weight":
            if stats is None or stats.layers[li].activations is None:
                raise MissingActivationCache(
                    "fix-dom merging with activation features needs cached activations; "
                    "re-run calibration with cache_activations=True (--cache-activations)"
                )
            acts = stats.layers[li].activations
        layers.append(merge_layer(layer, lp, acts))
    return MoeModel(tuple(layers), model.d_h, model.d_m)
