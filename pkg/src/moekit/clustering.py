"""Grouping experts: hierarchical clustering plus K-means and fuzzy C-means baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationStats, LayerStats
from .core import MoeLayer

LINKAGES = ("single", "complete", "average")
FEATURE_KINDS = ("expert-output", "router-logits", "weight")
ROUTER_VARIANTS = ("weight-column", "logit-profile")


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    rows: np.ndarray
    kind: str = "expert-output"

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ValueError(f"feature matrix must be n x dim with n >= 1, got {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("feature matrix contains NaN or Inf")
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def canonical_labels(labels) -> tuple[int, ...]:
    """Relabel so clusters are numbered by first appearance."""
    seen: dict[int, int] = {}
    return tuple(seen.setdefault(int(x), len(seen)) for x in labels)


@dataclass(frozen=True)
class ClusterAssignment:
    """Surjective map expert -> cluster, with the agglomeration trace for HC."""

    labels: tuple
    r: int
    merge_trace: tuple = ()
    method: str = "hc"

    def __post_init__(self):
        labels = tuple(int(x) for x in self.labels)
        if sorted(set(labels)) != list(range(self.r)):
            raise ValueError(f"labels {labels} are not surjective onto 0..{self.r - 1}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "merge_trace", tuple(tuple(t) for t in self.merge_trace))

    @property
    def n(self) -> int:
        return len(self.labels)

    def clusters(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.r)]
        for i, j in enumerate(self.labels):
            out[j].append(i)
        return out

    @classmethod
    def from_labels(cls, labels, method: str = "given", merge_trace=()) -> "ClusterAssignment":
        labels = canonical_labels(labels)
        return cls(labels, len(set(labels)), merge_trace, method)

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "r": self.r,
            "method": self.method,
            "merge_trace": [[int(a), int(b), float(d)] for a, b, d in self.merge_trace],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterAssignment":
        trace = [(int(a), int(b), float(x)) for a, b, x in d.get("merge_trace", [])]
        return cls(tuple(d["labels"]), int(d["r"]), tuple(trace), d.get("method", "given"))


@dataclass(frozen=True, eq=False)
class Membership:
    """Fuzzy membership degrees ``u`` (n x r), rows summing to one."""

    u: np.ndarray
    objective: tuple = ()
    iterations: int = 0

    def hard_labels(self) -> tuple[int, ...]:
        return tuple(int(j) for j in np.argmax(self.u, axis=1))


# -- features ---------------------------------------------------------------


def expert_output_features(stats: LayerStats) -> FeatureMatrix:
    return FeatureMatrix(stats.mean_output, "expert-output")


def router_features(
    layer: MoeLayer, stats: LayerStats | None = None, variant: str = "weight-column"
) -> FeatureMatrix:
    """Router-space features.

    ``weight-column`` uses expert i's column of the router matrix;
    ``logit-profile`` uses the mean router-logit vector over the calibration
    tokens that selected expert i.
    """
    if variant == "weight-column":
        return FeatureMatrix(layer.router.astype(np.float64).T, "router-logits")
    if variant == "logit-profile":
        if stats is None:
            raise ValueError("logit-profile router features need calibration stats")
        return FeatureMatrix(stats.logit_profile, "router-logits")
    raise ValueError(f"unknown router feature variant {variant!r}; expected one of {ROUTER_VARIANTS}")


def weight_features(layer: MoeLayer) -> FeatureMatrix:
    rows = []
    for j in layer.remap:
        e = layer.experts[j]
        rows.append(np.concatenate([e.w_gate.ravel(), e.w_up.ravel(), e.w_down.ravel()]))
    return FeatureMatrix(np.asarray(rows, dtype=np.float64), "weight")


# -- distances and hierarchical clustering -----------------------------------


def distance_matrix(f) -> np.ndarray:
    """Pairwise Euclidean distances between feature rows."""
    rows = f.rows if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64)
    if np.isnan(rows).any():
        raise ValueError("NaN in features")
    diff = rows[:, None, :] - rows[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _linkage_matrix(d: np.ndarray, members: np.ndarray, linkage: str) -> np.ndarray:
    # members: boolean (m clusters x n points)
    if linkage == "average":
        w = members.astype(np.float64)
        sizes = w.sum(axis=1)
        return (w @ d @ w.T) / np.outer(sizes, sizes)
    if linkage == "single":
        fill, reduce = np.inf, np.min
    elif linkage == "complete":
        fill, reduce = -np.inf, np.max
    else:
        raise ValueError(f"unknown linkage {linkage!r}; expected one of {LINKAGES}")
    per_point = reduce(np.where(members[:, :, None], d[None, :, :], fill), axis=1)
    return reduce(np.where(members[None, :, :], per_point[:, None, :], fill), axis=2)


def hierarchical_cluster(d, r: int, linkage: str = "average") -> ClusterAssignment:
    """Bottom-up agglomeration from singletons down to ``r`` clusters.

    Cluster ids follow the usual dendrogram convention: points are ``0..n-1``
    and the cluster created by the t-th merge gets id ``n + t``. Among
    minimum-distance pairs the lexicographically smallest id pair merges.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if not 1 <= r <= n:
        raise ValueError(f"target cluster count r={r} outside 1..{n}")
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r}; expected one of {LINKAGES}")

    ids = list(range(n))
    members = np.eye(n, dtype=bool)
    trace = []
    next_id = n
    while len(ids) > r:
        link = _linkage_matrix(d, members, linkage)
        link[np.tril_indices(len(ids))] = np.inf
        a, b = np.unravel_index(np.argmin(link), link.shape)
        trace.append((ids[a], ids[b], float(link[a, b])))
        merged = members[a] | members[b]
        keep = [i for i in range(len(ids)) if i not in (a, b)]
        members = np.vstack([members[keep], merged[None]])
        ids = [ids[i] for i in keep] + [next_id]
        next_id += 1

    labels = np.empty(n, dtype=np.int64)
    for j, row in enumerate(members):
        labels[row] = j
    canon = canonical_labels(labels)
    return ClusterAssignment(canon, r, tuple(trace), f"hc-{linkage}")


# -- K-means ------------------------------------------------------------------


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def kmeans_cluster(
    f, r: int, init: str = "fixed", seed: int = 0, max_iter: int = 300
) -> ClusterAssignment:
    """Lloyd's algorithm.

    ``init="fixed"`` seeds centres with the first ``r`` rows; ``init="random"``
    draws ``r`` distinct rows with the given seed. An emptied cluster is
    reseeded with the point farthest from its current centre.
    """
    x = f.rows if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= r <= n:
        raise ValueError(f"target cluster count r={r} outside 1..{n}")
    if init == "fixed":
        centers = x[:r].copy()
    elif init == "random":
        centers = x[np.sort(_rng(seed).choice(n, size=r, replace=False))].copy()
    else:
        raise ValueError(f"unknown init {init!r}")

    labels = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=r)
        for j in np.flatnonzero(counts == 0):
            own = d2[np.arange(n), new]
            movable = counts[new] > 1
            if not movable.any():
                break
            cand = np.where(movable, own, -1.0)
            p = int(np.argmax(cand))
            if cand[p] <= 0.0:
                break
            counts[new[p]] -= 1
            new[p] = j
            counts[j] += 1
            centers[j] = x[p]
            d2[:, j] = ((x - centers[j]) ** 2).sum(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(r):
            mask = labels == j
            if mask.any():
                centers[j] = x[mask].mean(axis=0)
    return ClusterAssignment.from_labels(labels, method=f"kmeans-{init}")


# -- fuzzy C-means ---------------------------------------------------------------


def _fcm_memberships(x: np.ndarray, centers: np.ndarray, m: float) -> np.ndarray:
    dist = np.sqrt(((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
    u = np.zeros_like(dist)
    zero = dist == 0.0
    hit = zero.any(axis=1)
    if hit.any():
        u[hit, np.argmax(zero[hit], axis=1)] = 1.0
    rest = ~hit
    if rest.any():
        w = dist[rest] ** (-2.0 / (m - 1.0))
        u[rest] = w / w.sum(axis=1, keepdims=True)
    return u


def _fcm_centers(x: np.ndarray, u: np.ndarray, m: float) -> np.ndarray:
    um = u**m
    return (um.T @ x) / um.sum(axis=0)[:, None]


def fcm_objective(x: np.ndarray, u: np.ndarray, centers: np.ndarray, m: float) -> float:
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float(((u**m) * d2).sum())


def fcm_cluster(
    f,
    r: int,
    m: float = 2.0,
    tol: float = 1e-6,
    max_iter: int = 300,
    init: str = "fixed",
    seed: int = 0,
) -> tuple[Membership, np.ndarray]:
    """Fuzzy C-means with alternating membership / centre updates.

    Centres start at the first ``r`` rows (``init="fixed"``) or at ``r``
    seeded random rows. Iteration stops once memberships move by less than
    ``tol`` in max-norm.
    """
    x = f.rows if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= r <= n:
        raise ValueError(f"target cluster count r={r} outside 1..{n}")
    if m <= 1.0:
        raise ValueError("fuzzifier m must exceed 1")
    if init == "fixed":
        centers = x[:r].copy()
    elif init == "random":
        centers = x[np.sort(_rng(seed).choice(n, size=r, replace=False))].copy()
    else:
        raise ValueError(f"unknown init {init!r}")

    u = _fcm_memberships(x, centers, m)
    history = [fcm_objective(x, u, centers, m)]
    it = 0
    for it in range(1, max_iter + 1):
        centers = _fcm_centers(x, u, m)
        history.append(fcm_objective(x, u, centers, m))
        new_u = _fcm_memberships(x, centers, m)
        history.append(fcm_objective(x, new_u, centers, m))
        delta = np.abs(new_u - u).max()
        u = new_u
        if delta < tol:
            break
    return Membership(u, tuple(history), it), centers


# -- per-layer budgets ----------------------------------------------------------


def global_keep(scores: list, keep_ratio: float) -> list[list[int]]:
    """Keep the globally top-scoring experts, at least one per layer.

    Ties in score are broken by expert index, then layer, so uniform scores
    spread the budget evenly. A layer left empty receives its best expert
    and the surplus is taken back from the layer holding the most experts.
    """
    if not scores or any(len(s) == 0 for s in scores):
        raise ValueError("empty statistics")
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    total = sum(len(s) for s in scores)
    budget = math.ceil(keep_ratio * total - 1e-9)
    if budget < len(scores):
        raise ValueError(
            f"budget of {budget} experts cannot keep one expert in each of {len(scores)} layers"
        )
    entries = [
        (-float(v), i, layer) for layer, s in enumerate(scores) for i, v in enumerate(s)
    ]
    entries.sort()
    rank = {(layer, i): pos for pos, (_, i, layer) in enumerate(entries)}
    kept: list[list[int]] = [[] for _ in scores]
    for _, i, layer in entries[:budget]:
        kept[layer].append(i)

    surplus = 0
    for layer, s in enumerate(scores):
        if not kept[layer]:
            best = min(range(len(s)), key=lambda i: rank[(layer, i)])
            kept[layer].append(best)
            surplus += 1
    for _ in range(surplus):
        big = max(range(len(kept)), key=lambda l: (len(kept[l]), -l))
        worst = max(kept[big], key=lambda i: rank[(big, i)])
        kept[big].remove(worst)
    return [sorted(k) for k in kept]


def non_uniform_budgets(stats: CalibrationStats, keep_ratio: float) -> list[int]:
    """Per-layer cluster counts from the globally most frequently used experts."""
    if not stats.layers:
        raise ValueError("empty statistics")
    return [len(k) for k in global_keep([s.frequency for s in stats.layers], keep_ratio)]
