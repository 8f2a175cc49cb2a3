"""Fidelity metrics, cluster-validity indices and brute-force oracles."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.metrics import adjusted_rand_score

from .calibration import CalibrationStats
from .clustering import (
    ClusterAssignment,
    FeatureMatrix,
    distance_matrix,
    expert_output_features,
    fcm_cluster,
    hierarchical_cluster,
)
from .core import (
    MoeLayer,
    MoeModel,
    TokenBatch,
    layer_inputs,
    model_forward,
    routing_matrix,
    smoe_forward,
    stored_expert_outputs,
)
from .merging import merge_linear

DUNN_CAP = 1e12
MAX_ORACLE_N = 12


@dataclass
class Fidelity:
    l2_error: float
    l2_mean: float
    cosine_sim: float


@dataclass
class QualityReport:
    l2_error: float
    l2_mean: float
    cosine_sim: float
    silhouette_euc: float | None = None
    silhouette_cos: float | None = None
    dunn_euc: float | None = None
    dunn_cos: float | None = None
    jensen_slack: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def adjusted_rand(a, b) -> float:
    la = a.labels if isinstance(a, ClusterAssignment) else a
    lb = b.labels if isinstance(b, ClusterAssignment) else b
    return float(adjusted_rand_score(list(la), list(lb)))


# -- output fidelity ---------------------------------------------------------------


def _rows(batch) -> np.ndarray:
    return batch.vectors if isinstance(batch, TokenBatch) else np.asarray(batch, dtype=np.float64)


def compare_outputs(t: np.ndarray, s: np.ndarray) -> Fidelity:
    """Summed per-token L2 distance and mean per-token cosine similarity."""
    if t.shape != s.shape:
        raise ValueError(f"output shapes differ: {t.shape} vs {s.shape}")
    l2 = np.sqrt(((t - s) ** 2).sum(axis=1))
    nt = np.linalg.norm(t, axis=1)
    ns = np.linalg.norm(s, axis=1)
    denom = nt * ns
    cos = np.where(
        denom > 0,
        (t * s).sum(axis=1) / np.where(denom > 0, denom, 1.0),
        np.where((nt == 0) & (ns == 0), 1.0, 0.0),
    )
    cos = np.clip(cos, -1.0, 1.0)
    return Fidelity(float(l2.sum()), float(l2.mean()), float(cos.mean()))


def output_fidelity(orig: MoeModel, reduced: MoeModel, batch) -> Fidelity:
    """Compare the final-layer outputs of two models on the same tokens."""
    if orig.d_h != reduced.d_h:
        raise ValueError(f"width mismatch: {orig.d_h} vs {reduced.d_h}")
    rows = _rows(batch)
    return compare_outputs(model_forward(orig, rows), model_forward(reduced, rows))


# -- Jensen bound ------------------------------------------------------------------


def jensen_check(orig: MoeLayer, merged: MoeLayer, x) -> tuple[np.ndarray, np.ndarray]:
    """Per-token squared merge error and its routing-weighted intra-cluster bound.

    ``error = ||y_orig - y_merged||^2`` and
    ``bound = sum_i P_i(x) ||E_i(x) - Ebar_g(i)(x)||^2``, where ``Ebar`` is the
    stored merged expert serving slot ``i``.
    """
    if orig.n != merged.n or orig.k != merged.k or not np.array_equal(orig.router, merged.router):
        raise ValueError("merged layer was not derived from this layer by a merge plan")
    rows = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = routing_matrix(orig, rows)
    e = stored_expert_outputs(orig, rows)[np.asarray(orig.remap)]
    ebar = stored_expert_outputs(merged, rows)[np.asarray(merged.remap)]
    gap = ((e - ebar) ** 2).sum(axis=2)  # n x T
    bound = (p * gap.T).sum(axis=1)
    diff = smoe_forward(orig, rows) - smoe_forward(merged, rows)
    error = (diff * diff).sum(axis=1)
    return error, bound


def jensen_slack(orig: MoeModel, merged: MoeModel, batch) -> float:
    """Minimum of ``bound - error`` over all layers and tokens, layer inputs from ``orig``."""
    states = layer_inputs(orig, _rows(batch))
    slack = math.inf
    for lo, lm, x in zip(orig.layers, merged.layers, states):
        err, bound = jensen_check(lo, lm, x)
        slack = min(slack, float((bound - err).min()))
    return slack


# -- cluster validity ------------------------------------------------------------------


def pairwise_distances(f, metric: str = "euclidean") -> np.ndarray:
    x = f.rows if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64)
    if metric == "euclidean":
        return distance_matrix(x)
    if metric == "cosine":
        norm = np.linalg.norm(x, axis=1)
        unit = np.divide(x, norm[:, None], out=np.zeros_like(x), where=norm[:, None] > 0)
        d = 1.0 - unit @ unit.T
        np.fill_diagonal(d, 0.0)
        return np.clip(d, 0.0, 2.0)
    raise ValueError(f"unknown metric {metric!r}")


def _labels(a) -> np.ndarray:
    return np.asarray(a.labels if isinstance(a, ClusterAssignment) else a)


def silhouette(f, a, metric: str = "euclidean") -> float:
    """Mean silhouette; points in singleton clusters and 0/0 cases score 0."""
    labels = _labels(a)
    groups = np.unique(labels)
    if len(groups) < 2:
        raise ValueError("silhouette needs at least two clusters")
    d = pairwise_distances(f, metric)
    n = len(labels)
    scores = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a_i = d[i, own].sum() / (own.sum() - 1)
        b_i = min(d[i, labels == g].mean() for g in groups if g != labels[i])
        m = max(a_i, b_i)
        scores[i] = 0.0 if m == 0 else (b_i - a_i) / m
    return float(scores.mean())


def dunn_index(f, a, metric: str = "euclidean") -> float:
    """Smallest between-cluster point distance over largest cluster diameter (capped)."""
    labels = _labels(a)
    if len(np.unique(labels)) < 2:
        raise ValueError("Dunn index needs at least two clusters")
    d = pairwise_distances(f, metric)
    same = labels[:, None] == labels[None, :]
    separation = d[~same].min()
    diameter = d[same].max()
    if diameter == 0:
        return DUNN_CAP
    return float(min(separation / diameter, DUNN_CAP))


# -- exhaustive partition oracle ------------------------------------------------------


def stirling2(n: int, r: int) -> int:
    """Number of partitions of n items into r nonempty blocks (explicit alternating sum)."""
    if r < 0 or n < 0:
        return 0
    total = sum((-1) ** i * math.comb(r, i) * (r - i) ** n for i in range(r + 1))
    return total // math.factorial(r)


def set_partitions(n: int, r: int):
    """Yield restricted-growth label tuples for every partition of n items into r blocks.

    Partitions come out in lexicographic order of their label strings.
    """
    if not 1 <= r <= n:
        return
    labels = [0] * n

    def rec(i: int, used: int):
        if i == n:
            if used == r:
                yield tuple(labels)
            return
        remaining = n - i
        for b in range(min(used + 1, r)):
            new_used = max(used, b + 1)
            if new_used + remaining - 1 < r:
                continue
            labels[i] = b
            yield from rec(i + 1, new_used)

    labels[0] = 0
    yield from rec(1, 1)


def partition_cost(f, labels) -> float:
    """Sum of squared distances from each point to its cluster mean."""
    x = f.rows if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64)
    labels = _labels(labels)
    cost = 0.0
    for g in np.unique(labels):
        pts = x[labels == g]
        cost += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return cost


def opt_partition_oracle(f, r: int, max_n: int = MAX_ORACLE_N, chunk: int = 4096):
    """Exact minimum-variance partition into exactly r blocks by enumeration.

    Returns ``(assignment, cost, count)`` where ``count`` is the number of
    partitions enumerated. Ties go to the lexicographically first labelling.
    """
    x = f.rows if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64)
    n = x.shape[0]
    if n > max_n:
        raise ValueError(f"exhaustive partition oracle limited to n <= {max_n}, got n={n}")
    if not 1 <= r <= n:
        raise ValueError(f"r={r} outside 1..{n}")
    sq = float((x * x).sum())
    best_cost, best_labels, count = math.inf, None, 0
    buf = []

    def flush():
        nonlocal best_cost, best_labels
        lab = np.asarray(buf, dtype=np.int64)
        onehot = lab[:, :, None] == np.arange(r)[None, None, :]  # P x n x r
        sums = np.einsum("pnr,nd->prd", onehot.astype(np.float64), x)
        sizes = onehot.sum(axis=1)
        costs = sq - ((sums * sums).sum(axis=2) / sizes).sum(axis=1)
        j = int(np.argmin(costs))
        if costs[j] < best_cost:
            best_cost, best_labels = float(costs[j]), buf[j]
        buf.clear()

    for lab in set_partitions(n, r):
        buf.append(lab)
        count += 1
        if len(buf) >= chunk:
            flush()
    if buf:
        flush()
    assignment = ClusterAssignment(best_labels, r, (), "opt")
    return assignment, partition_cost(x, best_labels), count


def hc_opt_ratio(f, r: int, linkage: str = "average") -> dict:
    """Cost of HC against the exhaustive optimum on the same features."""
    hc = hierarchical_cluster(distance_matrix(f), r, linkage)
    opt, opt_cost, count = opt_partition_oracle(f, r)
    hc_cost = partition_cost(f, hc.labels)
    n = f.n if isinstance(f, FeatureMatrix) else len(f)
    return {
        "hc_cost": hc_cost,
        "opt_cost": opt_cost,
        "ratio": hc_cost / opt_cost if opt_cost > 0 else (1.0 if hc_cost == 0 else math.inf),
        "partitions": count,
        "stirling": stirling2(n, r),
        "hc_labels": list(hc.labels),
        "opt_labels": list(opt.labels),
    }


# -- soft (fuzzy) merging -----------------------------------------------------------


def fcm_merge_layer(layer: MoeLayer, u: np.ndarray) -> MoeLayer:
    """Membership-weighted merge of experts and router columns.

    Merged expert j is ``sum_i u_ij E_i / sum_i u_ij``; router column j is
    ``sum_i u_ij W_R[:, i]``. The merged layer routes over r slots.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape[0] != layer.n:
        raise ValueError("membership rows must match the layer's experts")
    experts = [layer.experts[j] for j in layer.remap]
    mass = u.sum(axis=0)
    merged = []
    for j in range(u.shape[1]):
        if mass[j] <= 0:
            raise ValueError(f"cluster {j} has zero total membership")
        w = u[:, j] / mass[j]
        live = np.flatnonzero(w > 0)
        merged.append(merge_linear([experts[i] for i in live], w[live]))
    router = layer.router.astype(np.float64) @ u
    return MoeLayer(router.astype(np.float32), tuple(merged), None, min(layer.k, u.shape[1]))


def fcm_merge_model(model: MoeModel, memberships) -> MoeModel:
    return MoeModel(
        tuple(fcm_merge_layer(layer, u) for layer, u in zip(model.layers, memberships)),
        model.d_h,
        model.d_m,
    )


def fcm_merge_eval(model: MoeModel, stats: CalibrationStats, r, batch, m: float = 2.0):
    """Soft-cluster each layer on mean expert outputs, merge, and measure fidelity.

    Returns ``(QualityReport, merged_model, memberships)``.
    """
    rs = [r] * model.num_layers if np.isscalar(r) else list(r)
    memberships = []
    for s, rl in zip(stats.layers, rs):
        mem, _ = fcm_cluster(expert_output_features(s), int(rl), m=m)
        memberships.append(mem.u)
    merged = fcm_merge_model(model, memberships)
    fid = output_fidelity(model, merged, batch)
    return QualityReport(fid.l2_error, fid.l2_mean, fid.cosine_sim), merged, memberships


def quality_report(
    orig: MoeModel,
    reduced: MoeModel,
    batch,
    features=None,
    assignments=None,
    with_jensen: bool = True,
) -> QualityReport:
    """Fidelity plus layer-averaged cluster indices and the Jensen slack when applicable."""
    fid = output_fidelity(orig, reduced, batch)
    rep = QualityReport(fid.l2_error, fid.l2_mean, fid.cosine_sim)
    if features is not None and assignments is not None:
        vals = {"silhouette_euc": [], "silhouette_cos": [], "dunn_euc": [], "dunn_cos": []}
        for f, a in zip(features, assignments):
            if a.r < 2 or a.r == a.n:
                continue
            vals["silhouette_euc"].append(silhouette(f, a, "euclidean"))
            vals["silhouette_cos"].append(silhouette(f, a, "cosine"))
            vals["dunn_euc"].append(dunn_index(f, a, "euclidean"))
            vals["dunn_cos"].append(dunn_index(f, a, "cosine"))
        for key, v in vals.items():
            if v:
                setattr(rep, key, float(np.mean(v)))
    if with_jensen and all(
        lo.n == lm.n and np.array_equal(lo.router, lm.router)
        for lo, lm in zip(orig.layers, reduced.layers)
    ) and orig.num_layers == reduced.num_layers:
        rep.jensen_slack = jensen_slack(orig, reduced, batch)
    return rep
