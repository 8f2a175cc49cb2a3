"""End-to-end helpers: features -> clusters -> merged model."""

from __future__ import annotations

from .baselines import msmoe_group
from .calibration import CalibrationStats
from .clustering import (
    ClusterAssignment,
    FeatureMatrix,
    distance_matrix,
    expert_output_features,
    fcm_cluster,
    hierarchical_cluster,
    kmeans_cluster,
    router_features,
    weight_features,
)
from .core import MoeModel
from .merging import apply_merge_plan, make_merge_plan

METRICS = ("eo", "rl", "weight")
METHODS = ("hc", "kmeans-fix", "kmeans-rnd", "fcm")


def layer_features(
    model: MoeModel, stats: CalibrationStats, metric: str = "eo", router_variant: str = "weight-column"
) -> list[FeatureMatrix]:
    if metric == "eo":
        return [expert_output_features(s) for s in stats.layers]
    if metric == "rl":
        return [router_features(l, s, router_variant) for l, s in zip(model.layers, stats.layers)]
    if metric == "weight":
        return [weight_features(l) for l in model.layers]
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def cluster_features(
    features: FeatureMatrix, r: int, method: str = "hc", linkage: str = "average", seed: int = 0
) -> ClusterAssignment:
    if method == "hc":
        return hierarchical_cluster(distance_matrix(features), r, linkage)
    if method == "kmeans-fix":
        return kmeans_cluster(features, r, init="fixed")
    if method == "kmeans-rnd":
        return kmeans_cluster(features, r, init="random", seed=seed)
    if method == "fcm":
        mem, _ = fcm_cluster(features, r)
        return ClusterAssignment.from_labels(mem.hard_labels(), method="fcm")
    raise ValueError(f"unknown clustering method {method!r}; expected one of {METHODS}")


def cluster_model(
    model: MoeModel,
    stats: CalibrationStats,
    budgets,
    metric: str = "eo",
    linkage: str = "average",
    method: str = "hc",
    seed: int = 0,
    router_variant: str = "weight-column",
) -> list[ClusterAssignment]:
    budgets = [budgets] * model.num_layers if isinstance(budgets, int) else list(budgets)
    feats = layer_features(model, stats, metric, router_variant)
    return [cluster_features(f, int(r), method, linkage, seed) for f, r in zip(feats, budgets)]


def hc_smoe(
    model: MoeModel,
    stats: CalibrationStats,
    budgets,
    metric: str = "eo",
    linkage: str = "average",
    strategy: str = "frequency",
    fixdom_features: str = "act",
):
    """Cluster every layer with HC and merge; returns ``(merged_model, plan)``."""
    assignments = cluster_model(model, stats, budgets, metric, linkage)
    plan = make_merge_plan(assignments, stats, strategy, fixdom_features)
    return apply_merge_plan(model, plan, stats), plan


def msmoe_merge(
    model: MoeModel,
    stats: CalibrationStats,
    budgets,
    strategy: str = "frequency",
    router_variant: str = "weight-column",
):
    """One-shot router-space grouping followed by weight-space merging."""
    budgets = [budgets] * model.num_layers if isinstance(budgets, int) else list(budgets)
    feats = layer_features(model, stats, "rl", router_variant)
    assignments = [msmoe_group(s, int(r), f) for s, f, r in zip(stats.layers, feats, budgets)]
    plan = make_merge_plan(assignments, stats, strategy)
    return apply_merge_plan(model, plan, stats), plan
