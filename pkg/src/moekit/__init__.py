"""Retraining-free SMoE compression by clustering experts on their outputs and merging them."""

import os as _os

# MOEKIT_THREADS caps BLAS threads; must be set before numpy loads its BLAS.
if _os.environ.get("MOEKIT_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["MOEKIT_THREADS"])

from .calibration import CalibrationStats, LayerStats, activation_features, collect_stats  # noqa: E402
from .clustering import (  # noqa: E402
    ClusterAssignment,
    FeatureMatrix,
    Membership,
    distance_matrix,
    fcm_cluster,
    hierarchical_cluster,
    kmeans_cluster,
    non_uniform_budgets,
)
from .core import (  # noqa: E402
    ExpertWeights,
    MoeLayer,
    MoeModel,
    TokenBatch,
    expert_forward,
    model_forward,
    route,
    smoe_forward,
)
from .merging import MergePlan, apply_merge_plan, build_alphas, fixdom_merge, merge_linear  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "CalibrationStats",
    "ClusterAssignment",
    "ExpertWeights",
    "FeatureMatrix",
    "LayerStats",
    "Membership",
    "MergePlan",
    "MoeLayer",
    "MoeModel",
    "TokenBatch",
    "activation_features",
    "apply_merge_plan",
    "build_alphas",
    "collect_stats",
    "distance_matrix",
    "expert_forward",
    "fcm_cluster",
    "fixdom_merge",
    "hierarchical_cluster",
    "kmeans_cluster",
    "merge_linear",
    "model_forward",
    "non_uniform_budgets",
    "route",
    "smoe_forward",
]
