"""``moekit`` command line: gen | calibrate | cluster | merge | prune | eval | oracle | params.

Every subcommand writes a JSON report to stdout or ``--out``. Failures exit
nonzero with a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .baselines import CombinatorialError, PruneResult, apply_prune, f_prune, o_prune, s_prune
from .calibration import ActivationCacheError, CalibrationStats, collect_stats
from .clustering import ClusterAssignment, LINKAGES, ROUTER_VARIANTS, non_uniform_budgets
from .evaluation import adjusted_rand, dunn_index, hc_opt_ratio, jensen_check, quality_report, silhouette
from .core import layer_inputs
from .merging import FIXDOM_FEATURES, STRATEGIES, MergePlan, MissingActivationCache, apply_merge_plan, make_merge_plan
from .pipeline import METHODS, METRICS, cluster_model, layer_features, msmoe_merge
from .synth import PlantedSpec, gen_batch, gen_planted_model, parse_spec

EXIT_CODES = {
    "error": 1,
    "bad_magic": 3,
    "version_mismatch": 4,
    "truncated": 5,
    "size_mismatch": 6,
    "combinatorial": 7,
    "missing_activation_cache": 8,
    "resource": 9,
    "not_found": 10,
}


def _stats_from(path) -> CalibrationStats:
    doc = io.read_report(path)
    return CalibrationStats.from_dict(doc["stats"] if "stats" in doc else doc)


def _assignments_from(path) -> list[ClusterAssignment]:
    doc = io.read_report(path)
    return [ClusterAssignment.from_dict(a) for a in doc["assignments"]]


def _cluster_metrics(features, assignments) -> list[dict]:
    rows = []
    for f, a in zip(features, assignments):
        row = {"r": a.r}
        if 2 <= a.r < a.n:
            row.update(
                silhouette_euc=silhouette(f, a, "euclidean"),
                silhouette_cos=silhouette(f, a, "cosine"),
                dunn_euc=dunn_index(f, a, "euclidean"),
                dunn_cos=dunn_index(f, a, "cosine"),
            )
        rows.append(row)
    return rows


# -- subcommands ---------------------------------------------------------------------


def cmd_gen(args) -> dict:
    spec = parse_spec(Path(args.config).read_text()) if args.config else PlantedSpec()
    overrides = {k: getattr(args, k) for k in ("seed", "noise", "tokens") if getattr(args, k) is not None}
    spec = spec.replace(**overrides)
    model, truth = gen_planted_model(spec)
    batch = gen_batch(spec)
    io.save_checkpoint(model, args.model_out)
    io.save_batch(batch, args.batch_out)
    return io.report_doc(
        "gen",
        {"seed": spec.seed, "spec": spec.to_dict()},
        truth=[list(t) for t in truth],
        expert_params=model.expert_params(),
    )


def cmd_calibrate(args) -> dict:
    model = io.load_checkpoint(args.model)
    batch = io.load_batch(args.batch)
    stats = collect_stats(model, batch, cache_activations=args.cache_activations, apply_silu=not args.no_silu)
    cache = None
    if args.cache_activations:
        cache = args.cache_out
        np.savez(cache, *[s.activations for s in stats.layers])
    return io.report_doc(
        "calibrate",
        {"cache_activations": args.cache_activations, "silu": not args.no_silu},
        stats=stats.to_dict(),
        activation_cache=None if cache is None else Path(cache).name,
    )


def cmd_cluster(args) -> dict:
    model = io.load_checkpoint(args.model)
    stats = _stats_from(args.stats)
    if args.non_uniform is not None:
        budgets = non_uniform_budgets(stats, args.non_uniform)
    else:
        budgets = [args.budget] * model.num_layers
    assignments = cluster_model(
        model, stats, budgets, args.metric, args.linkage, args.method, args.seed, args.router_variant
    )
    feats = layer_features(model, stats, args.metric, args.router_variant)
    return io.report_doc(
        "cluster",
        {
            "seed": args.seed,
            "method": args.method,
            "metric": args.metric,
            "linkage": args.linkage,
            "router_variant": args.router_variant,
            "budget": args.budget,
            "non_uniform": args.non_uniform,
        },
        budgets=budgets,
        assignments=[a.to_dict() for a in assignments],
        cluster_quality=_cluster_metrics(feats, assignments),
    )


def _load_activation_cache(path, stats: CalibrationStats):
    with np.load(path) as npz:
        for i, s in enumerate(stats.layers):
            s.activations = npz[f"arr_{i}"]


def cmd_merge(args) -> dict:
    model = io.load_checkpoint(args.model)
    stats = _stats_from(args.stats)
    assignments = _assignments_from(args.clusters)
    if args.strategy == "fixdom" and args.fixdom_features != "weight":
        if args.activations:
            _load_activation_cache(args.activations, stats)
        elif args.batch:
            cached = collect_stats(model, io.load_batch(args.batch), cache_activations=True)
            for s, c in zip(stats.layers, cached.layers):
                s.activations = c.activations
    plan = make_merge_plan(assignments, stats, args.strategy, args.fixdom_features)
    merged = apply_merge_plan(model, plan, stats)
    io.save_checkpoint(merged, args.model_out)
    return io.report_doc(
        "merge",
        {"strategy": args.strategy, "fixdom_features": args.fixdom_features},
        plan=plan.to_dict(),
        expert_params_before=model.expert_params(),
        expert_params_after=merged.expert_params(),
    )


def _parse_prune_method(tokens: list[str]):
    kind = tokens[0]
    if kind == "o-sampled":
        if len(tokens) != 2:
            raise ValueError("--method o-sampled takes a sample count, e.g. --method o-sampled 10000")
        return kind, int(tokens[1])
    if kind not in ("f", "s", "o", "msmoe") or len(tokens) != 1:
        raise ValueError(f"unknown prune method {' '.join(tokens)!r}")
    return kind, None


def cmd_prune(args) -> dict:
    model = io.load_checkpoint(args.model)
    kind, samples = _parse_prune_method(args.method)
    n = model.layers[0].n
    if args.ratio is None and args.budget is None:
        raise ValueError("give --ratio (fraction of experts kept) or --budget (experts per layer)")
    ratio = args.ratio if args.ratio is not None else args.budget / n
    budget = args.budget if args.budget is not None else max(1, math.ceil(ratio * n - 1e-9))
    meta = {"method": " ".join(args.method), "ratio": ratio, "budget": budget, "seed": args.seed}
    if kind in ("f", "s", "msmoe"):
        stats = _stats_from(args.stats)
    if kind == "msmoe":
        reduced, plan = msmoe_merge(model, stats, budget, args.strategy)
        io.save_checkpoint(reduced, args.model_out)
        meta["strategy"] = args.strategy
        return io.report_doc(
            "prune", meta, plan=plan.to_dict(),
            assignments=[lp.assignment.to_dict() for lp in plan.layers],
            expert_params_after=reduced.expert_params(),
        )
    if kind == "f":
        result = f_prune(stats, ratio)
    elif kind == "s":
        result = s_prune(stats, ratio)
    else:
        batch = io.load_batch(args.batch)
        mode = "exhaustive" if kind == "o" else ("sampled", samples)
        result = o_prune(model, batch, budget, mode, seed=args.seed)
    reduced = apply_prune(model, result)
    io.save_checkpoint(reduced, args.model_out)
    return io.report_doc("prune", meta, prune=result.to_dict(), expert_params_after=reduced.expert_params())


def cmd_eval(args) -> dict:
    orig = io.load_checkpoint(args.model)
    reduced = io.load_checkpoint(args.reduced)
    batch = io.load_batch(args.batch)
    feats = assignments = None
    if args.clusters and args.stats:
        stats = _stats_from(args.stats)
        assignments = _assignments_from(args.clusters)
        feats = layer_features(orig, stats, args.metric, args.router_variant)
    rep = quality_report(orig, reduced, batch, feats, assignments)
    sections = {"quality": rep.to_dict()}
    if rep.jensen_slack is not None:
        states = layer_inputs(orig, batch.vectors)
        per_layer = []
        for lo, lm, x in zip(orig.layers, reduced.layers, states):
            err, bound = jensen_check(lo, lm, x)
            per_layer.append(
                {
                    "max_error": float(err.max()),
                    "max_bound": float(bound.max()),
                    "slack": float((bound - err).min()),
                    "violations": int((err > bound + 1e-6).sum()),
                }
            )
        sections["jensen"] = per_layer
    if assignments is not None:
        sections["cluster_quality"] = _cluster_metrics(feats, assignments)
    if args.truth and assignments is not None:
        truth = io.read_report(args.truth)["truth"]
        sections["ari"] = [adjusted_rand(a, t) for a, t in zip(assignments, truth)]
    return io.report_doc("eval", {"metric": args.metric}, **sections)


def cmd_oracle(args) -> dict:
    model = io.load_checkpoint(args.model)
    stats = _stats_from(args.stats)
    feats = layer_features(model, stats, args.metric, args.router_variant)
    layers = range(len(feats)) if args.layer is None else [args.layer]
    rows = []
    for li in layers:
        row = hc_opt_ratio(feats[li], args.budget, args.linkage)
        row["layer"] = li
        row["within_3opt"] = row["ratio"] <= 3.0
        row["count_matches_stirling"] = row["partitions"] == row["stirling"]
        rows.append(row)
    return io.report_doc(
        "oracle", {"metric": args.metric, "linkage": args.linkage, "budget": args.budget}, layers=rows
    )


def cmd_params(args) -> dict:
    if args.preset:
        arch = io.PRESETS[args.preset]
        counts = args.experts or [arch.n_experts]
        return io.report_doc(
            "params",
            {"preset": args.preset},
            original_total=arch.total_params(),
            non_expert_params=arch.non_expert_params(),
            rows=io.params_table(arch, counts),
        )
    if not args.model:
        raise ValueError("params needs --preset or --model")
    orig = io.load_checkpoint(args.model)
    sections = {"expert_params": orig.expert_params()}
    if args.reduced:
        red = io.load_checkpoint(args.reduced)
        sections.update(
            reduced_expert_params=red.expert_params(),
            expert_ratio=red.expert_params() / orig.expert_params(),
        )
    return io.report_doc("params", {}, **sections)


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moekit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--out", help="report path (default stdout)")
        return sp

    sp = add("gen", cmd_gen, "generate a planted-redundancy model and token batch")
    sp.add_argument("--config", help="key=value spec file")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--tokens", type=int)
    sp.add_argument("--model-out", default="model.smck")
    sp.add_argument("--batch-out", default="batch.f32mat")

    sp = add("calibrate", cmd_calibrate, "collect expert statistics on a batch")
    sp.add_argument("--model", required=True)
    sp.add_argument("--batch", required=True)
    sp.add_argument("--cache-activations", action="store_true")
    sp.add_argument("--cache-out", default="activations.npz")
    sp.add_argument("--no-silu", action="store_true", help="cache (xW_gate)*(xW_up) without SiLU")

    def add_feature_flags(sp):
        sp.add_argument("--metric", choices=METRICS, default="eo")
        sp.add_argument("--router-variant", choices=ROUTER_VARIANTS, default="weight-column")

    sp = add("cluster", cmd_cluster, "group experts per layer")
    sp.add_argument("--model", required=True)
    sp.add_argument("--stats", required=True)
    add_feature_flags(sp)
    sp.add_argument("--linkage", choices=LINKAGES, default="average")
    sp.add_argument("--method", choices=METHODS, default="hc")
    sp.add_argument("--seed", type=int, default=0)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--budget", type=int, help="clusters per layer")
    g.add_argument("--non-uniform", type=float, metavar="RATIO", help="keep ratio for per-layer budgets")

    sp = add("merge", cmd_merge, "merge each cluster into one expert")
    sp.add_argument("--model", required=True)
    sp.add_argument("--stats", required=True)
    sp.add_argument("--clusters", required=True)
    sp.add_argument("--strategy", choices=STRATEGIES, default="frequency")
    sp.add_argument("--fixdom-features", choices=FIXDOM_FEATURES, default="act")
    sp.add_argument("--activations", help="activation cache written by calibrate --cache-activations")
    sp.add_argument("--batch", help="batch to recompute activations from (fixdom)")
    sp.add_argument("--model-out", default="merged.smck")

    sp = add("prune", cmd_prune, "baseline reductions")
    sp.add_argument("--model", required=True)
    sp.add_argument("--stats")
    sp.add_argument("--batch")
    sp.add_argument("--method", nargs="+", required=True, metavar="METHOD",
                    help="f | s | o | o-sampled N | msmoe")
    sp.add_argument("--ratio", type=float, help="fraction of experts kept")
    sp.add_argument("--budget", type=int, help="experts kept per layer")
    sp.add_argument("--strategy", choices=("average", "frequency"), default="frequency")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--model-out", default="pruned.smck")

    sp = add("eval", cmd_eval, "fidelity, cluster quality and merge-error bound")
    sp.add_argument("--model", required=True)
    sp.add_argument("--reduced", required=True)
    sp.add_argument("--batch", required=True)
    sp.add_argument("--stats")
    sp.add_argument("--clusters")
    sp.add_argument("--truth", help="gen report holding planted labels")
    add_feature_flags(sp)

    sp = add("oracle", cmd_oracle, "exhaustive optimum partition vs HC")
    sp.add_argument("--model", required=True)
    sp.add_argument("--stats", required=True)
    sp.add_argument("--budget", type=int, required=True)
    sp.add_argument("--layer", type=int)
    sp.add_argument("--linkage", choices=LINKAGES, default="average")
    add_feature_flags(sp)

    sp = add("params", cmd_params, "expert parameter counts before/after reduction")
    sp.add_argument("--preset", choices=sorted(io.PRESETS))
    sp.add_argument("--experts", type=int, nargs="*")
    sp.add_argument("--model")
    sp.add_argument("--reduced")
    return p


def _error_code(exc: BaseException) -> str:
    if isinstance(exc, io.CheckpointError):
        return exc.code
    if isinstance(exc, CombinatorialError):
        return "combinatorial"
    if isinstance(exc, MissingActivationCache):
        return "missing_activation_cache"
    if isinstance(exc, (ActivationCacheError, MemoryError)):
        return "resource"
    if isinstance(exc, FileNotFoundError):
        return "not_found"
    return "error"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        doc = args.func(args)
    except (ValueError, OSError, KeyError, MemoryError) as exc:
        code = _error_code(exc)
        sys.stderr.write(
            json.dumps({"error": code, "type": type(exc).__name__, "message": str(exc)}) + "\n"
        )
        return EXIT_CODES[code]
    doc["timing"] = {"seconds": time.perf_counter() - start}
    io.write_report(doc, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
