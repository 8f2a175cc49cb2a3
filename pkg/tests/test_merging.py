import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import rand_expert, rand_layer, rand_model
from moekit.calibration import collect_stats
from moekit.clustering import ClusterAssignment, hierarchical_cluster
from moekit.core import ExpertWeights, MoeLayer, MoeModel, TokenBatch, model_forward
from moekit.merging import (
    STRATEGIES,
    LayerPlan,
    MergePlan,
    MissingActivationCache,
    apply_merge_plan,
    build_alphas,
    column_correlation,
    fixdom_match,
    fixdom_merge,
    make_layer_plan,
    make_merge_plan,
    merge_linear,
)
from moekit.pipeline import hc_smoe, msmoe_merge
from moekit.evaluation import output_fidelity
from moekit.synth import PlantedSpec, gen_batch, gen_planted_model


def test_alpha_examples():
    assert build_alphas([3], [0, 0, 0, 5], "frequency") == [1.0]
    assert build_alphas([0, 1], [3, 1], "frequency") == [0.75, 0.25]
    assert build_alphas([0, 1, 2], [0, 0, 0], "frequency") == pytest.approx([1 / 3] * 3)
    assert build_alphas([0, 1], [3, 1], "average") == [0.5, 0.5]


@settings(max_examples=200, deadline=None)
@given(freqs=st.lists(st.integers(0, 1000), min_size=1, max_size=10), strategy=st.sampled_from(STRATEGIES))
def test_alphas_sum_to_one(freqs, strategy):
    a = build_alphas(range(len(freqs)), freqs, strategy)
    assert sum(a) == pytest.approx(1.0, abs=1e-12)
    assert min(a) >= 0


def test_plan_rejects_bad_alphas():
    a = ClusterAssignment((0, 0, 1), 2)
    with pytest.raises(ValueError):
        LayerPlan(a, "average", ((0.5, 0.6), (1.0,)))
    with pytest.raises(ValueError):
        LayerPlan(a, "fixdom", ((0.5, 0.5), (1.0,)), dominant=(2, 2))


def test_merge_identical_members(rng):
    e = rand_expert(rng, 4, 3)
    m = merge_linear([e, e, e], [0.2, 0.3, 0.5])
    assert np.allclose(m.w_gate, e.w_gate, rtol=1e-6)


def test_merge_scalar_example():
    a = ExpertWeights([[2.0]], [[1.0]], [[1.0]])
    b = ExpertWeights([[4.0]], [[1.0]], [[1.0]])
    assert merge_linear([a, b], [0.5, 0.5]).w_gate[0, 0] == 3.0


def test_merge_matches_loop(rng):
    es = [rand_expert(rng, 3, 2) for _ in range(3)]
    alphas = [0.2, 0.5, 0.3]
    m = merge_linear(es, alphas)
    for name in ("w_gate", "w_up", "w_down"):
        got = getattr(m, name)
        rows, cols = got.shape
        for i in range(rows):
            for j in range(cols):
                expect = sum(a * float(getattr(e, name)[i, j]) for a, e in zip(alphas, es))
                assert abs(float(got[i, j]) - expect) < 1e-6


# -- fix-dom --------------------------------------------------------------------------------


def _acts(e, x):
    from moekit.calibration import activation_features

    return activation_features(e, x)


def test_fixdom_identical_members(rng):
    e = rand_expert(rng, 5, 6)
    x = rng.standard_normal((40, 5))
    feats = [_acts(e, x)] * 3
    m = fixdom_merge([e, e, e], 1, feats, [1 / 3] * 3)
    assert m.identical_to(e)


def test_fixdom_recovers_permutation(rng):
    a = rand_expert(rng, 6, 8)
    pi = rng.permutation(8)
    b = ExpertWeights(a.w_gate[:, pi], a.w_up[:, pi], a.w_down[pi, :])
    x = rng.standard_normal((200, 6))
    fa, fb = _acts(a, x), _acts(b, x)
    match = fixdom_match(fb, fa)
    assert np.array_equal(match, pi)
    m = fixdom_merge([a, b], 0, [fa, fb], [0.5, 0.5])
    for name in ("w_gate", "w_up", "w_down"):
        assert np.allclose(getattr(m, name), getattr(a, name), atol=1e-5)


def test_fixdom_weight_features_recover_permutation(rng):
    from moekit.merging import fixdom_feature_matrix

    a = rand_expert(rng, 6, 8)
    pi = rng.permutation(8)
    b = ExpertWeights(a.w_gate[:, pi], a.w_up[:, pi], a.w_down[pi, :])
    fa, fb = fixdom_feature_matrix(a, "weight"), fixdom_feature_matrix(b, "weight")
    assert np.array_equal(fixdom_match(fb, fa), pi)


def test_fixdom_tie_goes_to_lowest_column():
    dom = np.array([[1.0, 1.0, 0.0], [2.0, 2.0, 1.0], [3.0, 3.0, 0.0]])
    other = np.array([[1.0], [2.0], [3.0]])
    assert fixdom_match(other, dom)[0] == 0


def test_zero_variance_correlates_zero():
    c = column_correlation(np.ones((4, 1)), np.arange(4.0)[:, None])
    assert c[0, 0] == 0.0


def test_fixdom_needs_cache(rng):
    model = rand_model(rng, L=1, n=4)
    stats = collect_stats(model, TokenBatch(rng.standard_normal((10, model.d_h))))
    plan = make_merge_plan([ClusterAssignment((0, 0, 1, 1), 2)], stats, "fixdom", "act")
    with pytest.raises(MissingActivationCache, match="cache"):
        apply_merge_plan(model, plan, stats)
    # weight features need no cache
    apply_merge_plan(model, make_merge_plan([ClusterAssignment((0, 0, 1, 1), 2)], stats, "fixdom", "weight"))


def test_default_dominant_is_most_frequent():
    plan = make_layer_plan(ClusterAssignment((0, 0, 1, 1), 2), [3, 5, 4, 4], "fixdom")
    assert plan.dominant == (1, 2)


# -- plans ----------------------------------------------------------------------------------


def test_singleton_plan_is_identity(rng):
    model = rand_model(rng, L=2, n=4)
    stats = collect_stats(model, TokenBatch(rng.standard_normal((10, model.d_h))))
    plan = make_merge_plan([ClusterAssignment(tuple(range(4)), 4)] * 2, stats, "frequency")
    merged = apply_merge_plan(model, plan, stats)
    for a, b in zip(model.layers, merged.layers):
        assert all(x.identical_to(y) for x, y in zip(a.experts, b.experts))
        assert a.remap == b.remap


@pytest.mark.parametrize("strategy,features", [("average", "act"), ("frequency", "act"),
                                               ("fixdom", "act"), ("fixdom", "weight"), ("fixdom", "act+weight")])
def test_lossless_on_exact_duplicates(strategy, features):
    spec = PlantedSpec(layers=3, experts=8, clusters=4, noise=0.0, seed=4)
    model, truth = gen_planted_model(spec)
    batch = gen_batch(spec)
    stats = collect_stats(model, batch, cache_activations=True)
    plan = make_merge_plan([ClusterAssignment(t, 4) for t in truth], stats, strategy, features)
    merged = apply_merge_plan(model, plan, stats)
    x = gen_batch(spec, 256)
    y0, y1 = model_forward(model, x), model_forward(merged, x)
    assert np.linalg.norm(y0 - y1) <= 1e-5 * np.linalg.norm(y0)


def test_router_preserved_and_storage_halves(rng):
    model = rand_model(rng, L=2, n=8, d_h=5, d_m=4)
    stats = collect_stats(model, TokenBatch(rng.standard_normal((30, 5))))
    merged, _ = hc_smoe(model, stats, 4)
    for a, b in zip(model.layers, merged.layers):
        assert np.array_equal(a.router, b.router)
    assert merged.expert_params() * 2 == model.expert_params()


def test_plan_dict_roundtrip(rng):
    model = rand_model(rng, L=2, n=6)
    stats = collect_stats(model, TokenBatch(rng.standard_normal((20, model.d_h))))
    a = [hierarchical_cluster(np.abs(np.subtract.outer(range(6), range(6))).astype(float), 3)] * 2
    plan = make_merge_plan(a, stats, "fixdom", "weight")
    assert MergePlan.from_dict(plan.to_dict()) == plan


def test_strategy_gap_below_grouping_gap():
    spec = PlantedSpec(noise=0.05, seed=1)
    model, _ = gen_planted_model(spec)
    batch = gen_batch(spec)
    stats = collect_stats(model, batch)
    freq, _ = hc_smoe(model, stats, 4, strategy="frequency")
    avg, _ = hc_smoe(model, stats, 4, strategy="average")
    rl, _ = msmoe_merge(model, stats, 4, strategy="frequency")
    strategy_gap = output_fidelity(freq, avg, batch).l2_error
    grouping_gap = output_fidelity(freq, rl, batch).l2_error
    assert strategy_gap < grouping_gap
