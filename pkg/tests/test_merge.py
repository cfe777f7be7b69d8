from __future__ import annotations

import math

import numpy as np
import pytest

from fgopt.core import PerformanceStats, TaskSet, instruction_module
from fgopt.llm import (ContextWindowExceeded, LlmClient, MockRule, RequestTag,
                       TokenLedger, mock_backend)
from fgopt.merge import (ClusteringError, ClusteringMethod, MergeConfig,
                         MergeLeaf, MergeTree, bisecting_kmeans, backtest,
                         cluster_count, featurize, kmeans, merge_group,
                         progressive_merge)
from fgopt.optimize import exact_evaluator
from fgopt.ruleworld import (RuleWorldEnvironment, RuleWorldSpec, TOKEN_RE,
                             build_taskset)
from fgopt.ruleworld import mock_backend as rw_mock_backend
from fgopt.runtime import RolloutConfig
from conftest import hierarchical_stub_leaves, stub_backtest_fn, stub_merge_fn

RCFG = RolloutConfig(max_steps=2, max_prompt_tokens=100_000)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def test_identical_payloads_identical_vectors():
    a = instruction_module("same words here")
    b = instruction_module("same words here")
    fa, fb = featurize([a, b])
    assert fa.values == fb.values
    assert abs(np.dot(fa.values, fb.values) - 1.0) < 1e-12


def test_disjoint_vocabulary_cosine_zero():
    fa, fb = featurize([instruction_module("apple banana"),
                        instruction_module("cherry date")])
    assert abs(np.dot(fa.values, fb.values)) < 1e-12


def test_cosine_hand_computed():
    # counts (2,1) and (1,2): cosine = (2*1 + 1*2) / (sqrt(5)*sqrt(5)) = 4/5
    fa, fb = featurize([instruction_module("a a b"), instruction_module("a b b")])
    assert abs(np.dot(fa.values, fb.values) - 4 / 5) < 1e-12


def test_degenerate_vector_flagged():
    (fv,) = featurize([instruction_module("!!! ???")])
    assert fv.degenerate
    assert all(v == 0.0 for v in fv.values)


def test_vectors_are_unit_norm():
    feats = featurize([instruction_module("one two three two"),
                       instruction_module("four")])
    for fv in feats:
        assert abs(sum(v * v for v in fv.values) - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# cluster_count
# ---------------------------------------------------------------------------

def test_cluster_count_examples():
    assert cluster_count(9) == 3
    assert cluster_count(2) == 1
    assert cluster_count(10) == 3
    assert cluster_count(1) == 1


def test_cluster_count_rejects_nonpositive():
    with pytest.raises(ValueError):
        cluster_count(0)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _wcss_of(points, labels):
    total = 0.0
    for c in set(labels):
        members = [p for p, l in zip(points, labels) if l == c]
        mean = [sum(p[d] for p in members) / len(members)
                for d in range(len(members[0]))]
        total += sum(sum((p[d] - mean[d]) ** 2 for d in range(len(mean)))
                     for p in members)
    return total


def _brute_force_optimum(points, k):
    """Exhaustive enumeration over partitions with exactly k nonempty blocks."""
    n = len(points)
    best = math.inf
    def rec(i, labels, used):
        nonlocal best
        if n - i < k - used:
            return
        if i == n:
            if used == k:
                best = min(best, _wcss_of(points, labels))
            return
        for lab in range(min(used + 1, k)):
            labels.append(lab)
            rec(i + 1, labels, max(used, lab + 1))
            labels.pop()
    rec(0, [], 0)
    return best


def test_kmeans_each_point_own_cluster():
    pts = [(0.0, 0.0), (1.0, 5.0), (9.0, 2.0)]
    labels = kmeans(pts, 3, MergeConfig(seed=1))
    assert sorted(labels) == [0, 1, 2]
    assert _wcss_of(pts, labels) == 0.0


def test_kmeans_two_far_pairs_matches_brute_force():
    pts = [(0.0, 0.0), (0.0, 1.0), (10.0, 0.0), (10.0, 1.0)]
    labels = kmeans(pts, 2, MergeConfig(seed=1))
    assert labels[0] == labels[1] and labels[2] == labels[3]
    assert labels[0] != labels[2]
    assert abs(_wcss_of(pts, labels) - _brute_force_optimum(pts, 2)) < 1e-9


def test_kmeans_duplicates_co_clustered():
    pts = [(1.0, 1.0), (1.0, 1.0), (8.0, 8.0), (1.0, 1.0)]
    labels = kmeans(pts, 2, MergeConfig(seed=2))
    assert labels[0] == labels[1] == labels[3]
    assert labels[2] != labels[0]


def test_kmeans_rejects_k_above_n():
    with pytest.raises(ClusteringError):
        kmeans([(0.0,), (1.0,)], 3, MergeConfig(seed=1))


def test_kmeans_deterministic_given_seed():
    import random as _random
    rng = _random.Random(5)
    pts = [(rng.uniform(0, 10), rng.uniform(0, 10)) for _ in range(30)]
    a = kmeans(pts, 5, MergeConfig(seed=9))
    b = kmeans(pts, 5, MergeConfig(seed=9))
    assert a == b


def test_kmeans_no_empty_clusters():
    # nine coincident points plus one outlier, k=3: repair must fill clusters
    pts = [(0.0, 0.0)] * 9 + [(5.0, 5.0)]
    labels = kmeans(pts, 3, MergeConfig(seed=4))
    assert len(set(labels)) == 3


def test_bisecting_mirrors_kmeans_on_reference_instances():
    cases = [
        ([(0.0, 0.0), (1.0, 5.0), (9.0, 2.0)], 3),
        ([(0.0, 0.0), (0.0, 1.0), (10.0, 0.0), (10.0, 1.0)], 2),
        ([(1.0, 1.0), (1.0, 1.0), (8.0, 8.0), (1.0, 1.0)], 2),
    ]
    for pts, k in cases:
        km = kmeans(pts, k, MergeConfig(seed=1))
        bi = bisecting_kmeans(pts, k, MergeConfig(seed=1))
        km_parts = {frozenset(i for i, l in enumerate(km) if l == c) for c in set(km)}
        bi_parts = {frozenset(i for i, l in enumerate(bi) if l == c) for c in set(bi)}
        assert km_parts == bi_parts


def test_bisecting_rejects_k_above_n():
    with pytest.raises(ClusteringError):
        bisecting_kmeans([(0.0,)], 2, MergeConfig(seed=1))


# ---------------------------------------------------------------------------
# merge_group
# ---------------------------------------------------------------------------

def _stats(module, rate=(1, 2), ids=("a",)):
    return PerformanceStats(module_id=module.id, task_ids=ids,
                            successes=rate[0], trials=rate[1])


def test_merge_identical_payloads_dedupes_by_content_hash():
    a = instruction_module("identical payload")
    b = instruction_module("identical payload")
    client = LlmClient(mock_backend([MockRule(
        tag=RequestTag.MERGE, reply="```module\nidentical payload\n```")]))
    merged, note = merge_group([(a, _stats(a)), (b, _stats(b))], client,
                               MergeConfig())
    assert note is None
    assert merged.id == a.id
    assert merged.lineage == (a.id, b.id)


def test_merge_unions_rule_tokens():
    spec = RuleWorldSpec.generate(["alpha", "bravo"], seed=3)
    tok_a, tok_b = spec.token_for("alpha"), spec.token_for("bravo")
    a = instruction_module(f"base\nKnown passphrases: {tok_a}")
    b = instruction_module(f"base\nKnown passphrases: {tok_b}")
    client = LlmClient(rw_mock_backend())
    merged, note = merge_group([(a, _stats(a)), (b, _stats(b))], client,
                               MergeConfig())
    tokens = ["RULE-%s-%s" % m for m in TOKEN_RE.findall(merged.payload)]
    assert tokens == [tok_a, tok_b]
    assert note is None


def test_merge_prompt_carries_member_stats():
    a = instruction_module("one")
    b = instruction_module("two")
    prompts = []
    def capture(req, prompt):
        prompts.append(prompt)
        return "```module\nmerged\n```"
    client = LlmClient(mock_backend([MockRule(tag=RequestTag.MERGE, reply=capture)]))
    merge_group([(a, _stats(a, rate=(1, 3))), (b, _stats(b, rate=(2, 3)))],
                client, MergeConfig())
    assert "1/3 (0.333)" in prompts[0]
    assert "2/3 (0.667)" in prompts[0]


def test_unparseable_merge_reply_falls_back_to_best_member():
    a = instruction_module("alpha module")
    b = instruction_module("bravo module")
    client = LlmClient(mock_backend([MockRule(tag=RequestTag.MERGE,
                                              reply="never a fenced block")]))
    merged, note = merge_group(
        [(a, _stats(a, rate=(1, 4))), (b, _stats(b, rate=(3, 4)))], client,
        MergeConfig())
    assert merged == b
    assert "fell back" in note


def test_merge_fallback_tie_breaks_to_smallest_module_id():
    a = instruction_module("alpha module")
    b = instruction_module("bravo module")
    client = LlmClient(mock_backend([MockRule(tag=RequestTag.MERGE, reply="junk")]))
    merged, _ = merge_group(
        [(a, _stats(a, rate=(1, 2))), (b, _stats(b, rate=(1, 2)))], client,
        MergeConfig())
    assert merged is min([a, b], key=lambda m: m.id)


def test_context_overflow_triggers_pairwise_fold():
    mods = [instruction_module(f"member {i} " + "filler words " * 30)
            for i in range(4)]
    calls = []

    class FoldBackend:
        remote = False
        def complete(self, req):
            from fgopt.llm import ChatResponse, FinishReason, estimate_tokens, rendered_prompt
            prompt = rendered_prompt(req)
            calls.append(prompt)
            if prompt.count("Module 3") or prompt.count("Module 4") > 0:
                pass
            if "Module 4" in prompt or "Module 3" in prompt:
                raise ContextWindowExceeded("too big")
            return ChatResponse("```module\nfolded\n```", estimate_tokens(prompt),
                                4, FinishReason.STOP)

    client = LlmClient(FoldBackend())
    merged, note = merge_group([(m, _stats(m)) for m in mods], client,
                               MergeConfig())
    assert merged.payload == "folded"
    assert "pairwise" in note
    # the fold path merges two members at a time
    assert all("Module 3" not in p or "Module 4" not in p for p in calls[1:])


# ---------------------------------------------------------------------------
# backtest
# ---------------------------------------------------------------------------

def _rule_setup():
    spec = RuleWorldSpec.generate(["alpha", "bravo"], seed=6, decoy_len=50)
    ts_a = build_taskset(spec, "a", {"alpha": 2, "bravo": 0})
    ts_b = build_taskset(spec, "b", {"alpha": 0, "bravo": 2}, id_prefix="u")
    return spec, ts_a, ts_b


def test_backtest_full_coverage_scores_one():
    spec, ts_a, ts_b = _rule_setup()
    module = instruction_module(
        "base\nKnown passphrases: " + " ".join(t for _, t in spec.rules))
    union = TaskSet(name="union", tasks=ts_a.tasks + ts_b.tasks)
    stats = backtest(module, union, lambda: RuleWorldEnvironment(spec), RCFG,
                     LlmClient(rw_mock_backend()), exact_evaluator)
    assert stats.success_rate == 1


def test_backtest_partial_coverage_scores_covered_share():
    spec, ts_a, ts_b = _rule_setup()
    module = instruction_module(
        "base\nKnown passphrases: " + spec.token_for("alpha"))
    union = TaskSet(name="union", tasks=ts_a.tasks + ts_b.tasks)
    stats = backtest(module, union, lambda: RuleWorldEnvironment(spec), RCFG,
                     LlmClient(rw_mock_backend()), exact_evaluator)
    # oracle: exactly the alpha tasks succeed
    assert stats.successes == len(ts_a.tasks)
    assert stats.trials == 4


def test_backtest_single_task():
    spec, ts_a, _ = _rule_setup()
    single = TaskSet(name="one", tasks=ts_a.tasks[:1])
    module = instruction_module("base\nKnown passphrases: " + spec.token_for("alpha"))
    stats = backtest(module, single, lambda: RuleWorldEnvironment(spec), RCFG,
                     LlmClient(rw_mock_backend()), exact_evaluator)
    assert stats.trials == 1


def test_backtest_requires_tasks():
    with pytest.raises(ValueError):
        backtest(instruction_module("m"), TaskSet(name="empty", tasks=()),
                 None, RCFG, None, exact_evaluator)


# ---------------------------------------------------------------------------
# progressive merge
# ---------------------------------------------------------------------------

def test_three_leaves_direct_merge_depth_one():
    leaves = hierarchical_stub_leaves(3, t=3)
    result = progressive_merge(leaves, None, None, None, MergeConfig(threshold=3),
                               None, merge_fn=stub_merge_fn,
                               backtest_fn=stub_backtest_fn)
    assert result.tree.depth() == 1
    assert result.tree.summary()["internal_nodes"] == 1
    root = result.tree.root()
    assert root.covered_task_ids == {"task0000", "task0001", "task0002"}


def test_sixteen_leaves_threshold_four_depth_two():
    leaves = hierarchical_stub_leaves(16, t=4)
    result = progressive_merge(leaves, None, None, None,
                               MergeConfig(threshold=4, seed=5), None,
                               merge_fn=stub_merge_fn,
                               backtest_fn=stub_backtest_fn)
    # oracle: 16 -> 4 clusters of 4 -> 4 base merges -> root
    assert result.tree.depth() == 2
    assert result.tree.summary()["internal_nodes"] == 5
    assert result.tree.root().covered_task_ids == {f"task{i:04d}" for i in range(16)}


def test_single_leaf_identity_no_merge_calls():
    leaves = hierarchical_stub_leaves(1, t=3)
    ledger = TokenLedger()
    client = LlmClient(rw_mock_backend(), ledger=ledger)
    result = progressive_merge(leaves, None, RCFG, client, MergeConfig(),
                               exact_evaluator)
    assert result.module == leaves[0].module
    assert result.tree.depth() == 0
    assert len(result.tree.nodes) == 1
    assert ledger.totals(RequestTag.MERGE).calls == 0


def test_clustering_none_single_direct_merge():
    leaves = hierarchical_stub_leaves(9, t=3)
    merges = []
    def counting_merge(members):
        merges.append(len(members))
        return stub_merge_fn(members)
    result = progressive_merge(leaves, None, None, None,
                               MergeConfig(threshold=3,
                                           clustering=ClusteringMethod.NONE),
                               None, merge_fn=counting_merge,
                               backtest_fn=stub_backtest_fn)
    assert merges == [9]
    assert result.tree.depth() == 1


def test_tree_soundness_covered_ids_disjoint_union():
    leaves = hierarchical_stub_leaves(16, t=3)
    result = progressive_merge(leaves, None, None, None,
                               MergeConfig(threshold=3, seed=5), None,
                               merge_fn=stub_merge_fn,
                               backtest_fn=stub_backtest_fn)
    tree = result.tree
    for node in tree.nodes.values():
        if node.is_leaf:
            continue
        child_sets = [tree.nodes[c].covered_task_ids for c in node.children]
        union = set().union(*child_sets)
        assert node.covered_task_ids == union
        assert sum(len(s) for s in child_sets) == len(union)  # disjoint
    assert tree.root().covered_task_ids == {f"task{i:04d}" for i in range(16)}


def test_overlapping_leaves_rejected():
    leaves = hierarchical_stub_leaves(2, t=3)
    dup = [leaves[0], MergeLeaf(module=leaves[1].module, tasks=leaves[0].tasks,
                                stats=leaves[1].stats)]
    with pytest.raises(ValueError, match="overlap"):
        progressive_merge(dup, None, None, None, MergeConfig(), None,
                          merge_fn=stub_merge_fn, backtest_fn=stub_backtest_fn)


def test_progressive_merge_deterministic_tree_bytes():
    def run():
        leaves = hierarchical_stub_leaves(16, t=3)
        result = progressive_merge(leaves, None, None, None,
                                   MergeConfig(threshold=3, seed=5), None,
                                   merge_fn=stub_merge_fn,
                                   backtest_fn=stub_backtest_fn, parallel=True)
        return result.tree.to_json()
    assert run() == run()


def test_merge_tree_json_round_trip():
    leaves = hierarchical_stub_leaves(9, t=3)
    result = progressive_merge(leaves, None, None, None,
                               MergeConfig(threshold=3, seed=5), None,
                               merge_fn=stub_merge_fn,
                               backtest_fn=stub_backtest_fn)
    parsed = MergeTree.from_json(result.tree.to_json())
    assert parsed.root_id == result.tree.root_id
    assert parsed.nodes.keys() == result.tree.nodes.keys()
    assert parsed.to_json() == result.tree.to_json()


def test_internal_nodes_record_fallbacks():
    leaves = hierarchical_stub_leaves(2, t=3)
    client = LlmClient(mock_backend([MockRule(tag=RequestTag.MERGE,
                                              reply="never parseable")]))
    result = progressive_merge(leaves, None, RCFG, client,
                               MergeConfig(threshold=3), exact_evaluator,
                               backtest_fn=stub_backtest_fn)
    assert len(result.tree.fallbacks) == 1
    assert result.tree.summary()["fallbacks"] == 1


def test_cluster_count_law_no_empty_clusters_both_methods():
    import random as _random
    rng = _random.Random(31)
    for trial in range(20):
        n = rng.randint(2, 24)
        k = cluster_count(n)
        pts = [(rng.uniform(0, 10), rng.uniform(0, 10)) for _ in range(n)]
        for method in (kmeans, bisecting_kmeans):
            labels = method(pts, k, MergeConfig(seed=trial))
            assert len(labels) == n
            assert len(set(labels)) == k, f"{method.__name__} trial {trial}"
