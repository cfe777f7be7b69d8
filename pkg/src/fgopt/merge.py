"""Progressive merging of subset-optimized modules.

Given the per-subset results, merging proceeds bottom-up: small groups are
consolidated by an LLM merge call, every merged module is backtested on the
union of its constituents' tasks, and larger collections are first clustered
(k = floor(sqrt(n)) groups over token-frequency features of the module texts)
and merged recursively. The recursion builds a tree whose root is the final
module; each internal node carries validated performance over exactly the
tasks it covers.

Clustering is implemented here (seeded k-means++ plus Lloyd iterations, best
of a few restarts, with deterministic tie-breaks and empty-cluster repair)
rather than taken from a library: backtested merges must be byte-reproducible
across runs, so every choice down to tie-breaking is pinned.
"""
from __future__ import annotations

import logging
import math
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from itertools import chain

import numpy as np

from .core import (MergeNode, Module, ModuleOrigin, PerformanceStats, TaskSet,
                   canonical_dumps, canonical_loads, derive_seed,
                   module_content_id)
from .llm import ContextWindowExceeded, RequestTag, ScopedClient
from .optimize import parse_module_reply, rollout_and_evaluate, stats_from_pairs
from .runtime import RolloutConfig

log = logging.getLogger(__name__)


class ClusteringMethod(str, Enum):
    KMEANS = "kmeans"
    BISECTING = "bisecting"
    NONE = "none"


DEFAULT_MERGE_TEMPLATE = """You are consolidating {count} agent modules into one.
Each module below was trained on its own task subset; its measured performance
is shown as successes/trials (rate).

{members}

Produce a single consolidated module that preserves each member's strengths
and covers every member's task subset. Reply with the complete merged module
inside one fenced code block tagged "module" (a line with three backticks
followed by the word module, the content, then a closing three-backtick line)."""


@dataclass(frozen=True)
class MergeConfig:
    threshold: int = 3
    clustering: ClusteringMethod = ClusteringMethod.KMEANS
    kmeans_max_iters: int = 50
    kmeans_restarts: int = 4
    feature_kind: str = "token_frequency"
    seed: int = 0
    merge_prompt_template: str = DEFAULT_MERGE_TEMPLATE

    def __post_init__(self) -> None:
        if self.threshold < 2:
            raise ValueError("threshold must be >= 2")
        if self.kmeans_max_iters < 1:
            raise ValueError("kmeans_max_iters must be >= 1")
        if self.kmeans_restarts < 1:
            raise ValueError("kmeans_restarts must be >= 1")


@dataclass(frozen=True)
class FeatureVector:
    """L2-normalized token-frequency vector of one module's payload text."""

    module_id: str
    values: tuple[float, ...]
    degenerate: bool = False


class ClusteringError(ValueError):
    pass


class MergeReplyError(Exception):
    """The merger reply lacked a usable module block even after a reprompt."""


# ---------------------------------------------------------------------------
# Features and cluster counts
# ---------------------------------------------------------------------------

_WORD_RE = re.compile(r"[a-z0-9_]+")


def featurize(modules: list[Module]) -> list[FeatureVector]:
    """Lowercase word-frequency vectors over the corpus vocabulary.

    Identical payloads yield identical vectors; modules with no word tokens at
    all come back flagged degenerate (zero vector).
    """
    if not modules:
        raise ValueError("featurize needs at least one module")
    token_lists = [_WORD_RE.findall(m.payload_text().lower()) for m in modules]
    vocab = sorted(set(chain.from_iterable(token_lists)))
    dim = max(1, len(vocab))
    index = {w: i for i, w in enumerate(vocab)}
    out = []
    for module, tokens in zip(modules, token_lists):
        v = np.zeros(dim, dtype=np.float64)
        for tok in tokens:
            v[index[tok]] += 1.0
        norm = float(np.linalg.norm(v))
        degenerate = norm == 0.0
        if not degenerate:
            v = v / norm
        out.append(FeatureVector(module_id=module.id,
                                 values=tuple(float(x) for x in v),
                                 degenerate=degenerate))
    return out


def cluster_count(n: int) -> int:
    """Number of clusters for n modules: floor(sqrt(n)), clamped to >= 1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return max(1, math.isqrt(n))


# ---------------------------------------------------------------------------
# K-means (Lloyd's algorithm, seeded k-means++ init, best of restarts)
# ---------------------------------------------------------------------------

def _as_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        return np.asarray(vectors, dtype=np.float64)
    rows = []
    for v in vectors:
        rows.append(v.values if isinstance(v, FeatureVector) else tuple(v))
    return np.asarray(rows, dtype=np.float64)


def _kmeans_pp_init(X: np.ndarray, k: int, rng: random.Random) -> np.ndarray:
    """Greedy k-means++ seeding: several D^2-sampled candidates per step, keep
    the one that minimizes the resulting potential. Far more reliable than
    single-candidate sampling at recovering many well-separated groups."""
    n = X.shape[0]
    trials = 2 + int(math.log(max(2, k)))
    chosen = [rng.randrange(n)]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        total = float(d2.sum())
        if total <= 1e-12:
            # Remaining mass is zero (duplicate-heavy data): fall back to the
            # lowest-index point not yet chosen.
            for idx in range(n):
                if idx not in chosen:
                    chosen.append(idx)
                    break
            else:
                chosen.append(rng.randrange(n))
            d2 = np.minimum(d2, ((X - X[chosen[-1]]) ** 2).sum(axis=1))
            continue
        cum = np.cumsum(d2)
        best_idx = -1
        best_potential = math.inf
        best_d2 = d2
        for _ in range(trials):
            r = rng.random() * total
            idx = min(int(np.searchsorted(cum, r, side="right")), n - 1)
            cand_d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
            potential = float(cand_d2.sum())
            if potential < best_potential - 1e-12:
                best_potential = potential
                best_idx = idx
                best_d2 = cand_d2
        chosen.append(best_idx)
        d2 = best_d2
    return X[chosen].astype(np.float64).copy()


def _pairwise_sq_dists(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||x-c||^2 expanded via a matmul keeps memory at O(n*k) instead of
    # materializing an n*k*dim difference tensor.
    d = (X ** 2).sum(axis=1)[:, None] + (centers ** 2).sum(axis=1)[None, :]
    d -= 2.0 * (X @ centers.T)
    np.maximum(d, 0.0, out=d)
    return d


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iters: int) -> tuple[np.ndarray, float]:
    n, k = X.shape[0], centers.shape[0]
    labels = np.full(n, -1, dtype=int)
    for _ in range(max_iters):
        dists = _pairwise_sq_dists(X, centers)
        new_labels = np.argmin(dists, axis=1)  # ties resolve to the lowest index
        for c in range(k):
            if not np.any(new_labels == c):
                counts = np.bincount(new_labels, minlength=k)
                point_d = dists[np.arange(n), new_labels].copy()
                point_d[counts[new_labels] < 2] = -1.0
                candidate = int(np.argmax(point_d))
                if point_d[candidate] < 0:
                    break
                new_labels[candidate] = c
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = X[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    labels = _refine_relocation(X, labels, k)
    # WCSS against the exact cluster means of the final assignment.
    wcss = 0.0
    for c in range(k):
        members = X[labels == c]
        if len(members):
            wcss += float(((members - members.mean(axis=0)) ** 2).sum())
    return labels, wcss


def _refine_relocation(X: np.ndarray, labels: np.ndarray, k: int,
                       max_sweeps: int = 100) -> np.ndarray:
    """Hartigan-style single-point relocation after Lloyd converges.

    Lloyd only reassigns points against fixed centroids and misses moves that
    pay off once both affected means shift. Relocating one point from cluster
    A (size a) to B (size b) changes the total WCSS by

        b/(b+1) * ||x - mean_B||^2  -  a/(a-1) * ||x - mean_A||^2

    so any move with a negative delta strictly improves the solution. Points
    are scanned in index order and the best improving move per point applied;
    moves that would empty a cluster are skipped.
    """
    labels = labels.copy()
    n = X.shape[0]
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, X.shape[1]), dtype=np.float64)
    for c in range(k):
        members = X[labels == c]
        if len(members):
            sums[c] = members.sum(axis=0)
    for _ in range(max_sweeps):
        improved = False
        for i in range(n):
            src = int(labels[i])
            if counts[src] < 2:
                continue
            x = X[i]
            mean_src = sums[src] / counts[src]
            cost_out = counts[src] / (counts[src] - 1) * float(((x - mean_src) ** 2).sum())
            best_delta = -1e-12
            best_dst = -1
            for dst in range(k):
                if dst == src:
                    continue
                mean_dst = sums[dst] / counts[dst]
                cost_in = counts[dst] / (counts[dst] + 1) * float(((x - mean_dst) ** 2).sum())
                delta = cost_in - cost_out
                if delta < best_delta:
                    best_delta = delta
                    best_dst = dst
            if best_dst >= 0:
                sums[src] -= x
                counts[src] -= 1
                sums[best_dst] += x
                counts[best_dst] += 1
                labels[i] = best_dst
                improved = True
        if not improved:
            break
    return labels


def kmeans(vectors, k: int, cfg: MergeConfig) -> list[int]:
    """Cluster labels for `vectors`, deterministic for a given config seed."""
    X = _as_matrix(vectors)
    n = X.shape[0]
    if k > n:
        raise ClusteringError(f"cannot build {k} clusters from {n} points")
    if k < 1:
        raise ClusteringError("k must be >= 1")
    best_labels: np.ndarray | None = None
    best_wcss = math.inf
    for restart in range(cfg.kmeans_restarts):
        rng = random.Random(derive_seed(cfg.seed, f"kmeans-restart-{restart}"))
        centers = _kmeans_pp_init(X, k, rng)
        labels, wcss = _lloyd(X, centers, cfg.kmeans_max_iters)
        if wcss < best_wcss - 1e-12:
            best_wcss = wcss
            best_labels = labels
    assert best_labels is not None
    return [int(x) for x in best_labels]


def _subset_wcss(X: np.ndarray) -> float:
    if len(X) == 0:
        return 0.0
    return float(((X - X.mean(axis=0)) ** 2).sum())


def bisecting_kmeans(vectors, k: int, cfg: MergeConfig) -> list[int]:
    """Split the largest-WCSS cluster with 2-means until k clusters exist."""
    X = _as_matrix(vectors)
    n = X.shape[0]
    if k > n:
        raise ClusteringError(f"cannot build {k} clusters from {n} points")
    clusters: list[list[int]] = [list(range(n))]
    split_no = 0
    while len(clusters) < k:
        pick = -1
        pick_wcss = -1.0
        for i, members in enumerate(clusters):
            if len(members) < 2:
                continue
            w = _subset_wcss(X[members])
            if w > pick_wcss + 1e-12:
                pick_wcss = w
                pick = i
        members = clusters.pop(pick)
        sub = X[members]
        best_labels: np.ndarray | None = None
        best_wcss = math.inf
        for restart in range(cfg.kmeans_restarts):
            rng = random.Random(derive_seed(cfg.seed, f"bisect-{split_no}-{restart}"))
            centers = _kmeans_pp_init(sub, 2, rng)
            labels, wcss = _lloyd(sub, centers, cfg.kmeans_max_iters)
            if wcss < best_wcss - 1e-12:
                best_wcss = wcss
                best_labels = labels
        assert best_labels is not None
        group_a = [members[j] for j in range(len(members)) if best_labels[j] == 0]
        group_b = [members[j] for j in range(len(members)) if best_labels[j] == 1]
        clusters.extend([group_a, group_b])
        split_no += 1
    clusters.sort(key=lambda ms: min(ms))
    labels_out = [0] * n
    for label, members in enumerate(clusters):
        for idx in members:
            labels_out[idx] = label
    return labels_out


def cluster_labels(vectors, k: int, cfg: MergeConfig) -> list[int]:
    if cfg.clustering is ClusteringMethod.BISECTING:
        return bisecting_kmeans(vectors, k, cfg)
    return kmeans(vectors, k, cfg)


# ---------------------------------------------------------------------------
# LLM merge of a group
# ---------------------------------------------------------------------------

def render_merge_prompt(members: list[tuple[Module, PerformanceStats]],
                        template: str = DEFAULT_MERGE_TEMPLATE) -> str:
    blocks = []
    for i, (module, stats) in enumerate(members, start=1):
        blocks.append(f"Module {i} (performance {stats.rate_text()}):\n"
                      f"```module\n{module.payload_text()}\n```")
    return template.format(count=len(members), members="\n\n".join(blocks))


def _merge_once(members: list[tuple[Module, PerformanceStats]],
                client, cfg: MergeConfig) -> Module:
    prompt = render_merge_prompt(members, cfg.merge_prompt_template)
    reply = client.ask(RequestTag.MERGE, prompt).content
    kind = members[0][0].kind
    payload = parse_module_reply(reply, kind)
    if payload is None:
        try:
            reply = client.ask(
                RequestTag.MERGE,
                prompt + "\n\nYour previous reply did not contain a fenced "
                         "module block. Reply again with only the module block.",
            ).content
        except ContextWindowExceeded:
            raise MergeReplyError("reprompt exceeded the context window") from None
        payload = parse_module_reply(reply, kind)
    if payload is None:
        raise MergeReplyError("no module block in merge reply after reprompt")
    return Module(id=module_content_id(kind, payload), kind=kind,
                  payload=payload, lineage=tuple(m.id for m, _ in members),
                  origin=ModuleOrigin.MERGED)


def _best_member(members: list[tuple[Module, PerformanceStats]]) -> Module:
    best_rate = max(stats.success_rate for _, stats in members)
    candidates = [m for m, stats in members if stats.success_rate == best_rate]
    return min(candidates, key=lambda m: m.id)


def _combined_stats(module_id: str, members: list[tuple[Module, PerformanceStats]]) -> PerformanceStats:
    return PerformanceStats(
        module_id=module_id,
        task_ids=tuple(chain.from_iterable(s.task_ids for _, s in members)),
        successes=sum(s.successes for _, s in members),
        trials=sum(s.trials for _, s in members),
        prompt_tokens=sum(s.prompt_tokens for _, s in members),
        completion_tokens=sum(s.completion_tokens for _, s in members),
        wall_clock_ms=sum(s.wall_clock_ms for _, s in members),
    )


def merge_group(members: list[tuple[Module, PerformanceStats]],
                client, cfg: MergeConfig) -> tuple[Module, str | None]:
    """Merge 2..n modules with one LLM call.

    Returns (module, fallback note). On an unparseable reply the member with
    the highest success rate wins (ties break to the smallest module id). On
    context overflow the members are folded pairwise instead.
    """
    if len(members) < 2:
        raise ValueError("merge_group needs at least two members")
    try:
        return _merge_once(members, client, cfg), None
    except MergeReplyError:
        best = _best_member(members)
        log.warning("merge reply unparseable; falling back to member %s", best.id)
        return best, "unparseable merge reply; fell back to highest-rate member"
    except ContextWindowExceeded:
        note = "context overflow; merged pairwise"
        acc_module, acc_stats = members[0]
        for module, stats in members[1:]:
            pair = [(acc_module, acc_stats), (module, stats)]
            try:
                acc_module = _merge_once(pair, client, cfg)
            except (ContextWindowExceeded, MergeReplyError):
                acc_module = _best_member(pair)
                note = "context overflow; pairwise merge fell back to best member"
            acc_stats = _combined_stats(acc_module.id, pair)
        return acc_module, note


# ---------------------------------------------------------------------------
# Backtesting
# ---------------------------------------------------------------------------

def backtest(module: Module, tasks: TaskSet, env_factory,
             rollout_cfg: RolloutConfig, client, evaluator) -> PerformanceStats:
    """One rollout plus evaluation per task; rollout faults count as failures."""
    if not tasks.tasks:
        raise ValueError("backtest requires at least one task")
    scope = ScopedClient(client)
    pairs = rollout_and_evaluate(module, tasks.tasks, env_factory,
                                 rollout_cfg, scope, evaluator)
    return stats_from_pairs(module.id, pairs, scope)


# ---------------------------------------------------------------------------
# The recursive merge tree
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MergeLeaf:
    module: Module
    tasks: TaskSet
    stats: PerformanceStats


@dataclass
class _TreeNode:
    module: Module
    tasks: tuple            # ordered task tuple covered by this node
    stats: PerformanceStats
    children: list["_TreeNode"] = field(default_factory=list)
    clustered: bool = False
    fallback: str | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class MergeTree:
    nodes: dict[str, MergeNode]
    root_id: str
    fallbacks: dict[str, str]
    clustering_depth: int

    def root(self) -> MergeNode:
        return self.nodes[self.root_id]

    def depth(self) -> int:
        return self.root().depth

    def per_level_backtest_tasks(self) -> dict[int, int]:
        """Tasks evaluated by backtests, per tree level (internal nodes only)."""
        volumes: dict[int, int] = {}
        for node in self.nodes.values():
            if not node.is_leaf:
                volumes[node.depth] = volumes.get(node.depth, 0) + len(node.covered_task_ids)
        return volumes

    def summary(self) -> dict:
        internal = [n for n in self.nodes.values() if not n.is_leaf]
        return {
            "node_count": len(self.nodes),
            "internal_nodes": len(internal),
            "depth": self.depth(),
            "clustering_depth": self.clustering_depth,
            "fallbacks": len(self.fallbacks),
        }

    def to_dict(self) -> dict:
        return {
            "root_id": self.root_id,
            "clustering_depth": self.clustering_depth,
            "fallbacks": dict(sorted(self.fallbacks.items())),
            "nodes": [self.nodes[key].to_dict() for key in sorted(self.nodes)],
        }

    def to_json(self) -> str:
        return canonical_dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MergeTree":
        nodes = {nd["node_id"]: MergeNode.from_dict(nd) for nd in d["nodes"]}
        return cls(nodes=nodes, root_id=d["root_id"],
                   fallbacks=dict(d.get("fallbacks", {})),
                   clustering_depth=int(d.get("clustering_depth", 0)))

    @classmethod
    def from_json(cls, text: str | bytes) -> "MergeTree":
        return cls.from_dict(canonical_loads(text))


@dataclass
class MergeResult:
    module: Module
    stats: PerformanceStats
    tree: MergeTree
    modules: dict[str, Module]


def progressive_merge(leaves: list[MergeLeaf], env_factory,
                      rollout_cfg: RolloutConfig, client, cfg: MergeConfig,
                      evaluator, *, merge_fn=None, backtest_fn=None,
                      parallel: bool = True) -> MergeResult:
    """Merge subset-optimized modules bottom-up into a single module.

    `merge_fn(members) -> (Module, note)` and `backtest_fn(module, tasks ordered
    tuple) -> PerformanceStats` default to the LLM merge and real backtest;
    they are injectable so tree mechanics can be instrumented with stubs.
    Sibling clusters at the top level run concurrently.
    """
    if not leaves:
        raise ValueError("progressive_merge needs at least one leaf")
    _check_disjoint(leaves)

    if merge_fn is None:
        def merge_fn(members):
            return merge_group(members, client, cfg)
    if backtest_fn is None:
        def backtest_fn(module, tasks):
            ts = TaskSet(name="backtest", tasks=tasks)
            return backtest(module, ts, env_factory, rollout_cfg, client, evaluator)

    items = [_TreeNode(module=l.module, tasks=tuple(l.tasks.tasks), stats=l.stats)
             for l in leaves]

    def make_internal(children: list[_TreeNode], clustered: bool) -> _TreeNode:
        members = [(c.module, c.stats) for c in children]
        module, note = merge_fn(members)
        tasks = tuple(chain.from_iterable(c.tasks for c in children))
        stats = backtest_fn(module, tasks)
        return _TreeNode(module=module, tasks=tasks, stats=stats,
                         children=list(children), clustered=clustered,
                         fallback=note)

    def recurse(group: list[_TreeNode], top: bool) -> _TreeNode:
        if len(group) == 1:
            return group[0]
        n = len(group)
        k = cluster_count(n)
        splittable = (cfg.clustering is not ClusteringMethod.NONE
                      and n > cfg.threshold and k >= 2)
        if not splittable:
            return make_internal(group, clustered=False)
        features = featurize([item.module for item in group])
        labels = cluster_labels(features, k, cfg)
        order: list[int] = []
        buckets: dict[int, list[_TreeNode]] = {}
        for idx, label in enumerate(labels):
            if label not in buckets:
                buckets[label] = []
                order.append(label)
            buckets[label].append(group[idx])
        groups = [buckets[label] for label in order]
        if len(groups) < 2:
            return make_internal(group, clustered=False)
        if top and parallel and len(groups) > 1:
            with ThreadPoolExecutor(max_workers=len(groups)) as pool:
                children = list(pool.map(lambda g: recurse(g, False), groups))
        else:
            children = [recurse(g, False) for g in groups]
        return make_internal(children, clustered=True)

    root = recurse(items, top=True)
    tree, modules = _finalize_tree(root)
    return MergeResult(module=root.module, stats=root.stats, tree=tree,
                       modules=modules)


def _check_disjoint(leaves: list[MergeLeaf]) -> None:
    seen: set[str] = set()
    for leaf in leaves:
        for task in leaf.tasks.tasks:
            if task.id in seen:
                raise ValueError(f"leaf task sets overlap on task {task.id}")
            seen.add(task.id)


def _finalize_tree(root: _TreeNode) -> tuple[MergeTree, dict[str, Module]]:
    counter = 0
    fallbacks: dict[str, str] = {}
    nodes: dict[str, MergeNode] = {}
    modules: dict[str, Module] = {}

    def depth_of(node: _TreeNode) -> int:
        if node.is_leaf:
            return 0
        return 1 + max(depth_of(c) for c in node.children)

    def cluster_depth_of(node: _TreeNode) -> int:
        own = 1 if node.clustered else 0
        if node.is_leaf:
            return 0
        return own + max(cluster_depth_of(c) for c in node.children)

    def walk(node: _TreeNode) -> str:
        nonlocal counter
        node_id = f"n{counter:04d}"
        counter += 1
        child_ids = [walk(c) for c in node.children]
        covered = frozenset(t.id for t in node.tasks)
        nodes[node_id] = MergeNode(
            node_id=node_id, module_id=node.module.id,
            children=tuple(child_ids), covered_task_ids=covered,
            backtest=None if node.is_leaf else node.stats,
            depth=depth_of(node))
        modules[node.module.id] = node.module
        if node.fallback:
            fallbacks[node_id] = node.fallback
        return node_id

    root_id = walk(root)
    tree = MergeTree(nodes=nodes, root_id=root_id, fallbacks=fallbacks,
                     clustering_depth=cluster_depth_of(root))
    return tree, modules
