"""Batch-level word-pair graph.

Nodes are the pairs of one batch. Edges (stored in both directions, no
self-loops) come from three rules applied in order:

1. the two pairs share a surface token (weight 1);
2. the cosine between the pairs' fingerprints exceeds ``tau`` in the synonym
   or the antonym space (weight 1), where a pair's fingerprint in a space is
   the mean of its two projected vectors;
3. single-hop transitivity: ``i - j`` and ``j - k`` with no ``i - k`` edge
   yields ``i - k`` with ``trans_weight``. Computed once from rules 1-2; it
   does not cascade.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import NORM_FLOOR, InvalidInputError, Tensor

RULE_SHARED_WORD = 1
RULE_SIMILARITY = 2
RULE_TRANSITIVE = 3


class GraphError(ValueError):
    """An edge refers to a node that does not exist."""


@dataclass
class PairGraph:
    n_nodes: int
    edges: list[tuple[int, int, float]]
    rules: list[int] = field(default_factory=list)
    node_features: np.ndarray | None = None

    @property
    def nodes(self) -> list[int]:
        return list(range(self.n_nodes))

    def edge_map(self) -> dict[tuple[int, int], tuple[float, int]]:
        return {(s, d): (w, r) for (s, d, w), r in zip(self.edges, self.rules)}

    def weight_matrix(self) -> np.ndarray:
        """Dense ``(n, n)`` weights, 0 where there is no edge."""
        W = np.zeros((self.n_nodes, self.n_nodes))
        for s, d, w in self.edges:
            W[s, d] = w
        return W

    def dump_lines(self) -> list[str]:
        return [f"{s} {d} {w:g} {r}" for (s, d, w), r in zip(self.edges, self.rules)]


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def fingerprints(forwards) -> tuple[np.ndarray, np.ndarray]:
    """Per-node mean projected vectors ``(syn, ant)``.

    Accepts either a batch object whose ``s1, s2, a1, a2`` are ``(n, d')``
    matrices or a sequence of per-pair objects holding vectors.
    """
    if hasattr(forwards, "s1"):
        s1, s2, a1, a2 = (np.atleast_2d(_values(getattr(forwards, k))) for k in ("s1", "s2", "a1", "a2"))
    else:
        s1, s2, a1, a2 = (
            np.stack([_values(getattr(f, k)).reshape(-1) for f in forwards]) if len(forwards) else np.zeros((0, 0))
            for k in ("s1", "s2", "a1", "a2")
        )
    return 0.5 * (s1 + s2), 0.5 * (a1 + a2)


def _cosine_matrix(F: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(F, axis=1)
    ok = norms >= NORM_FLOOR
    unit = np.where(ok[:, None], F / np.where(ok, norms, 1.0)[:, None], 0.0)
    return unit @ unit.T


def build_graph(
    batch: Sequence,
    forwards,
    tau: float,
    trans_weight: float = 0.5,
) -> PairGraph:
    n = len(batch)
    syn_fp, ant_fp = fingerprints(forwards)
    if syn_fp.shape[0] != n:
        raise InvalidInputError(f"{n} pairs but {syn_fp.shape[0]} forward results")
    if not 0.0 < trans_weight <= 1.0:
        raise InvalidInputError(f"transitive edge weight must be in (0, 1], got {trans_weight}")
    if n == 0:
        return PairGraph(0, [], [])

    vocab: dict[str, int] = {}
    incidence = np.zeros((n, 2 * n), dtype=bool)
    for i, p in enumerate(batch):
        for tok in (p.w1, p.w2):
            incidence[i, vocab.setdefault(tok, len(vocab))] = True
    inc = incidence[:, : len(vocab)].astype(np.int64)
    shared = (inc @ inc.T) > 0

    similar = (_cosine_matrix(syn_fp) > tau) | (_cosine_matrix(ant_fp) > tau)

    off_diag = ~np.eye(n, dtype=bool)
    rule1 = shared & off_diag
    rule2 = similar & off_diag & ~rule1
    direct = rule1 | rule2
    two_hop = (direct.astype(np.int64) @ direct.astype(np.int64)) > 0
    rule3 = two_hop & ~direct & off_diag

    edges, rules = [], []
    for src, dst in zip(*np.nonzero(direct | rule3)):
        src, dst = int(src), int(dst)
        if rule1[src, dst]:
            edges.append((src, dst, 1.0))
            rules.append(RULE_SHARED_WORD)
        elif rule2[src, dst]:
            edges.append((src, dst, 1.0))
            rules.append(RULE_SIMILARITY)
        else:
            edges.append((src, dst, float(trans_weight)))
            rules.append(RULE_TRANSITIVE)
    return PairGraph(n, edges, rules)


def check_edges(edges, n_nodes: int) -> None:
    for s, d, w in edges:
        if not (0 <= s < n_nodes and 0 <= d < n_nodes):
            raise GraphError(f"edge ({s}, {d}) references a node outside 0..{n_nodes - 1}")
        if not 0.0 < w <= 1.0:
            raise GraphError(f"edge ({s}, {d}) has weight {w} outside (0, 1]")


@dataclass
class GraphStats:
    n_nodes: int
    n_edges: int
    edges_per_rule: dict[int, int]
    degree_histogram: dict[int, int]
    n_components: int

    def footer(self) -> str:
        rules = " ".join(f"rule{r}={self.edges_per_rule.get(r, 0)}" for r in (1, 2, 3))
        hist = ",".join(f"{k}:{v}" for k, v in sorted(self.degree_histogram.items()))
        return (
            f"# nodes={self.n_nodes} edges={self.n_edges} {rules} "
            f"components={self.n_components} degrees={hist}"
        )


def _find(parent: list[int], x: int) -> int:
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


def graph_stats(g: PairGraph) -> GraphStats:
    """Counts per directed edge, degree = out-degree (equal to in-degree here)."""
    parent = list(range(g.n_nodes))
    degree = Counter()
    for s, d, _ in g.edges:
        degree[s] += 1
        rs, rd = _find(parent, s), _find(parent, d)
        if rs != rd:
            parent[rs] = rd
    components = len({_find(parent, i) for i in range(g.n_nodes)})
    histogram = Counter(degree[i] for i in range(g.n_nodes))
    return GraphStats(
        n_nodes=g.n_nodes,
        n_edges=len(g.edges),
        edges_per_rule=dict(Counter(g.rules)),
        degree_histogram=dict(histogram),
        n_components=components,
    )
