"""Enclosing-subgraph extraction and double-radius positional labels.

For a target pair (u, v) with hop budget k, the enclosing subgraph is the
intersection of the two k-hop neighborhoods, pruned to a fixed point so
that every surviving node is within k restricted hops of both anchors
(paths to u may not pass through v and vice versa) and no non-anchor node
is isolated. Hop traversal is undirected; edge direction and relation are
preserved in the stored edges. The target edge and its inverse are removed
before any distance computation.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .kgdata import KnowledgeGraph, Triple

UNREACHABLE = -1

# Anchor label convention: u gets (0, 1) and v gets (1, 0) regardless of
# their true cross-distance.
U_LABEL = (0, 1)
V_LABEL = (1, 0)


@dataclass
class EnclosingSubgraph:
    target: Triple
    nodes: list[int]          # global entity ids; u first, then v, rest sorted
    dist_u: np.ndarray        # per-node d(i, u)
    dist_v: np.ndarray        # per-node d(i, v)
    edges: list[tuple[int, int, int]]  # (local head, relation, local tail)
    k: int

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def to_json_dict(self, entity_names=None, relation_names=None) -> dict:
        def ent(i):
            return entity_names[i] if entity_names is not None else i

        def rel(r):
            return relation_names[r] if relation_names is not None else r

        return {
            "target": {"head": ent(self.target.head), "rel": rel(self.target.rel), "tail": ent(self.target.tail)},
            "k": self.k,
            "nodes": [
                {"entity": ent(g), "d_u": int(self.dist_u[i]), "d_v": int(self.dist_v[i])}
                for i, g in enumerate(self.nodes)
            ],
            "edges": [
                {"head": ent(self.nodes[h]), "rel": rel(r), "tail": ent(self.nodes[t])}
                for h, r, t in self.edges
            ],
        }


def _mask_for(target: tuple[int, int, int] | None, extra=()) -> set[tuple[int, int, int]]:
    mask: set[tuple[int, int, int]] = set()
    pairs = list(extra)
    if target is not None:
        pairs.append(target)
    for h, r, t in pairs:
        mask.add((h, r, t))
        mask.add((t, r, h))
    return mask


def _khop(graph: KnowledgeGraph, node: int, k: int, mask: set) -> set[int]:
    seen = {node}
    frontier = [node]
    for _ in range(k):
        nxt = []
        for cur in frontier:
            for rel, nbr, inv in graph.undirected_neighbors(cur):
                edge = (nbr, rel, cur) if inv else (cur, rel, nbr)
                if edge in mask:
                    continue
                if nbr not in seen:
                    seen.add(nbr)
                    nxt.append(nbr)
        if not nxt:
            break
        frontier = nxt
    return seen


def khop_neighbors(graph: KnowledgeGraph, node: int, k: int) -> set[int]:
    """Nodes reachable within k undirected hops, seed included at distance 0."""
    if node not in graph.entities:
        raise DataError(f"unknown node {node}")
    if k < 1:
        raise DataError(f"hop budget must be >= 1, got {k}")
    return _khop(graph, node, k, set())


def _restricted_bfs(
    graph: KnowledgeGraph,
    candidates: set[int],
    anchor: int,
    blocked: int,
    k: int,
    mask: set,
) -> dict[int, int]:
    """BFS from `anchor` within `candidates`, with `blocked` deleted.

    Returns distances <= k for reached nodes; absent keys are unreachable
    within the budget.
    """
    dist = {anchor: 0}
    queue = deque([anchor])
    while queue:
        cur = queue.popleft()
        d = dist[cur]
        if d == k:
            continue
        for rel, nbr, inv in graph.undirected_neighbors(cur):
            edge = (nbr, rel, cur) if inv else (cur, rel, nbr)
            if edge in mask:
                continue
            if nbr == blocked or nbr not in candidates or nbr in dist:
                continue
            dist[nbr] = d + 1
            queue.append(nbr)
    return dist


def restricted_distances(
    graph: KnowledgeGraph,
    candidates: set[int],
    anchor: int,
    blocked: int,
    k: int,
) -> dict[int, int]:
    """Hop distances from `anchor` avoiding `blocked`, capped at k.

    Candidates not reached within k hops map to UNREACHABLE.
    """
    if anchor == blocked:
        raise DataError("anchor and blocked node must differ")
    dist = _restricted_bfs(graph, candidates | {anchor}, anchor, blocked, k, set())
    return {n: dist.get(n, UNREACHABLE) for n in candidates}


def _induced_edges(graph: KnowledgeGraph, nodes: set[int], mask: set) -> list[tuple[int, int, int]]:
    edges = []
    for h in nodes:
        for rel, t in graph.out_adj.get(h, ()):
            if t in nodes and (h, rel, t) not in mask:
                edges.append((h, rel, t))
    return edges


def extract_enclosing(
    graph: KnowledgeGraph,
    u: int,
    r_t: int | None,
    v: int,
    k: int,
    extra_masked=(),
) -> EnclosingSubgraph:
    """Extract the k-hop enclosing subgraph of the pair (u, v).

    `extra_masked` triples are hidden from the graph for this extraction
    (used for leave-one-out inference). Passing r_t=None skips target-edge
    removal, which only makes sense for exploratory dumps.
    """
    if u not in graph.entities or v not in graph.entities:
        missing = u if u not in graph.entities else v
        raise DataError(f"anchor entity {missing} not present in graph")
    target = (u, r_t, v) if r_t is not None else None
    mask = _mask_for(target, extra_masked)

    if u == v:
        # Degenerate self-pair: single node, no edges.
        return EnclosingSubgraph(
            target=Triple(u, r_t if r_t is not None else -1, v),
            nodes=[u],
            dist_u=np.array([U_LABEL[0]]),
            dist_v=np.array([U_LABEL[1]]),
            edges=[],
            k=k,
        )

    nodes = (_khop(graph, u, k, mask) & _khop(graph, v, k, mask)) | {u, v}

    # Prune to a fixed point: each pass recomputes restricted distances on
    # the current induced node set and drops violating or isolated nodes.
    while True:
        du = _restricted_bfs(graph, nodes, u, v, k, mask)
        dv = _restricted_bfs(graph, nodes, v, u, k, mask)
        incident: set[int] = set()
        for h, _, t in _induced_edges(graph, nodes, mask):
            incident.add(h)
            incident.add(t)
        drop = {
            n for n in nodes
            if n not in (u, v) and (n not in du or n not in dv or n not in incident)
        }
        if not drop:
            break
        nodes -= drop

    ordered = [u, v] + sorted(nodes - {u, v})
    local = {g: i for i, g in enumerate(ordered)}
    dist_u = np.array([U_LABEL[0], V_LABEL[0]] + [du[n] for n in ordered[2:]], dtype=np.int64)
    dist_v = np.array([U_LABEL[1], V_LABEL[1]] + [dv[n] for n in ordered[2:]], dtype=np.int64)
    edges = sorted(
        (local[h], r, local[t]) for h, r, t in _induced_edges(graph, set(ordered), mask)
    )
    return EnclosingSubgraph(
        target=Triple(u, r_t if r_t is not None else -1, v),
        nodes=ordered,
        dist_u=dist_u,
        dist_v=dist_v,
        edges=edges,
        k=k,
    )


def positional_embedding(d_u: int, d_v: int, k: int) -> np.ndarray:
    """One-hot pair encoding of the distance labels, length 2k+2."""
    if not (0 <= d_u <= k) or not (0 <= d_v <= k):
        raise DataError(f"distance pair ({d_u}, {d_v}) outside [0, {k}]")
    vec = np.zeros(2 * k + 2)
    vec[d_u] = 1.0
    vec[(k + 1) + d_v] = 1.0
    return vec


def positional_matrix(sg: EnclosingSubgraph) -> np.ndarray:
    """Stacked positional embeddings for every node of a subgraph."""
    out = np.zeros((sg.num_nodes, 2 * sg.k + 2))
    for i in range(sg.num_nodes):
        out[i, int(sg.dist_u[i])] = 1.0
        out[i, (sg.k + 1) + int(sg.dist_v[i])] = 1.0
    return out
