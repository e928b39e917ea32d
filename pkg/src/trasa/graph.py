"""Typed session graphs and shortest-path relation extraction."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import Hashable, Sequence


class EdgeType(IntEnum):
    NXT = 0
    PRE = 1
    NPL = 2
    SELF = 3


NUM_EDGE_TYPES = len(EdgeType)
DEFAULT_PATH_CAP = 16


class GraphInvariantError(RuntimeError):
    pass


@dataclass(frozen=True)
class SessionGraph:
    nodes: tuple                       # unique items, first-occurrence order
    edges: dict                        # (src, dst) -> EdgeType, node indices
    position_to_node: tuple[int, ...]

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def typed_edges(self) -> set[tuple[int, int, EdgeType]]:
        return {(s, d, t) for (s, d), t in self.edges.items()}

    def neighbors(self, node: int) -> list[int]:
        """Successors over non-SELF edges, ascending."""
        return self._adj[node]

    def __post_init__(self):
        adj: list[list[int]] = [[] for _ in self.nodes]
        for (s, d), t in self.edges.items():
            if t != EdgeType.SELF:
                adj[s].append(d)
        for a in adj:
            a.sort()
        object.__setattr__(self, "_adj", adj)


@dataclass(frozen=True)
class RelationPath:
    pair: tuple[int, int]             # canonical (low, high) node indices
    edge_types: tuple[EdgeType, ...]  # possibly truncated to the cap
    length: int                       # true graph distance (1 for self-pairs)
    nodes: tuple[int, ...] = ()       # full node sequence of the chosen path


def build_graph(session: Sequence[Hashable]) -> SessionGraph:
    if len(session) == 0:
        raise ValueError("session must contain at least one item")
    index: dict = {}
    positions = []
    for item in session:
        if item not in index:
            index[item] = len(index)
        positions.append(index[item])

    adjacent = set()
    for a, b in zip(positions, positions[1:]):
        if a != b:
            adjacent.add((a, b))

    edges: dict[tuple[int, int], EdgeType] = {}
    for a, b in sorted(adjacent):
        if (b, a) in adjacent:
            edges[(a, b)] = EdgeType.NPL
            edges[(b, a)] = EdgeType.NPL
        else:
            edges[(a, b)] = EdgeType.NXT
            edges[(b, a)] = EdgeType.PRE
    for v in range(len(index)):
        edges[(v, v)] = EdgeType.SELF
    return SessionGraph(nodes=tuple(index), edges=edges, position_to_node=tuple(positions))


def revert_mapping(graph: SessionGraph) -> list[int]:
    return list(graph.position_to_node)


def _distances_to(graph: SessionGraph, target: int) -> list[int]:
    # every non-SELF edge has a reverse edge, so BFS over successors gives
    # distances into ``target`` as well
    dist = [-1] * graph.num_nodes
    dist[target] = 0
    queue = deque([target])
    while queue:
        u = queue.popleft()
        for w in graph.neighbors(u):
            if dist[w] < 0:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def _walk(graph: SessionGraph, src: int, dst: int, dist: list[int], cap: int) -> RelationPath:
    # greedy descent on distance-to-target picks the lexicographically
    # smallest node sequence among all shortest paths
    if dist[src] < 0:
        raise GraphInvariantError(f"node {dst} unreachable from {src}; graph construction is broken")
    nodes = [src]
    u = src
    while u != dst:
        u = next(w for w in graph.neighbors(u) if dist[w] == dist[u] - 1)
        nodes.append(u)
    types = tuple(graph.edges[(a, b)] for a, b in zip(nodes, nodes[1:]))
    if len(types) > cap:
        types = types[-cap:]
    return RelationPath((src, dst), types, len(nodes) - 1, tuple(nodes))


def _self_path(i: int) -> RelationPath:
    return RelationPath((i, i), (EdgeType.SELF,), 1, (i,))


def shortest_path(graph: SessionGraph, src: int, dst: int, cap: int = DEFAULT_PATH_CAP) -> RelationPath:
    if src == dst:
        return _self_path(src)
    return _walk(graph, src, dst, _distances_to(graph, dst), cap)


def shortest_paths(graph: SessionGraph, cap: int = DEFAULT_PATH_CAP) -> dict[tuple[int, int], RelationPath]:
    """One relation path per unordered node pair, keyed ``(low, high)`` in row-major order."""
    m = graph.num_nodes
    dists = [_distances_to(graph, j) for j in range(m)]
    out = {}
    for i in range(m):
        out[(i, i)] = _self_path(i)
        for j in range(i + 1, m):
            out[(i, j)] = _walk(graph, i, j, dists[j], cap)
    return out
