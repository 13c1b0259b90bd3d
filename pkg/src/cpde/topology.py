"""Finite base graphs: path, cycle and 2D torus."""

from dataclasses import dataclass, field

import numpy as np


class TopologyError(ValueError):
    pass


KINDS = ("path", "cycle", "torus2d")


@dataclass(frozen=True)
class Topology:
    """Undirected graph with canonical vertex and edge numbering.

    Vertices are ``0..n_vertices-1``.  Edge ``e`` joins ``edges[e, 0] <
    edges[e, 1]`` except for wrap-around edges, which keep the
    ``(x, x+1 mod n)`` orientation so that edge ``x`` of a cycle always
    starts at ``x``.  On a torus ``(i, j)`` maps to vertex ``i * cols + j``;
    horizontal edges come first, then vertical ones.
    """

    kind: str
    extents: tuple
    edges: np.ndarray = field(repr=False)
    inc_ptr: np.ndarray = field(repr=False)
    inc_edges: np.ndarray = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return int(self.inc_ptr.shape[0] - 1)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def degree(self, x: int) -> int:
        return int(self.inc_ptr[x + 1] - self.inc_ptr[x])

    def incident_edges(self, x: int) -> np.ndarray:
        return self.inc_edges[self.inc_ptr[x]:self.inc_ptr[x + 1]]

    def neighbors(self, x: int) -> list:
        out = []
        for e in self.incident_edges(x):
            a, b = self.edges[e]
            out.append(int(b if a == x else a))
        return out

    def edge_id(self, x: int, y: int) -> int:
        for e in self.incident_edges(x):
            a, b = self.edges[e]
            if (a == x and b == y) or (a == y and b == x):
                return int(e)
        raise KeyError(f"no edge between {x} and {y}")

    @property
    def is_vertex_transitive(self) -> bool:
        return self.kind != "path"


def build_topology(kind: str, extents) -> Topology:
    if isinstance(extents, (int, np.integer)):
        extents = (int(extents),)
    extents = tuple(int(n) for n in extents)
    if kind not in KINDS:
        raise TopologyError(f"unknown topology kind {kind!r}; expected one of {KINDS}")
    if kind in ("path", "cycle") and len(extents) != 1:
        raise TopologyError(f"{kind} takes one extent, got {extents}")
    if kind == "torus2d":
        if len(extents) == 1:
            extents = (extents[0], extents[0])
        if len(extents) != 2:
            raise TopologyError(f"torus2d takes two extents, got {extents}")
    if any(n < 2 for n in extents):
        raise TopologyError(f"extent must be >= 2 in every dimension, got {extents}")

    if kind == "path":
        n = extents[0]
        edges = [(x, x + 1) for x in range(n - 1)]
    elif kind == "cycle":
        # n == 2 gives a doubled edge; kept for the extent >= 2 contract
        n = extents[0]
        edges = [(x, (x + 1) % n) for x in range(n)]
    else:
        rows, cols = extents
        n = rows * cols
        edges = [(i * cols + j, i * cols + (j + 1) % cols) for i in range(rows) for j in range(cols)]
        edges += [(i * cols + j, ((i + 1) % rows) * cols + j) for i in range(rows) for j in range(cols)]

    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    deg = np.zeros(n, dtype=np.int64)
    for a, b in edges:
        deg[a] += 1
        deg[b] += 1
    inc_ptr = np.zeros(n + 1, dtype=np.int64)
    inc_ptr[1:] = np.cumsum(deg)
    fill = inc_ptr[:-1].copy()
    inc_edges = np.empty(inc_ptr[-1], dtype=np.int64)
    for e, (a, b) in enumerate(edges):
        inc_edges[fill[a]] = e
        fill[a] += 1
        inc_edges[fill[b]] = e
        fill[b] += 1
    return Topology(kind, extents, edges, inc_ptr, inc_edges)


def parse_topology(spec: str) -> Topology:
    """Parse ``"cycle:64"``, ``"path:3"`` or ``"torus2d:8x8"``."""
    try:
        kind, ext = spec.split(":")
        extents = tuple(int(s) for s in ext.lower().split("x"))
    except ValueError as exc:
        raise TopologyError(f"cannot parse topology {spec!r}; use kind:n or torus2d:RxC") from exc
    return build_topology(kind.strip(), extents)


def topology_spec(topo: Topology) -> str:
    return f"{topo.kind}:" + "x".join(str(n) for n in topo.extents)
