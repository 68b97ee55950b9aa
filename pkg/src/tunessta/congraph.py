"""Difference-constraint multigraph over flip-flop clock skews.

Every edge u -> v with weight ``w`` and period coefficient ``k`` encodes
``x_v - x_u >= w - k*T`` (equivalently a longest-path edge of length
``w - k*T``).  Node 0 is the reference root whose skew is pinned to zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from .combssta import BOUNDARY, PairDelays
from .netlist import Circuit
from .statmath import CanonicalRV

ROOT = 0

SETUP, HOLD, RANGE_LO, RANGE_HI, MERGED = "setup", "hold", "range_lo", "range_hi", "merged"
KINDS = (SETUP, HOLD, RANGE_LO, RANGE_HI, MERGED)


@dataclass(frozen=True, slots=True)
class CGEdge:
    id: int
    src: int
    dst: int
    w: CanonicalRV
    k: int
    kind: str
    pair: tuple[str, str] | None = None  # launching/capturing flip-flop for original edges

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be nonnegative")
        if self.kind not in KINDS:
            raise ValueError(f"unknown edge kind {self.kind!r}")


class ConstraintGraph:
    """Mutable multigraph with parallel edges and self-loops."""

    def __init__(self):
        self.names: dict[int, str] = {ROOT: "root"}
        self.ranges: dict[int, float] = {}
        self.edges: dict[int, CGEdge] = {}
        self.out: dict[int, dict[int, set[int]]] = {ROOT: {}}
        self.inn: dict[int, dict[int, set[int]]] = {ROOT: {}}
        self.original: dict[int, CGEdge] = {}
        self.boundary = {"setup": 0.0, "hold": 0.0}  # I/O boundary timing requirements
        self._next_id = 0

    # construction -----------------------------------------------------------

    def add_node(self, name: str, rng: float | None = None) -> int:
        nid = len(self.names)
        while nid in self.names:
            nid += 1
        self.names[nid] = name
        self.out[nid] = {}
        self.inn[nid] = {}
        if rng is not None:
            self.ranges[nid] = float(rng)
        return nid

    def add_edge(self, src: int, dst: int, w: CanonicalRV, k: int, kind: str, pair=None) -> CGEdge:
        e = CGEdge(self._next_id, src, dst, w, k, kind, pair)
        self._next_id += 1
        self.insert(e)
        if kind != MERGED:
            self.original[e.id] = e
        return e

    def new_edge(self, src: int, dst: int, w: CanonicalRV, k: int) -> CGEdge:
        return self.add_edge(src, dst, w, k, MERGED)

    def insert(self, e: CGEdge):
        self.edges[e.id] = e
        self.out[e.src].setdefault(e.dst, set()).add(e.id)
        self.inn[e.dst].setdefault(e.src, set()).add(e.id)

    def remove_edge(self, eid: int) -> CGEdge:
        e = self.edges.pop(eid)
        bucket = self.out[e.src][e.dst]
        bucket.discard(eid)
        if not bucket:
            del self.out[e.src][e.dst]
        bucket = self.inn[e.dst][e.src]
        bucket.discard(eid)
        if not bucket:
            del self.inn[e.dst][e.src]
        return e

    def remove_node(self, v: int):
        for eid in list(self.incident(v)):
            if eid in self.edges:
                self.remove_edge(eid)
        del self.out[v]
        del self.inn[v]

    # queries ---------------------------------------------------------------

    @property
    def nodes(self) -> list[int]:
        return list(self.out)

    def incident(self, v: int) -> Iterable[int]:
        for ids in self.out[v].values():
            yield from ids
        for u, ids in self.inn[v].items():
            if u != v:
                yield from ids

    def edges_between(self, u: int, v: int) -> list[CGEdge]:
        return [self.edges[i] for i in self.out[u].get(v, ())]

    def successors(self, v: int) -> list[int]:
        return [q for q in self.out[v] if q != v]

    def predecessors(self, v: int) -> list[int]:
        return [p for p in self.inn[v] if p != v]

    def connection(self, v: int) -> int:
        return len(self.predecessors(v)) * len(self.successors(v))

    def copy(self) -> "ConstraintGraph":
        g = ConstraintGraph()
        g.names = dict(self.names)
        g.ranges = dict(self.ranges)
        g.original = dict(self.original)
        g.boundary = dict(self.boundary)
        g.out = {v: {} for v in self.out}
        g.inn = {v: {} for v in self.inn}
        for e in self.edges.values():
            g.insert(e)
        g._next_id = self._next_id
        return g

    def dump(self) -> str:
        """One line per edge: ``src dst kind k mean sigma``."""
        lines = []
        for e in sorted(self.edges.values(), key=lambda e: e.id):
            lines.append(
                f"{self.names[e.src]} {self.names[e.dst]} {e.kind} {e.k} "
                f"{e.w.mean:.9g} {e.w.std:.9g}"
            )
        return "\n".join(lines) + ("\n" if lines else "")


def build_graph(
    pairs: Iterable[PairDelays],
    circuit: Circuit,
    boundary_setup: float = 0.0,
    boundary_hold: float = 0.0,
) -> ConstraintGraph:
    """Setup, hold and range constraints for ``circuit``.

    Flip-flops without a tuner (and the I/O boundary) are identified with the
    root; a pair whose ends are both pinned becomes a root self-loop.
    """
    g = ConstraintGraph()
    g.boundary = {"setup": float(boundary_setup), "hold": float(boundary_hold)}
    node_of: dict[str, int] = {BOUNDARY: ROOT}
    for ff in circuit.flipflops.values():
        if ff.has_tuner:
            nid = g.add_node(ff.id, ff.range)
            node_of[ff.id] = nid
        else:
            node_of[ff.id] = ROOT
    for nid, r in g.ranges.items():
        pair = (g.names[nid], g.names[nid])
        g.add_edge(ROOT, nid, CanonicalRV(0.0), 0, RANGE_LO, pair)
        g.add_edge(nid, ROOT, CanonicalRV(-r), 0, RANGE_HI, pair)
    for p in pairs:
        i, j = node_of[p.source], node_of[p.sink]
        g.add_edge(i, j, p.wbar, 1, SETUP, (p.source, p.sink))
        g.add_edge(j, i, p.wunder, 0, HOLD, (p.source, p.sink))
    return g


def graph_from_edges(
    n_nodes: int,
    edges: Iterable[tuple[int, int, CanonicalRV | float, int]],
    ranges: Mapping[int, float] | None = None,
) -> ConstraintGraph:
    """Graph on nodes ``0..n_nodes-1`` (node 0 is the root).

    Nodes listed in ``ranges`` also get their two range edges.
    """
    g = ConstraintGraph()
    for n in range(1, n_nodes):
        g.add_node(str(n), None if ranges is None else ranges.get(n))
    for nid, r in sorted(g.ranges.items()):
        g.add_edge(ROOT, nid, CanonicalRV(0.0), 0, RANGE_LO)
        g.add_edge(nid, ROOT, CanonicalRV(-r), 0, RANGE_HI)
    for src, dst, w, k in edges:
        if not isinstance(w, CanonicalRV):
            w = CanonicalRV(float(w))
        g.add_edge(src, dst, w, k, SETUP if k > 0 else HOLD)
    return g
