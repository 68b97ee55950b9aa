"""Edge and gate criticality from a second, traced reduction run.

While the graph is reduced again, every current edge remembers which original
edges its merged branches contain.  For an original edge ``e`` it keeps the
weight of the heaviest branch through ``e`` and of the heaviest branch that
avoids ``e``.  When a loop is harvested this gives, per original edge, the
largest loop bound through it and the largest one avoiding it; the edge is
critical in a sample when the former wins.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy.special import ndtri

from . import statmath as sm
from .combssta import CutsetEngine, Delays
from .congraph import HOLD, SETUP, CGEdge, ConstraintGraph
from .netlist import Circuit
from .reducer import DEFAULT_THRESHOLD, Reducer
from .statmath import CanonicalRV

Z_SIGNIFICANT = 6.0
MIN_EDGE_CRIT = 1e-6


@dataclass
class _Trace:
    """Tracing list of one current edge, one row per original edge.

    ``rows`` index the original edge table.  ``through`` is the heaviest
    branch containing that edge; where ``full`` is set every heaviest branch
    contains it and the row holds the current edge weight.  ``avoid`` is the
    heaviest branch without it (nan mean: there is none).
    """

    rows: np.ndarray
    full: np.ndarray
    through: sm.Stack
    avoid: sm.Stack


class _Lazy:
    """A trace computed on first use; pruned edges never pay for theirs."""

    __slots__ = ("fn", "deps", "extra", "value")

    def __init__(self, fn=None, deps=(), extra=(), value=None):
        self.fn, self.deps, self.extra, self.value = fn, list(deps), extra, value

    def get(self) -> _Trace:
        todo = [self]
        while todo:
            x = todo[-1]
            if x.value is not None:
                todo.pop()
                continue
            pending = [d for d in x.deps if d.value is None]
            if pending:
                todo.extend(pending)
                continue
            x.value = x.fn([d.value for d in x.deps], *x.extra)
            x.fn, x.deps, x.extra = None, [], ()
            todo.pop()
        return self.value


@dataclass
class EdgeBounds:
    """Per original edge: best loop bound through it and best bound avoiding it."""

    bound: dict = field(default_factory=dict)
    other: dict = field(default_factory=dict)  # missing key: no competing loop
    n_loops: int = 0


class _LoopFold:
    """Per-edge maxima over the loops harvested so far.

    The competitor side is merged like a binary counter, so loops are
    combined in a balanced tree; a long one-sided chain of Clark maxima over
    many similar loops drifts noticeably.
    """

    def __init__(self, n: int, dims: int):
        self.n, self.dims = n, dims
        self.bound = sm.Stack.empty(n, dims)
        self.levels: list[sm.Stack | None] = []
        self.count = 0

    def add(self, tr: _Trace, value: CanonicalRV, k: int):
        scale = 1.0 / k if k else 1.0
        th = tr.through.scaled(scale)
        th.put_rv(tr.full, value)
        self.bound.put(tr.rows, self.bound.take(tr.rows).maxed(th))
        # members compete with the branch avoiding them, the rest with the loop
        c = sm.Stack.filled(value, self.n, self.dims).copy()
        c.put(tr.rows, tr.avoid.scaled(scale))
        j = 0
        while j < len(self.levels) and self.levels[j] is not None:
            c = self.levels[j].maxed(c)
            self.levels[j] = None
            j += 1
        if j == len(self.levels):
            self.levels.append(c)
        else:
            self.levels[j] = c
        self.count += 1

    def other(self) -> sm.Stack:
        acc = sm.Stack.empty(self.n, self.dims)
        for lv in reversed(self.levels):
            if lv is not None:
                acc = acc.maxed(lv)
        return acc

    def result(self, ids: np.ndarray) -> EdgeBounds:
        eb = EdgeBounds(n_loops=self.count)
        other = self.other()
        for r in np.flatnonzero(~np.isnan(self.bound.mu)):
            eid = int(ids[r])
            eb.bound[eid] = self.bound.row(r)
            o = other.row(r)
            if o is not None:
                eb.other[eid] = o
        return eb


def _significant(x: CanonicalRV, ref: CanonicalRV | None, z: float) -> bool:
    if ref is None:
        return True
    return x.mean + z * x.std >= ref.mean - z * ref.std - 1e-9 * (1.0 + abs(ref.mean))


class TracingReducer(Reducer):
    """Reduction that also folds every harvested loop into per-edge bounds.

    Loops far below ``tm`` (``z`` standard deviations) and trace rows that can
    never carry the heaviest branch are skipped unless ``keep_all`` is set.
    """

    def __init__(
        self,
        graph,
        tm,
        hold_slack,
        prune_threshold=DEFAULT_THRESHOLD,
        z=Z_SIGNIFICANT,
        keep_all=False,
        **kw,
    ):
        super().__init__(graph, prune_threshold, fixed_tm=tm, **kw)
        self.tm_ref = tm
        self.hold_ref = hold_slack
        self.z = z
        self.keep_all = keep_all
        self.ids = np.array(sorted(graph.edges), dtype=int)
        self.dims = max((e.w.global_sens.shape[0] for e in graph.edges.values()), default=0)
        self.traces: dict[int, _Lazy] = {}
        for r, eid in enumerate(self.ids):
            w = graph.edges[eid].w
            self.traces[int(eid)] = _Lazy(
                value=_Trace(
                    np.array([r]),
                    np.array([True]),
                    sm.Stack.filled(w, 1, self.dims).copy(),
                    sm.Stack.empty(1, self.dims),
                )
            )
        n = len(self.ids)
        self.setup_fold = _LoopFold(n, self.dims)
        self.hold_fold = _LoopFold(n, self.dims)

    def _placed(self, n, pos, st: sm.Stack) -> sm.Stack:
        out = sm.Stack.empty(n, self.dims)
        out.put(pos, st)
        return out

    def _serial(self, ts, w1, w2, wn):
        t1, t2 = ts
        rows = np.union1d(t1.rows, t2.rows)
        n = rows.shape[0]
        p1 = np.searchsorted(rows, t1.rows)
        p2 = np.searchsorted(rows, t2.rows)
        through = self._placed(n, p1, t1.through.plus(w2)).maxed(self._placed(n, p2, t2.through.plus(w1)))
        full = np.zeros(n, dtype=bool)
        full[p1] |= t1.full
        full[p2] |= t2.full
        in1 = np.zeros(n, dtype=bool)
        in1[p1] = True
        in2 = np.zeros(n, dtype=bool)
        in2[p2] = True
        u1 = self._placed(n, p1, t1.avoid)
        u2 = self._placed(n, p2, t2.avoid)
        avoid = sm.Stack.empty(n, self.dims)
        both = in1 & in2
        avoid.put(both, u1.take(both).plus_stack(u2.take(both)))
        only = in1 & ~in2
        avoid.put(only, u1.take(only).plus(w2))
        only = in2 & ~in1
        avoid.put(only, u2.take(only).plus(w1))
        return self._finish(rows, full, through, avoid, wn)

    def _parallel(self, ts, ws, wn):
        rows = ts[0].rows
        for t in ts[1:]:
            rows = np.union1d(rows, t.rows)
        n = rows.shape[0]
        through = sm.Stack.empty(n, self.dims)
        avoid = sm.Stack.empty(n, self.dims)
        all_full = np.ones(n, dtype=bool)
        for t, w in zip(ts, ws):
            pos = np.searchsorted(rows, t.rows)
            through = through.maxed(self._placed(n, pos, t.through))
            f = np.zeros(n, dtype=bool)
            f[pos] = t.full
            all_full &= f
            alt = sm.Stack.filled(w, n, self.dims).copy()  # branch m itself avoids e
            alt.put(pos, t.avoid)
            avoid = avoid.maxed(alt)
        return self._finish(rows, all_full, through, avoid, wn)

    def _finish(self, rows, full, through, avoid, w) -> _Trace:
        """Pin full rows to the edge weight; forget rows that can never win."""
        through.put_rv(full, w)
        if self.keep_all:
            return _Trace(rows, full, through, avoid)
        keep = full | (through.mu + self.z * through.std() >= w.mean - self.z * w.std)
        return _Trace(rows[keep], full[keep], through.take(keep), avoid.take(keep))

    def on_serial(self, new: CGEdge, e1: CGEdge, e2: CGEdge):
        deps = (self.traces[e1.id], self.traces[e2.id])
        self.traces[new.id] = _Lazy(self._serial, deps, (e1.w, e2.w, new.w))

    def on_parallel(self, new: CGEdge, group: list[CGEdge]):
        deps = [self.traces[m.id] for m in group]
        self.traces[new.id] = _Lazy(self._parallel, deps, ([m.w for m in group], new.w))

    def on_loop(self, e: CGEdge):
        if e.k > 0:
            bound = e.w / e.k
            if self.keep_all or _significant(bound, self.tm_ref, self.z):
                self.setup_fold.add(self.traces[e.id].get(), bound, e.k)
        elif self.keep_all or _significant(e.w, self.hold_ref, self.z):
            self.hold_fold.add(self.traces[e.id].get(), e.w, 0)

    def on_drop(self, e: CGEdge):
        self.traces.pop(e.id, None)


@dataclass
class TracedBounds:
    setup: EdgeBounds
    hold: EdgeBounds


def reduce_with_tracing(
    graph: ConstraintGraph,
    tm: CanonicalRV | None,
    hold_slack: CanonicalRV | None = None,
    prune_threshold: float = DEFAULT_THRESHOLD,
    z: float = Z_SIGNIFICANT,
    keep_all: bool = False,
) -> TracedBounds:
    """Re-run the reduction on a copy of ``graph``, pruning against ``tm``."""
    r = TracingReducer(graph.copy(), tm, hold_slack, prune_threshold, z, keep_all)
    r.run()
    return TracedBounds(r.setup_fold.result(r.ids), r.hold_fold.result(r.ids))


def sequential_criticality(bounds: EdgeBounds) -> dict[int, float]:
    """P{the best loop through e is at least every loop avoiding e}.

    Edges on no relevant loop are left out (criticality 0).
    """
    out = {}
    for e, b in bounds.bound.items():
        other = bounds.other.get(e)
        out[e] = 1.0 if other is None else sm.prob_leq(other - b, 0.0)
    return out


def edge_terms(bounds: EdgeBounds) -> dict[int, CanonicalRV | None]:
    """X_e = (best loop avoiding e) - (best loop through e); None when nothing competes."""
    return {e: (None if e not in bounds.other else bounds.other[e] - b) for e, b in bounds.bound.items()}


def _edge_term(x: CanonicalRV | None, y: CanonicalRV | None) -> CanonicalRV | None:
    """Gaussian stand-in for max(X_e, Y_e), or None when it is surely <= 0.

    Clark's max keeps the correlation structure, but its lower tail is poor
    when both X and Y are unlikely to be negative, so the mean is moved until
    P{term <= 0} equals the exact bivariate probability.
    """
    if x is None and y is None:
        return None
    if x is None or y is None:
        return x if y is None else y
    c = sm.stat_max(x, y)
    p = sm.prob_both_leq(x, y)
    sd = c.std
    if sd == 0.0:
        return c
    if p >= 1.0:
        return None
    if p <= 0.0:
        return c + max(0.0, 40.0 * sd - c.mean)
    return c + (-sd * float(ndtri(p)) - c.mean)


def gate_criticality(terms: Iterable[tuple[CanonicalRV | None, CanonicalRV | None]]) -> float:
    """P{min over edges of max(X_e, Y_e) <= 0}; None parts are surely <= 0."""
    acc = None
    for x, y in terms:
        c = _edge_term(x, y)
        if c is None:
            return 1.0
        if sm.prob_leq(c, 0.0) < 1e-15:
            continue  # never wins the min
        acc = c if acc is None else sm.stat_min(acc, c)
    if acc is None:
        return 0.0
    return sm.prob_leq(acc, 0.0)


@dataclass
class CriticalityReport:
    tm: CanonicalRV | None
    hold_slack: CanonicalRV | None
    edges: list = field(default_factory=list)  # dicts: id, src_ff, dst_ff, kind, c_e, c_hold
    gates: dict = field(default_factory=dict)  # gate id -> c_g
    gates_hold: dict = field(default_factory=dict)
    n_setup_loops: int = 0
    n_hold_loops: int = 0

    def summary(self, thresholds=(0.3, 0.1)) -> dict:
        return {
            f"gates_above_{t}": sum(1 for v in self.gates.values() if v > t) for t in thresholds
        } | {
            f"edges_above_{t}": sum(1 for r in self.edges if r["c_e"] > t) for t in thresholds
        }

    def ranked_gates(self) -> list[tuple[str, float, float]]:
        ids = set(self.gates) | set(self.gates_hold)
        rows = [(g, self.gates.get(g, 0.0), self.gates_hold.get(g, 0.0)) for g in ids]
        return sorted(rows, key=lambda r: (-r[1], -r[2], r[0]))

    def ranked_edges(self) -> list[dict]:
        return sorted(self.edges, key=lambda r: (-r["c_e"], -r["c_hold"], r["id"]))

    def to_dict(self) -> dict:
        def rv(x):
            return None if x is None else {"mean": x.mean, "std": x.std}

        return {
            "tm": rv(self.tm),
            "hold_slack": rv(self.hold_slack),
            "loops": {"setup": self.n_setup_loops, "hold": self.n_hold_loops},
            "summary": self.summary(),
            "gates": [{"gate_id": g, "c_g": c, "c_g_hold": h} for g, c, h in self.ranked_gates()],
            "edges": self.ranked_edges(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def gates_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gate_id", "c_g", "c_g_hold"])
        for g, c, h in self.ranked_gates():
            w.writerow([g, repr(c), repr(h)])
        return buf.getvalue()

    def edges_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["src_ff", "dst_ff", "kind", "c_e", "c_hold"])
        for r in self.ranked_edges():
            w.writerow([r["src_ff"], r["dst_ff"], r["kind"], repr(r["c_e"]), repr(r["c_hold"])])
        return buf.getvalue()


def _gate_side(
    circuit: Circuit,
    delays: Delays,
    graph: ConstraintGraph,
    crit: Mapping[int, float],
    xs: Mapping[int, CanonicalRV | None],
) -> dict[str, float]:
    """Combine edge terms with the path partitions of their flip-flop pairs."""
    edges = [graph.original[e] for e, c in crit.items() if c > MIN_EDGE_CRIT and graph.original[e].kind in (SETUP, HOLD)]
    per_gate: dict[str, list] = {}
    for use_min, kind in ((False, SETUP), (True, HOLD)):
        sel = [e for e in edges if e.kind == kind]
        if not sel:
            continue
        eng = CutsetEngine(
            circuit, delays, [e.pair[0] for e in sel], [e.pair[1] for e in sel], use_min=use_min
        )
        cache = {}
        for e in sel:
            if e.pair not in cache:
                cache[e.pair] = eng.cuts(*e.pair)[1]
            for gid, cut in cache[e.pair].items():
                per_gate.setdefault(gid, []).append((xs.get(e.id), cut.y))
    return {g: gate_criticality(t) for g, t in per_gate.items()}


def analyze(
    circuit: Circuit,
    delays: Delays,
    graph: ConstraintGraph,
    tm: CanonicalRV | None,
    hold_slack: CanonicalRV | None,
    prune_threshold: float = DEFAULT_THRESHOLD,
) -> CriticalityReport:
    tb = reduce_with_tracing(graph, tm, hold_slack, prune_threshold)
    c_setup = sequential_criticality(tb.setup)
    c_hold = sequential_criticality(tb.hold)
    rep = CriticalityReport(tm, hold_slack, n_setup_loops=tb.setup.n_loops, n_hold_loops=tb.hold.n_loops)
    for eid, e in sorted(graph.original.items()):
        src_ff, dst_ff = e.pair if e.pair else (graph.names[e.src], graph.names[e.dst])
        rep.edges.append(
            {
                "id": eid,
                "src_ff": src_ff,
                "dst_ff": dst_ff,
                "kind": e.kind,
                "c_e": c_setup.get(eid, 0.0),
                "c_hold": c_hold.get(eid, 0.0),
            }
        )
    rep.gates = _gate_side(circuit, delays, graph, c_setup, edge_terms(tb.setup))
    rep.gates_hold = _gate_side(circuit, delays, graph, c_hold, edge_terms(tb.hold))
    for g in circuit.order:
        rep.gates.setdefault(g, 0.0)
        rep.gates_hold.setdefault(g, 0.0)
    return rep
