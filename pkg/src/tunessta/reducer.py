"""Node elimination on the constraint graph.

Nodes are removed one at a time.  Removing a node joins each incoming edge
with each outgoing one; self-loops that appear are turned into bounds on the
clock period (or on the hold slack when they carry no period term), and
parallel edges with the same period coefficient are collapsed with a
statistical max.
"""

from __future__ import annotations

import csv
import heapq
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erfc

from . import statmath as sm
from .congraph import ROOT, CGEdge, ConstraintGraph
from .statmath import CanonicalRV

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.98


@dataclass
class TmAccumulator:
    tm: CanonicalRV | None = None  # None: no loop with a period term seen yet
    hold_slack: CanonicalRV | None = None  # None: no period-free loop seen yet
    count: int = 0
    hold_count: int = 0

    def add_bound(self, bound: CanonicalRV):
        self.tm = bound if self.tm is None else sm.stat_max(self.tm, bound)
        self.count += 1

    def add_hold(self, w: CanonicalRV):
        self.hold_slack = w if self.hold_slack is None else sm.stat_max(self.hold_slack, w)
        self.hold_count += 1


@dataclass
class TraceRow:
    iter: int
    node: str
    edges_before: int
    edges_after: int
    pruned_range: int
    pruned_dom: int
    merged: int


@dataclass
class ReduceTrace:
    rows: list[TraceRow] = field(default_factory=list)
    probabilistic_prunes: int = 0  # prunes decided with probability strictly below 1

    COLUMNS = ("iter", "node", "edges_before", "edges_after", "pruned_range", "pruned_dom", "merged")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([getattr(r, c) for c in self.COLUMNS])
        return buf.getvalue()


class Reducer:
    """One elimination run over ``graph`` (mutated in place).

    ``fixed_tm`` makes pruning use a known period instead of the running one.
    ``order`` forces a node removal order (non-root ids); otherwise the node
    with the fewest predecessor x successor combinations goes first.
    """

    def __init__(
        self,
        graph: ConstraintGraph,
        prune_threshold: float = DEFAULT_THRESHOLD,
        fixed_tm: CanonicalRV | None = None,
        prune: bool = True,
        order: Sequence[int] | None = None,
    ):
        self.g = graph
        self.threshold = prune_threshold
        self.fixed_tm = fixed_tm
        self.prune = prune
        self.order = list(order) if order is not None else None
        self.acc = TmAccumulator()
        self.trace = ReduceTrace()
        self._heap: list[tuple[int, int]] = []

    # hooks for subclasses ---------------------------------------------------

    def on_serial(self, new: CGEdge, e1: CGEdge, e2: CGEdge):
        pass

    def on_parallel(self, new: CGEdge, group: list[CGEdge]):
        pass

    def on_loop(self, e: CGEdge):
        pass

    def on_drop(self, e: CGEdge):
        pass

    # primitive steps --------------------------------------------------------

    def remove_self_loops(self, v: int):
        for eid in sorted(self.g.out[v].get(v, ())):
            e = self.g.remove_edge(eid)
            if e.k > 0:
                self.acc.add_bound(e.w / e.k)
            else:
                self.acc.add_hold(e.w)
            self.on_loop(e)
            self.on_drop(e)

    def serial_merge(self, v: int):
        g = self.g
        ins = [g.edges[i] for p, ids in g.inn[v].items() if p != v for i in ids]
        outs = [g.edges[i] for q, ids in g.out[v].items() if q != v for i in ids]
        ins.sort(key=lambda e: e.id)
        outs.sort(key=lambda e: e.id)
        for e1 in ins:
            for e2 in outs:
                new = g.new_edge(e1.src, e2.dst, e1.w + e2.w, e1.k + e2.k)
                self.on_serial(new, e1, e2)
        for e in ins + outs:
            g.remove_edge(e.id)
            self.on_drop(e)
        for eid in sorted(g.out[v].get(v, ())):  # leftover self-loops, normally harvested already
            self.on_drop(g.remove_edge(eid))
        g.remove_node(v)

    def parallel_merge(self, i: int, j: int) -> int:
        groups: dict[int, list[CGEdge]] = {}
        for e in self.g.edges_between(i, j):
            groups.setdefault(e.k, []).append(e)
        merged = 0
        for k in sorted(groups):
            group = sorted(groups[k], key=lambda e: e.id)
            if len(group) < 2:
                continue
            w = sm.stat_max_all([e.w for e in group])
            new = self.g.new_edge(i, j, w, k)
            self.on_parallel(new, group)
            for e in group:
                self.g.remove_edge(e.id)
                self.on_drop(e)
            merged += len(group) - 1
        return merged

    def _plain(self) -> bool:
        cls = type(self)
        return all(
            getattr(cls, h) is getattr(Reducer, h) for h in ("on_serial", "on_parallel", "on_loop", "on_drop")
        )

    def eliminate(self, v: int, preds: list[int], succs: list[int]) -> int:
        """serial_merge, self-loop harvest and parallel_merge in one pass.

        Products and parallel maxima are computed as arrays.  The fold order
        and the relative order of new edge ids match the step-by-step path.
        Only valid when the hooks are no-ops.
        """
        g = self.g
        ins = sorted((g.edges[i] for p, ids in g.inn[v].items() if p != v for i in ids), key=lambda e: e.id)
        outs = sorted((g.edges[i] for q, ids in g.out[v].items() if q != v for i in ids), key=lambda e: e.id)
        for e in ins + outs:
            g.remove_edge(e.id)
        for eid in sorted(g.out[v].get(v, ())):
            g.remove_edge(eid)
        g.remove_node(v)
        if not ins or not outs:
            return 0

        old: dict[tuple[int, int, int], list[CGEdge]] = {}
        for p in preds:
            for q in succs:
                if p != q:
                    for e in g.edges_between(p, q):
                        old.setdefault((p, q, e.k), []).append(e)
        olds = [e for es in old.values() for e in es]
        dims = max(e.w.global_sens.shape[0] for e in ins + outs + olds)

        def rows(es):
            return (
                np.array([e.w.mean for e in es]),
                self._sens_matrix([e.w for e in es], dims),
                np.array([e.w.indep_sigma for e in es]),
            )

        mi, si, ii = rows(ins)
        mo, so, io_ = rows(outs)
        n_out = len(outs)
        pm = (mi[:, None] + mo[None, :]).ravel()
        ps = (si[:, None, :] + so[None, :, :]).reshape(len(ins) * n_out, dims)
        pi = np.hypot(ii[:, None], io_[None, :]).ravel()
        src = np.repeat([e.src for e in ins], n_out)
        dst = np.tile([e.dst for e in outs], len(ins))
        kk = (np.array([e.k for e in ins])[:, None] + np.array([e.k for e in outs])[None, :]).ravel()
        # one integer per (src, dst, k); its order is the tuple order
        m_node = max(g.out, default=0) + 1
        m_k = int(max(kk.max(), max((k for _, _, k in old), default=0))) + 1
        code = (src * m_node + dst) * m_k + kk
        loop = src == dst
        _, inv, counts = np.unique(code, return_inverse=True, return_counts=True)
        old_codes = np.array([(p * m_node + q) * m_k + k for p, q, k in old], dtype=code.dtype)
        lone = (counts[inv] == 1) & ~np.isin(code, old_codes) & ~loop

        def product(r):
            return sm._make(pm[r], ps[r].copy(), pi[r])

        # edges that survive unmerged: lone products and every self loop
        for r in np.flatnonzero(lone | loop).tolist():
            g.new_edge(int(src[r]), int(dst[r]), product(r), int(kk[r]))
        for p in preds:
            self.remove_self_loops(p)

        multi = np.flatnonzero(~lone & ~loop)
        multi = multi[np.argsort(code[multi], kind="stable")]
        fresh: dict[int, list[int]] = {}
        if multi.size:
            cuts = np.flatnonzero(np.diff(code[multi])) + 1
            for rs in np.split(multi, cuts):
                fresh[int(code[rs[0]])] = rs.tolist()
        keyed = {(p * m_node + q) * m_k + k: (p, q, k) for p, q, k in old}
        groups = []
        for c in sorted(set(keyed) | set(fresh)):
            rs = fresh.get(c, [])
            if c in keyed:
                key = keyed[c]
                es = sorted(old[key], key=lambda e: e.id)
            else:
                r0 = rs[0]
                key, es = (int(src[r0]), int(dst[r0]), int(kk[r0])), []
            if len(es) + len(rs) >= 2:
                groups.append((key, es, rs))
        if not groups:
            return 0
        om, os_, oi = rows([e for _, es, _ in groups for e in es])
        pos = 0
        idx_m, idx_s, idx_i, objs, lengths, origin = [], [], [], [], [], []
        for key, es, rs in groups:
            n_old = len(es)
            idx_m.append(om[pos : pos + n_old])
            idx_s.append(os_[pos : pos + n_old])
            idx_i.append(oi[pos : pos + n_old])
            idx_m.append(pm[rs])
            idx_s.append(ps[rs])
            idx_i.append(pi[rs])
            origin += [e.w for e in es] + [None] * len(rs)
            pos += n_old
            lengths.append(n_old + len(rs))
        mu = np.concatenate(idx_m)
        objs = np.array([id(w) if w is not None else -1 - r for r, w in enumerate(origin)])
        m, s, i, src = sm.fold_max_runs(mu, np.concatenate(idx_s), np.concatenate(idx_i), lengths, objs)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        merged = 0
        for gi, (key, es, rs) in enumerate(groups):
            r = int(src[gi])
            if r < 0:
                w = sm._make(m[gi], s[gi].copy(), i[gi])
            elif origin[r] is not None:
                w = origin[r]
            else:
                w = product(rs[r - starts[gi] - len(es)])
            g.new_edge(key[0], key[1], w, key[2])
            for e in es:
                g.remove_edge(e.id)
            merged += len(es) + len(rs) - 1
        return merged

    def _current_tm(self) -> CanonicalRV | None:
        return self.fixed_tm if self.fixed_tm is not None else self.acc.tm

    def _decide(self, x: CanonicalRV) -> bool:
        """Prune when P{x < 0} exceeds the threshold."""
        return self._decide_p(sm.prob_lt(x, 0.0))

    def _decide_p(self, p: float) -> bool:
        if p > self.threshold:
            if p < 1.0:
                self.trace.probabilistic_prunes += 1
            return True
        return False

    @staticmethod
    def _sens_matrix(rvs: list[CanonicalRV], dims: int) -> np.ndarray:
        out = np.zeros((len(rvs), dims))
        for row, x in enumerate(rvs):
            out[row, : x.global_sens.shape[0]] = x.global_sens
        return out

    @staticmethod
    def _lt_zero(mu: np.ndarray, sens: np.ndarray, ind: np.ndarray) -> np.ndarray:
        """Batched prob_lt(x, 0) for rows x = (mu, sens, ind)."""
        sigma = np.sqrt(np.einsum("ij,ij->i", sens, sens) + ind * ind)
        p = (mu < 0).astype(float)
        live = sigma > 0
        p[live] = 0.5 * erfc(mu[live] / (sigma[live] * math.sqrt(2.0)))
        return p

    def _range_slack_probs(self, edges: list[CGEdge], rs: list[float], tm: CanonicalRV | None) -> np.ndarray:
        """P{w - kT + r < 0} for each edge."""
        if not edges:
            return np.zeros(0)
        ws = [e.w for e in edges]
        dims = max(x.global_sens.shape[0] for x in ws + ([] if tm is None else [tm]))
        k = np.array([e.k for e in edges], dtype=float)
        mu = np.array([x.mean for x in ws])
        ind = np.array([x.indep_sigma for x in ws])
        sens = self._sens_matrix(ws, dims)
        if tm is not None:
            mu = mu - k * tm.mean
            sens = sens - np.outer(k, sm.pad(tm.global_sens, dims))
            ind = np.hypot(ind, k * tm.indep_sigma)
        return self._lt_zero(mu + np.asarray(rs), sens, ind)

    def _crossing_probs(self, pairs: list[tuple[CGEdge, CGEdge]], tm: CanonicalRV) -> np.ndarray:
        """P{(w2 - w1) / (k2 - k1) - T < 0} for each pair (e1, e2)."""
        if not pairs:
            return np.zeros(0)
        w1 = [a.w for a, _ in pairs]
        w2 = [b.w for _, b in pairs]
        dims = max(x.global_sens.shape[0] for x in w1 + w2 + [tm])
        c = 1.0 / np.array([b.k - a.k for a, b in pairs], dtype=float)
        mu = (np.array([x.mean for x in w2]) - np.array([x.mean for x in w1])) * c - tm.mean
        sens = (self._sens_matrix(w2, dims) - self._sens_matrix(w1, dims)) * c[:, None]
        sens = sens - sm.pad(tm.global_sens, dims)
        ind = np.hypot(np.array([x.indep_sigma for x in w2]), np.array([x.indep_sigma for x in w1])) * c
        return self._lt_zero(mu, sens, np.hypot(ind, tm.indep_sigma))

    def prune_edges(self) -> tuple[int, int]:
        g = self.g
        tm = self._current_tm()
        n_range = n_dom = 0
        # range pruning: x_dst - x_src >= -r_src always holds, so an edge that
        # demands less than that is implied by the range edges
        cands, rs = [], []
        for eid in sorted(g.edges):
            e = g.edges[eid]
            if e.src == e.dst or (e.k > 0 and tm is None):
                continue
            r = self._range_of(e.src)
            if r is None or (e.dst != ROOT and self._range_of(e.dst) is None):
                continue
            cands.append(e)
            rs.append(r)
        for e, p in zip(cands, self._range_slack_probs(cands, rs, tm)):
            if self._decide_p(p):
                g.remove_edge(e.id)
                self.on_drop(e)
                n_range += 1
        # dominance: of two parallel edges, the one with more period terms is
        # implied once T is past their crossing point
        if tm is not None:
            groups = []
            for u in list(g.out):
                for v in list(g.out[u]):
                    if u == v:
                        continue
                    es = sorted(g.edges_between(u, v), key=lambda e: (e.k, e.id))
                    if len(es) > 1 and es[0].k < es[-1].k:
                        groups.append(es)
            pairs = [(e1, e2) for es in groups for e2 in es for e1 in es if e1.k < e2.k]
            prob = dict(zip(((a.id, b.id) for a, b in pairs), self._crossing_probs(pairs, tm)))
            for es in groups:
                alive = {e.id for e in es}
                for e2 in es:
                    for e1 in es:
                        if e1.k >= e2.k or e1.id not in alive or e2.id not in alive:
                            continue
                        if self._decide_p(prob[e1.id, e2.id]):
                            g.remove_edge(e2.id)
                            self.on_drop(e2)
                            alive.discard(e2.id)
                            n_dom += 1
                            break
        return n_range, n_dom

    def _range_of(self, v: int) -> float | None:
        if v == ROOT:
            return 0.0
        if v in self.g.ranges and self.g.out[v].get(ROOT):
            return self.g.ranges[v]
        return None

    # scheduling ------------------------------------------------------------

    def _push(self, v: int):
        if v != ROOT and v in self.g.out:
            heapq.heappush(self._heap, (self.g.connection(v), v))

    def select_node(self) -> int:
        if self.order is not None:
            while self.order:
                v = self.order.pop(0)
                if v in self.g.out and v != ROOT:
                    return v
            raise ValueError("removal order exhausted with nodes left")
        while self._heap:
            c, v = heapq.heappop(self._heap)
            if v not in self.g.out:
                continue
            now = self.g.connection(v)
            if now == c:
                return v
            heapq.heappush(self._heap, (now, v))  # stale key, e.g. after pruning
        raise ValueError("no removable node")

    def run(self) -> tuple[CanonicalRV | None, CanonicalRV | None, ReduceTrace]:
        g = self.g
        for v in sorted(g.out):
            self.remove_self_loops(v)
        for v in sorted(g.out):
            self._push(v)
        last_prune = max(len(g.edges), 1)
        it = 0
        plain = self._plain()
        while len(g.out) > 1:
            before = len(g.edges)
            pr = pd = 0
            if self.prune:
                pr, pd = self.prune_edges()
                last_prune = max(len(g.edges), 1)
            v = self.select_node()
            preds = sorted(g.predecessors(v))
            succs = sorted(g.successors(v))
            name = g.names[v]
            if plain:
                merged = self.eliminate(v, preds, succs)
            else:
                self.serial_merge(v)
                for p in preds:
                    self.remove_self_loops(p)
                merged = 0
                for p in preds:
                    for q in succs:
                        if p != q:
                            merged += self.parallel_merge(p, q)
            if self.prune and len(g.edges) >= 2 * last_prune:
                a, b = self.prune_edges()
                pr += a
                pd += b
                last_prune = max(len(g.edges), 1)
            for u in set(preds) | set(succs):
                self._push(u)
            self.trace.rows.append(TraceRow(it, name, before, len(g.edges), pr, pd, merged))
            it += 1
        self.remove_self_loops(ROOT)
        return self.acc.tm, self.acc.hold_slack, self.trace


def compute_tm(
    graph: ConstraintGraph,
    prune_threshold: float = DEFAULT_THRESHOLD,
    prune: bool = True,
    order: Sequence[int] | None = None,
    inplace: bool = False,
) -> tuple[CanonicalRV | None, CanonicalRV | None, ReduceTrace]:
    """Minimum clock period form, hold slack form and the reduction trace.

    ``None`` for the period means no loop constrains it.  The graph is copied
    unless ``inplace`` is set.
    """
    g = graph if inplace else graph.copy()
    return Reducer(g, prune_threshold, prune=prune, order=order).run()
