"""Block-based propagation over the combinational logic between flip-flops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import statmath as sm
from .netlist import Circuit
from .statmath import CanonicalRV

BOUNDARY = "@io"  # virtual untunable flip-flop standing for the primary I/O

Delays = Mapping[str, tuple[CanonicalRV, CanonicalRV]]


@dataclass(frozen=True)
class PairDelays:
    source: str
    sink: str
    dmax: CanonicalRV
    dmin: CanonicalRV
    wbar: CanonicalRV
    wunder: CanonicalRV


def source_nets(circuit: Circuit, ff: str) -> tuple[str, ...]:
    return tuple(circuit.inputs) if ff == BOUNDARY else (ff,)


def sink_nets(circuit: Circuit, ff: str) -> tuple[str, ...]:
    return tuple(circuit.outputs) if ff == BOUNDARY else (circuit.flipflops[ff].d_net,)


def _dims(delays: Delays) -> int:
    return max((d[0].global_sens.shape[0] for d in delays.values()), default=0)


def _forward(
    circuit: Circuit,
    delay_of: Callable[[str], CanonicalRV],
    starts: Mapping[str, list[int]],
    rows: int,
    dims: int,
    use_min: bool = False,
    keep: set[str] | None = None,
) -> dict[str, sm.Stack]:
    """Arrival stacks: row r holds the latest (earliest) arrival from start r."""
    arr: dict[str, sm.Stack] = {}
    for net, rs in starts.items():
        st = sm.Stack.empty(rows, dims)
        st.mu[rs] = 0.0
        arr[net] = st
    remaining = {}
    for gid in circuit.order:
        for f in circuit.gates[gid].fanins:
            remaining[f] = remaining.get(f, 0) + 1
    for gid in circuit.order:
        g = circuit.gates[gid]
        acc = None
        for f in g.fanins:
            st = arr.get(f)
            if st is not None:
                if use_min:
                    st = st.negated()
                acc = st if acc is None else acc.maxed(st)
            remaining[f] -= 1
            if keep is not None and remaining[f] == 0 and f not in keep:
                arr.pop(f, None)
        if acc is None or np.all(np.isnan(acc.mu)):
            continue
        if use_min:
            acc = acc.negated()
        arr[gid] = acc.plus(delay_of(gid))
    if keep is not None:
        arr = {n: v for n, v in arr.items() if n in keep}
    return arr


def _backward(
    circuit: Circuit,
    delay_of: Callable[[str], CanonicalRV],
    ends: Mapping[str, list[int]],
    rows: int,
    dims: int,
) -> dict[str, sm.Stack]:
    """Departure stacks: latest delay from a net's driver output to end r."""
    dep: dict[str, sm.Stack] = {}
    for net, rs in ends.items():
        st = sm.Stack.empty(rows, dims)
        st.mu[rs] = 0.0
        dep[net] = st

    def merge(net, st):
        cur = dep.get(net)
        dep[net] = st if cur is None else cur.maxed(st)

    for gid in reversed(circuit.order):
        st = dep.get(gid)
        if st is None:
            continue
        through = st.plus(delay_of(gid))
        for f in circuit.gates[gid].fanins:
            merge(f, through)
    return dep


def pairwise_delays(
    circuit: Circuit,
    delays: Delays,
    io_paths: bool = True,
    boundary_setup: float = 0.0,
    boundary_hold: float = 0.0,
) -> list[PairDelays]:
    sources = list(circuit.flipflops)
    if io_paths and circuit.inputs:
        sources.append(BOUNDARY)
    sinks = list(circuit.flipflops)
    if io_paths and circuit.outputs:
        sinks.append(BOUNDARY)
    starts: dict[str, list[int]] = {}
    for r, src in enumerate(sources):
        for net in source_nets(circuit, src):
            starts.setdefault(net, []).append(r)
    keep = {n for snk in sinks for n in sink_nets(circuit, snk)}
    dims = _dims(delays)
    dmax_of = lambda g: delays[g][0]  # noqa: E731
    dmin_of = lambda g: delays[g][1]  # noqa: E731
    arr_max = _forward(circuit, dmax_of, starts, len(sources), dims, keep=keep)
    arr_min = _forward(circuit, dmin_of, starts, len(sources), dims, use_min=True, keep=keep)

    out = []
    for snk in sinks:
        nets = [n for n in sink_nets(circuit, snk) if n in arr_max]
        if not nets:
            continue
        if snk == BOUNDARY:
            setup, hold = boundary_setup, boundary_hold
        else:
            ff = circuit.flipflops[snk]
            setup, hold = ff.setup, ff.hold
        hi = arr_max[nets[0]]
        lo = arr_min[nets[0]].negated()
        for n in nets[1:]:
            hi = hi.maxed(arr_max[n])
            lo = lo.maxed(arr_min[n].negated())
        lo = lo.negated()
        for r, src in enumerate(sources):
            dmax = hi.row(r)
            if dmax is None:
                continue
            dmin = lo.row(r)
            out.append(
                PairDelays(
                    source=src,
                    sink=snk,
                    dmax=dmax,
                    dmin=dmin,
                    wbar=dmax + setup,
                    wunder=hold - dmin,
                )
            )
    return out


# --- cutset delays ---------------------------------------------------------


@dataclass(frozen=True)
class GateCut:
    gate: str
    d_ig: CanonicalRV
    d_gj: CanonicalRV
    d_pg: CanonicalRV
    # (longest path avoiding the gate) - (longest path through it); <= 0 means
    # the gate is on the longest path.  None: no relevant path avoids the gate.
    y: CanonicalRV | None


class _SegTree:
    """Interval insert / point query of statistical max over positions."""

    def __init__(self, n: int):
        self.size = 1
        while self.size < max(n, 1):
            self.size *= 2
        self.node: list[CanonicalRV | None] = [None] * (2 * self.size)

    def insert(self, lo: int, hi: int, value: CanonicalRV):
        lo += self.size
        hi += self.size + 1
        while lo < hi:
            if lo & 1:
                self._put(lo, value)
                lo += 1
            if hi & 1:
                hi -= 1
                self._put(hi, value)
            lo //= 2
            hi //= 2

    def _put(self, idx, value):
        cur = self.node[idx]
        self.node[idx] = value if cur is None else sm.stat_max(cur, value)

    def query(self, pos: int) -> CanonicalRV | None:
        idx = pos + self.size
        acc = None
        while idx >= 1:
            v = self.node[idx]
            if v is not None:
                acc = v if acc is None else sm.stat_max(acc, v)
            idx //= 2
        return acc


def _negligible(value: CanonicalRV, ref: CanonicalRV, z: float) -> bool:
    return value.mean + z * value.std < ref.mean - z * ref.std - 1e-9 * (1.0 + abs(ref.mean))


class CutsetEngine:
    """Per-gate path partitions for many flip-flop pairs.

    Forward sweeps from all requested sources and backward sweeps from all
    requested sinks are done once, batched as rows.  With ``use_min`` shortest
    paths are analysed instead; internally delays are negated so that the
    longest-path machinery applies unchanged.
    """

    def __init__(self, circuit: Circuit, delays: Delays, sources, sinks, use_min: bool = False, z: float = 6.0):
        self.c = circuit
        self.use_min = use_min
        self.z = z
        dims = _dims(delays)
        if use_min:
            self.dly = {g: sm.scale(d[1], -1.0) for g, d in delays.items()}
        else:
            self.dly = {g: d[0] for g, d in delays.items()}
        self.sources = list(dict.fromkeys(sources))
        self.sinks = list(dict.fromkeys(sinks))
        self.src_row = {s: r for r, s in enumerate(self.sources)}
        self.snk_row = {s: r for r, s in enumerate(self.sinks)}
        starts: dict[str, list[int]] = {}
        for r, s in enumerate(self.sources):
            for n in source_nets(circuit, s):
                starts.setdefault(n, []).append(r)
        ends: dict[str, list[int]] = {}
        for r, s in enumerate(self.sinks):
            for n in sink_nets(circuit, s):
                ends.setdefault(n, []).append(r)
        get = self.dly.__getitem__
        self.fwd = _forward(circuit, get, starts, len(self.sources), dims)
        self.bwd = _backward(circuit, get, ends, len(self.sinks), dims)
        start_order = list(circuit.inputs) + list(circuit.flipflops)
        self.pos = {n: k for k, n in enumerate(start_order)}
        base = len(start_order)
        for k, gid in enumerate(circuit.order):
            self.pos[gid] = base + k
        self.n_pos = base + len(circuit.order)

    def cuts(self, source: str, sink: str) -> tuple[CanonicalRV | None, dict[str, GateCut]]:
        """Pair delay (negated when ``use_min``) and the cut of every cone gate."""
        c = self.c
        ra, rb = self.src_row[source], self.snk_row[sink]

        def a(net):
            st = self.fwd.get(net)
            return None if st is None else st.row(ra)

        def b(net):
            st = self.bwd.get(net)
            return None if st is None else st.row(rb)

        snks = sink_nets(c, sink)
        arrivals = {n: a(n) for n in snks}
        pair = None
        for v in arrivals.values():
            if v is not None:
                pair = v if pair is None else sm.stat_max(pair, v)
        if pair is None:
            return None, {}
        pos = self.pos
        sink_pos = self.n_pos
        tree = _SegTree(self.n_pos + 1)

        # A path that skips position p uses an edge (u, v) with pos(u) < p < pos(v);
        # every path through such an edge avoids the net at p.
        def insert(u_pos, v_pos, value):
            if value is None or _negligible(value, pair, self.z):
                return
            if u_pos + 1 <= v_pos - 1:
                tree.insert(u_pos + 1, v_pos - 1, value)

        cone = []
        through = {}
        for gid in c.order:
            av = a(gid)
            if av is None:
                continue
            bv = b(gid)
            if bv is None:
                continue
            cone.append(gid)
            for f in c.gates[gid].fanins:
                af = a(f)
                if af is not None:
                    insert(pos[f], pos[gid], af + self.dly[gid] + bv)
        for n, v in arrivals.items():
            if v is not None:
                insert(pos[n], sink_pos, v)
        for n in source_nets(c, source):
            bn = b(n)
            if bn is not None:
                insert(-1, pos[n], bn)

        sign = -1.0 if self.use_min else 1.0
        out = {}
        for gid in cone:
            ins = [a(f) for f in c.gates[gid].fanins]
            d_ig = sm.stat_max_all([v for v in ins if v is not None])
            d_gj = b(gid)
            d_pg = d_ig + self.dly[gid] + d_gj
            comp = tree.query(pos[gid])
            y = None if comp is None else comp - d_pg
            if self.use_min:
                d_ig, d_gj, d_pg = -d_ig, -d_gj, -d_pg
            out[gid] = GateCut(gid, d_ig, d_gj, d_pg, y)
        return (pair * sign), out


def cone_cutsets(
    circuit: Circuit,
    delays: Delays,
    source: str,
    sink: str,
    use_min: bool = False,
    z: float = 6.0,
) -> tuple[CanonicalRV | None, dict[str, GateCut]]:
    """Cuts for a single pair; see :class:`CutsetEngine`."""
    return CutsetEngine(circuit, delays, [source], [sink], use_min, z).cuts(source, sink)


def gate_cutset_delays(
    circuit: Circuit,
    delays: Delays,
    gate: str,
    pair: tuple[str, str],
) -> tuple[CanonicalRV, CanonicalRV, CanonicalRV]:
    """(d_ig, d_gj, d_Pg) for ``gate`` on the paths of ``pair``."""
    _, cuts = cone_cutsets(circuit, delays, pair[0], pair[1])
    if gate not in cuts:
        raise ValueError(f"gate {gate!r} is not on any path {pair[0]} -> {pair[1]}")
    c = cuts[gate]
    return c.d_ig, c.d_gj, c.d_pg
