"""Monte Carlo reference: exact per-sample minimum period and critical edges.

For one joint sample every edge weight is a number, and the minimum clock
period is the largest ratio (sum w)/(sum k) over cycles.  It is found here by
bisection on T, testing each T for a positive cycle with Bellman-Ford.  The
sweeps are vectorised over samples.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import statmath as sm
from .combssta import BOUNDARY, sink_nets, source_nets
from .congraph import HOLD, ROOT, SETUP, ConstraintGraph
from .netlist import Circuit
from .statmath import CanonicalRV

UNCONSTRAINED = -math.inf  # no cycle carries a period term
HOLD_FAIL = math.inf  # a period-free cycle is positive: no period works

TOL = 1e-9
MAX_ITER = 200
TIGHT_TOL = 1e-7


@dataclass(frozen=True)
class DetGraph:
    """Constraint graph with numeric weights (one sample)."""

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    w: np.ndarray
    k: np.ndarray
    ids: np.ndarray

    @classmethod
    def from_edges(cls, n_nodes: int, edges: Iterable[tuple[int, int, float, int]]) -> "DetGraph":
        edges = list(edges)
        src = np.array([e[0] for e in edges], dtype=int)
        dst = np.array([e[1] for e in edges], dtype=int)
        w = np.array([e[2] for e in edges], dtype=float)
        k = np.array([e[3] for e in edges], dtype=int)
        return cls(n_nodes, src, dst, w, k, np.arange(len(edges)))


class _Topology:
    """Edge arrays of a constraint graph with nodes renumbered 0..n-1."""

    def __init__(self, n_nodes, src, dst, k, ids):
        self.n = int(n_nodes)
        self.src = np.asarray(src, dtype=int)
        self.dst = np.asarray(dst, dtype=int)
        self.k = np.asarray(k, dtype=float)
        self.ids = np.asarray(ids)
        order = np.argsort(self.dst, kind="stable")
        self.order = order
        sd = self.dst[order]
        self.starts = np.flatnonzero(np.r_[True, sd[1:] != sd[:-1]]) if sd.size else np.zeros(0, int)
        self.targets = sd[self.starts] if sd.size else np.zeros(0, int)

    @classmethod
    def of_graph(cls, graph: ConstraintGraph):
        nodes = sorted(graph.out)
        index = {v: i for i, v in enumerate(nodes)}
        es = sorted(graph.edges.values(), key=lambda e: e.id)
        return cls(
            len(nodes),
            [index[e.src] for e in es],
            [index[e.dst] for e in es],
            [e.k for e in es],
            [e.id for e in es],
        ), es

    def relax(self, dist: np.ndarray, wt: np.ndarray) -> np.ndarray:
        """One Bellman-Ford sweep of longest distances for a batch of samples."""
        if self.src.size == 0:
            return dist
        cand = dist[:, self.src] + wt
        cand = cand[:, self.order]
        best = np.maximum.reduceat(cand, self.starts, axis=1)
        out = dist.copy()
        out[:, self.targets] = np.maximum(dist[:, self.targets], best)
        return out


def _settled(top: _Topology, wt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Longest distances from a virtual source; flags samples with a positive cycle."""
    s = wt.shape[0]
    dist = np.zeros((s, top.n))
    active = np.arange(s)
    positive = np.zeros(s, dtype=bool)
    scale = 1e-12 * (1.0 + np.abs(wt).sum(axis=1))
    for _ in range(top.n + 1):
        if active.size == 0:
            break
        d = dist[active]
        nd = top.relax(d, wt[active])
        changed = np.any(nd > d + scale[active, None], axis=1)
        dist[active] = nd
        active = active[changed]
    positive[active] = True
    return dist, positive


def _bisect(top: _Topology, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample minimum period (rows of ``w``) and the feasible upper T used."""
    s = w.shape[0]
    span = np.abs(w).sum(axis=1) + 1.0
    lo = -span.copy()
    hi = span.copy()
    result = np.empty(s)
    # hold failure: infeasible even for a huge period
    _, bad = _settled(top, w - hi[:, None] * top.k[None, :])
    # unconstrained: feasible at the lower end
    _, pos_lo = _settled(top, w - lo[:, None] * top.k[None, :])
    free = ~pos_lo & ~bad
    result[bad] = HOLD_FAIL
    result[free] = UNCONSTRAINED
    live = np.flatnonzero(~bad & ~free)
    for _ in range(MAX_ITER):
        if live.size == 0:
            break
        mid = 0.5 * (lo[live] + hi[live])
        _, pos = _settled(top, w[live] - mid[:, None] * top.k[None, :])
        hi[live[~pos]] = mid[~pos]
        lo[live[pos]] = mid[pos]
        live = live[(hi[live] - lo[live]) > TOL]
    done = ~bad & ~free
    result[done] = hi[done]
    return result, hi


def _critical_mask(top: _Topology, w: np.ndarray, t_hi: np.ndarray) -> np.ndarray:
    """Edges on a cycle of tight edges that carries a period term, per sample."""
    s = w.shape[0]
    mask = np.zeros((s, top.src.size), dtype=bool)
    ok = np.isfinite(t_hi)
    if not ok.any() or top.src.size == 0:
        return mask
    rows = np.flatnonzero(ok)
    wt = w[rows] - t_hi[rows, None] * top.k[None, :]
    dist, _ = _settled(top, wt)
    scale = TIGHT_TOL * (1.0 + np.abs(w[rows]).max(axis=1))
    slack = dist[:, top.dst] - dist[:, top.src] - wt
    tight = slack <= scale[:, None]
    for r, row in enumerate(rows):
        t = np.flatnonzero(tight[r])
        if t.size == 0:
            continue
        a = coo_matrix((np.ones(t.size), (top.src[t], top.dst[t])), shape=(top.n, top.n))
        _, lab = connected_components(a, directed=True, connection="strong")
        same = lab[top.src[t]] == lab[top.dst[t]]
        cyc = t[same]
        # keep only components that contain a period-carrying edge
        comps_with_k = set(lab[top.src[cyc[top.k[cyc] > 0]]].tolist())
        keep = np.array([lab[top.src[e]] in comps_with_k for e in cyc], dtype=bool)
        mask[row, cyc[keep]] = True
    return mask


# --- single-sample API ------------------------------------------------------


def _det_topology(det: DetGraph) -> _Topology:
    return _Topology(det.n_nodes, det.src, det.dst, det.k, det.ids)


def min_period_sample(det: DetGraph) -> float:
    """Largest cycle ratio of ``det``; ``-inf`` if unconstrained, ``inf`` on hold failure."""
    top = _det_topology(det)
    t, _ = _bisect(top, det.w[None, :])
    return float(t[0])


def critical_edges_sample(det: DetGraph, t_star: float) -> set:
    """Ids of edges on a cycle that is tight at ``t_star``."""
    if not math.isfinite(t_star):
        return set()
    top = _det_topology(det)
    mask = _critical_mask(top, det.w[None, :], np.array([t_star + TOL]))
    return set(det.ids[mask[0]].tolist())


def feasible_skews(det: DetGraph, period: float) -> np.ndarray | None:
    """Skew assignment meeting every constraint at ``period``, or None."""
    top = _det_topology(det)
    dist, pos = _settled(top, (det.w - period * det.k)[None, :])
    if pos[0]:
        return None
    return dist[0] - dist[0][ROOT]


# --- sampling a statistical constraint graph --------------------------------


def sample_graph(graph: ConstraintGraph, pc_draws, private_draws: Mapping[int, float]) -> DetGraph:
    """Evaluate every edge weight at one joint sample point.

    ``private_draws`` maps edge id to the draw of that edge's private term.
    """
    top, es = _Topology.of_graph(graph)
    w = []
    for e in es:
        if e.w.indep_sigma > 0.0 and e.id not in private_draws:
            raise KeyError(f"missing private draw for edge {e.id}")
        w.append(sm.sample(e.w, pc_draws, private_draws.get(e.id, 0.0)))
    return DetGraph(top.n, top.src, top.dst, np.array(w, dtype=float), top.k.astype(int), top.ids)


def _weight_arrays(es) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dims = max((e.w.global_sens.shape[0] for e in es), default=0)
    mu = np.array([e.w.mean for e in es])
    sens = np.zeros((len(es), dims))
    for r, e in enumerate(es):
        sens[r, : e.w.global_sens.shape[0]] = e.w.global_sens
    ind = np.array([e.w.indep_sigma for e in es])
    return mu, sens, ind


def _chunks(n: int, size: int) -> list[tuple[int, int]]:
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def _chunk_rng(seed: int, index: int) -> np.random.Generator:
    # one child stream per fixed-size chunk: results do not depend on workers
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


# --- results ----------------------------------------------------------------


@dataclass
class McResult:
    n_samples: int
    periods: np.ndarray  # finite per-sample minimum periods
    n_hold_fail: int = 0
    n_unconstrained: int = 0
    edge_criticality: dict = field(default_factory=dict)  # edge id -> frequency
    gate_criticality: dict = field(default_factory=dict)  # gate id -> frequency

    @property
    def mean(self) -> float:
        return float(np.mean(self.periods)) if self.periods.size else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.periods, ddof=1)) if self.periods.size > 1 else 0.0

    def yield_at(self, period: float) -> float:
        """Fraction of all samples that work at ``period``."""
        ok = np.count_nonzero(self.periods <= period) + self.n_unconstrained
        return ok / self.n_samples if self.n_samples else math.nan

    def compare(self, tm: CanonicalRV | None) -> dict:
        """Relative errors of an analytic period form against these samples."""
        if tm is None or not self.periods.size:
            return {}
        mu, sd = self.mean, self.std
        t2 = mu + 2.0 * sd
        y_mc = float(np.mean(self.periods <= t2))
        y_ssta = sm.prob_leq(tm, t2)
        return {
            "e_mu": abs(tm.mean - mu) / abs(mu) if mu else math.nan,
            "e_sigma": abs(tm.std - sd) / sd if sd else (0.0 if tm.std == 0 else math.inf),
            "e_t2sigma": abs(y_ssta - y_mc) / y_mc if y_mc else math.nan,
            "t2sigma": t2,
            "yield_mc": y_mc,
            "yield_ssta": y_ssta,
        }

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_valid": int(self.periods.size),
            "n_hold_fail": self.n_hold_fail,
            "n_unconstrained": self.n_unconstrained,
            "mean": self.mean,
            "std": self.std,
            "edge_criticality": {str(k): v for k, v in sorted(self.edge_criticality.items(), key=lambda kv: str(kv[0]))},
            "gate_criticality": dict(sorted(self.gate_criticality.items())),
        }

    def to_json(self, extra: Mapping | None = None) -> str:
        d = self.to_dict()
        if extra:
            d.update(extra)
        return json.dumps(d, sort_keys=True, indent=2)

    def periods_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["sample", "period"])
        for i, t in enumerate(self.periods):
            wr.writerow([i, repr(float(t))])
        return buf.getvalue()


def _finish(n: int, t: np.ndarray, crit_counts: np.ndarray | None, ids, gate_counts=None) -> McResult:
    fin = np.isfinite(t)
    valid = int(np.count_nonzero(fin))
    res = McResult(
        n_samples=n,
        periods=t[fin],
        n_hold_fail=int(np.count_nonzero(t == HOLD_FAIL)),
        n_unconstrained=int(np.count_nonzero(t == UNCONSTRAINED)),
    )
    if crit_counts is not None and valid:
        res.edge_criticality = {i: float(c) / valid for i, c in zip(ids, crit_counts)}
    if gate_counts is not None and valid:
        res.gate_criticality = {g: float(c) / valid for g, c in gate_counts.items()}
    return res


def run_mc(
    graph: ConstraintGraph,
    n: int,
    seed: int = 0,
    criticality: bool = True,
    chunk: int = 1000,
) -> McResult:
    """Sample edge weights of a statistical constraint graph directly."""
    if n < 1:
        raise ValueError("n must be >= 1")
    top, es = _Topology.of_graph(graph)
    mu, sens, ind = _weight_arrays(es)
    ts = []
    counts = np.zeros(len(es))
    for c, (a, b) in enumerate(_chunks(n, chunk)):
        rng = _chunk_rng(seed, c)
        m = b - a
        z = rng.standard_normal((m, sens.shape[1]))
        r = rng.standard_normal((m, len(es)))
        w = mu[None, :] + z @ sens.T + r * ind[None, :]
        t, hi = _bisect(top, w)
        ts.append(t)
        if criticality:
            counts += _critical_mask(top, w, np.where(np.isfinite(t), hi, np.nan)).sum(axis=0)
    t = np.concatenate(ts)
    return _finish(n, t, counts if criticality else None, [e.id for e in es])


# --- gate-level sampling ----------------------------------------------------


class _SampledTiming:
    """Per-sample gate delays and longest/shortest path sweeps over them."""

    def __init__(self, circuit: Circuit, gate_delay: Mapping[str, np.ndarray]):
        self.c = circuit
        self.d = gate_delay
        self.m = next(iter(gate_delay.values())).shape[0] if gate_delay else 0

    def forward(self, starts: Sequence[str], use_min: bool = False, keep=None) -> dict[str, np.ndarray]:
        red = np.minimum if use_min else np.maximum
        arr = {n: np.zeros(self.m) for n in starts}
        for gid in self.c.order:
            vals = [arr[f] for f in self.c.gates[gid].fanins if f in arr]
            if not vals:
                continue
            acc = vals[0]
            for v in vals[1:]:
                acc = red(acc, v)
            arr[gid] = acc + self.d[gid]
        if keep is not None:
            return {n: arr[n] for n in keep if n in arr}
        return arr

    def backward(self, ends: Sequence[str], use_min: bool = False) -> dict[str, np.ndarray]:
        red = np.minimum if use_min else np.maximum
        dep = {n: np.zeros(self.m) for n in ends}
        for gid in reversed(self.c.order):
            if gid not in dep:
                continue
            through = dep[gid] + self.d[gid]
            for f in self.c.gates[gid].fanins:
                dep[f] = through if f not in dep else red(dep[f], through)
        return dep


def sample_gate_delays(delays, rng: np.random.Generator, m: int) -> dict[str, np.ndarray]:
    """Joint samples of every gate delay: shared components plus a private draw."""
    gids = list(delays)
    if not gids:
        return {}
    dims = max(delays[g][0].global_sens.shape[0] for g in gids)
    z = rng.standard_normal((m, dims))
    r = rng.standard_normal((m, len(gids)))
    out = {}
    for col, g in enumerate(gids):
        rv = delays[g][0]
        s = np.zeros(dims)
        s[: rv.global_sens.shape[0]] = rv.global_sens
        out[g] = rv.mean + z @ s + rv.indep_sigma * r[:, col]
    return out


def run_circuit_mc(
    circuit: Circuit,
    delays,
    graph: ConstraintGraph,
    n: int,
    seed: int = 0,
    chunk: int = 1000,
    gate_crit: bool = True,
) -> McResult:
    """Sample gate delays, re-time every flip-flop pair, and solve each sample.

    ``graph`` must come from :func:`congraph.build_graph` on ``circuit``; its
    original edges tell which pair and which constraint each edge encodes.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    top, es = _Topology.of_graph(graph)
    pairs = sorted({e.pair for e in es if e.kind in (SETUP, HOLD)})
    sources = sorted({p[0] for p in pairs})
    counts = np.zeros(len(es))
    gate_counts: dict[str, int] = {}
    ts = []
    for c, (a, b) in enumerate(_chunks(n, chunk)):
        rng = _chunk_rng(seed, c)
        m = b - a
        st = _SampledTiming(circuit, sample_gate_delays(delays, rng, m))
        dmax: dict[tuple[str, str], np.ndarray] = {}
        dmin: dict[tuple[str, str], np.ndarray] = {}
        sinks_of: dict[str, list[str]] = {}
        for p in pairs:
            sinks_of.setdefault(p[0], []).append(p[1])
        for s in sources:
            keep = {n_ for j in sinks_of[s] for n_ in sink_nets(circuit, j)}
            hi = st.forward(source_nets(circuit, s), keep=keep)
            lo = st.forward(source_nets(circuit, s), use_min=True, keep=keep)
            for j in sinks_of[s]:
                nets = [x for x in sink_nets(circuit, j) if x in hi]
                dmax[(s, j)] = np.max([hi[x] for x in nets], axis=0)
                dmin[(s, j)] = np.min([lo[x] for x in nets], axis=0)
        w = np.empty((m, len(es)))
        for col, e in enumerate(es):
            if e.kind == SETUP:
                setup = circuit.flipflops[e.pair[1]].setup if e.pair[1] != BOUNDARY else _boundary(graph, "setup")
                w[:, col] = dmax[e.pair] + setup
            elif e.kind == HOLD:
                hold = circuit.flipflops[e.pair[1]].hold if e.pair[1] != BOUNDARY else _boundary(graph, "hold")
                w[:, col] = hold - dmin[e.pair]
            else:
                w[:, col] = e.w.mean
        t, hi_t = _bisect(top, w)
        ts.append(t)
        mask = _critical_mask(top, w, np.where(np.isfinite(t), hi_t, np.nan))
        counts += mask.sum(axis=0)
        if gate_crit:
            _count_gates(circuit, st, es, mask, dmax, dmin, gate_counts)
    t = np.concatenate(ts)
    return _finish(n, t, counts, [e.id for e in es], gate_counts if gate_crit else None)


def _boundary(graph: ConstraintGraph, which: str) -> float:
    return float(graph.boundary[which])


def _count_gates(circuit, st: _SampledTiming, es, mask, dmax, dmin, gate_counts):
    """Gates on a longest (setup) or shortest (hold) path of a critical edge."""
    m = mask.shape[0]
    hit = {g: np.zeros(m, dtype=bool) for g in circuit.order}
    fwd_cache: dict = {}
    bwd_cache: dict = {}
    for col, e in enumerate(es):
        rows = mask[:, col]
        if e.kind not in (SETUP, HOLD) or not rows.any():
            continue
        use_min = e.kind == HOLD
        i, j = e.pair
        key_f = (i, use_min)
        if key_f not in fwd_cache:
            fwd_cache[key_f] = st.forward(source_nets(circuit, i), use_min=use_min)
        key_b = (j, use_min)
        if key_b not in bwd_cache:
            bwd_cache[key_b] = st.backward(sink_nets(circuit, j), use_min=use_min)
        fa, bd = fwd_cache[key_f], bwd_cache[key_b]
        ref = dmin[e.pair] if use_min else dmax[e.pair]
        tol = TIGHT_TOL * (1.0 + np.abs(ref))
        for g in circuit.order:
            if g in fa and g in bd:
                on = np.abs(fa[g] + bd[g] - ref) <= tol
                hit[g] |= on & rows
    for g, h in hit.items():
        cnt = int(np.count_nonzero(h))
        if cnt:
            gate_counts[g] = gate_counts.get(g, 0) + cnt


# --- discrete tuning --------------------------------------------------------


def discrete_oracle(
    n_nodes: int,
    setup: Sequence[tuple[int, int, float]],
    hold: Sequence[tuple[int, int, float]],
    ranges: Mapping[int, float],
    steps: int = 8,
    limit: int = 10 ** 6,
) -> float:
    """Best period when each tuner takes one of ``steps + 1`` grid values.

    ``setup`` holds (i, j, w) for ``x_j - x_i >= w - T``; ``hold`` holds
    (j, i, w) for ``x_i - x_j >= w``.  Node 0 is fixed at skew 0.  Returns
    ``inf`` when no assignment meets every hold constraint.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    tunable = sorted(v for v in range(1, n_nodes) if v in ranges)
    size = (steps + 1) ** len(tunable)
    if size > limit:
        raise ValueError(f"{size} assignments exceed the search limit {limit}")
    grids = [np.linspace(0.0, ranges[v], steps + 1) for v in tunable]
    best = math.inf
    x = np.zeros(n_nodes)
    for combo in itertools.product(*grids):
        x[tunable] = combo
        if any(x[i] - x[j] < wv - 1e-12 for j, i, wv in hold):
            continue
        t = max((wv - x[j] + x[i] for i, j, wv in setup), default=-math.inf)
        best = min(best, t)
    return best
