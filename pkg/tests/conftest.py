import itertools
import math
import random

import networkx as nx
import pytest

from tunessta import netlist
from tunessta import statmath as sm
from tunessta.congraph import ROOT, ConstraintGraph, graph_from_edges
from tunessta.statmath import CanonicalRV


def cycle_stats(n_nodes, edges):
    """(max ratio over cycles with k > 0, max weight over k = 0 cycles).

    Brute force over simple node cycles, expanding every choice of parallel
    edge.  ``edges`` holds (src, dst, w, k); missing values are None.
    """
    g = nx.DiGraph()
    g.add_nodes_from(range(n_nodes))
    par = {}
    for s, d, w, k in edges:
        g.add_edge(s, d)
        par.setdefault((s, d), []).append((w, k))
    best_ratio = None
    best_hold = None
    for cyc in nx.simple_cycles(g):
        hops = [(cyc[i], cyc[(i + 1) % len(cyc)]) for i in range(len(cyc))]
        for choice in itertools.product(*(par[h] for h in hops)):
            w = sum(c[0] for c in choice)
            k = sum(c[1] for c in choice)
            if k > 0:
                r = w / k
                best_ratio = r if best_ratio is None else max(best_ratio, r)
            else:
                best_hold = w if best_hold is None else max(best_hold, w)
    return best_ratio, best_hold


def graph_edges(graph: ConstraintGraph):
    """Numeric (src, dst, w, k) list of a deterministic constraint graph."""
    ids = {v: i for i, v in enumerate(sorted(graph.out))}
    return len(ids), [(ids[e.src], ids[e.dst], e.w.mean, e.k) for e in graph.edges.values()]


def random_spec(rng: random.Random, max_nodes=8, max_edges=20, hold_feasible=True):
    """(n_nodes, edges, ranges) of a random constraint graph with integer weights.

    About half the nodes get a tuning range.  With ``hold_feasible`` specs
    whose period-free cycles are positive are redrawn.
    """
    while True:
        n = rng.randint(2, max_nodes)
        ranged = {v: rng.randint(0, 4) for v in range(1, n) if rng.random() < 0.5}
        budget = max_edges - 2 * len(ranged)
        m = rng.randint(1, max(1, budget))
        edges = []
        for _ in range(m):
            s, d = rng.randrange(n), rng.randrange(n)
            k = 1 if rng.random() < 0.5 else 0
            w = rng.randint(-6, 10) if k else rng.randint(-10, 3)
            edges.append((s, d, w, k))
        if hold_feasible:
            _, hold = cycle_stats(*graph_edges(graph_from_edges(n, edges, ranged)))
            if hold is not None and hold > 0:
                continue
        return n, edges, ranged


def random_graph(rng: random.Random, max_nodes=8, max_edges=20, hold_feasible=True):
    return graph_from_edges(*random_spec(rng, max_nodes, max_edges, hold_feasible))


def statistical_graph(rng: random.Random, dims=4):
    """Random graph whose weights are canonical forms.

    Period-free edges sit two units below their integer draw so that no
    sample comes near a hold violation.
    """
    n, edges, ranged = random_spec(rng)
    out = []
    for s, d, w, k in edges:
        sens = [rng.gauss(0, 0.15) for _ in range(dims)]
        mean = float(w) if k else float(w) - 2.0
        out.append((s, d, CanonicalRV(mean, sens, abs(rng.gauss(0, 0.15))), k))
    return graph_from_edges(n, out, ranged)


def sampled_weights(graph: ConstraintGraph, np_rng, dims=None):
    """One joint draw: {edge id: number} plus the (pc, private) draws used."""
    if dims is None:
        dims = max((e.w.global_sens.shape[0] for e in graph.edges.values()), default=0)
    pc = np_rng.standard_normal(dims)
    private = {eid: float(np_rng.standard_normal()) for eid in sorted(graph.edges)}
    w = {eid: sm.sample(e.w, pc, private[eid]) for eid, e in graph.edges.items()}
    return w, pc, private


def with_weights(graph: ConstraintGraph, weights) -> ConstraintGraph:
    """Copy of ``graph`` whose edge ``e`` weighs ``weights[e.id]`` (a number)."""
    out = ConstraintGraph()
    for v in sorted(graph.out):
        if v != ROOT:
            nid = out.add_node(graph.names[v], graph.ranges.get(v))
            assert nid == v
    for e in sorted(graph.edges.values(), key=lambda e: e.id):
        out.add_edge(e.src, e.dst, CanonicalRV(float(weights[e.id])), e.k, e.kind, e.pair)
    return out


@pytest.fixture
def s27():
    return netlist.parse_bench(netlist.S27_BENCH, "s27")


@pytest.fixture
def no_variation():
    return netlist.VariationConfig(length_sigma=0.0, oxide_sigma=0.0, vth_sigma=0.0)


def chain_bench(with_d=True):
    """A -> B -> C with 6-unit stages and A -> D with an 8-unit stage (BUFF chains)."""
    lines = ["INPUT(IN)", "OUTPUT(OUT)", "A = DFF(IN)"]

    def chain(prefix, start, n):
        prev = start
        for i in range(n):
            lines.append(f"{prefix}{i} = BUFF({prev})")
            prev = f"{prefix}{i}"
        return prev

    lines.append(f"B = DFF({chain('ab', 'A', 6)})")
    lines.append(f"C = DFF({chain('bc', 'B', 6)})")
    if with_d:
        lines.append(f"D = DFF({chain('ad', 'A', 8)})")
    lines.append("OUT = BUFF(C)")
    return "\n".join(lines) + "\n"


def chain_config(ranged=("B", "D")):
    """Deterministic unit BUFF delays, zero setup/hold, only ``ranged`` tunable with range 3."""
    text = f"""
[variation]
length_sigma = 0
oxide_sigma = 0
vth_sigma = 0
[delays]
BUFF = 1.0
[flipflops]
setup = 0
hold = 0
io_paths = false
tuners = false
[tuners]
{chr(10).join(f"{f} = true" for f in ranged)}
[ranges]
{chr(10).join(f"{f} = 3" for f in ranged)}
"""
    return netlist.parse_config(text)


def rel(a, b):
    return abs(a - b) / abs(b) if b else abs(a)


def is_close(a, b, tol=1e-9):
    return math.isclose(a, b, rel_tol=tol, abs_tol=tol)


VERDICTS: list[str] = []  # acceptance lines, repeated in the terminal summary


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
