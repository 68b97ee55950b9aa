import itertools
import math
import random

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain_bench, chain_config, cycle_stats, graph_edges, random_spec
from tunessta import flow, netlist
from tunessta.congraph import graph_from_edges
from tunessta.mcoracle import (
    HOLD_FAIL,
    UNCONSTRAINED,
    DetGraph,
    critical_edges_sample,
    discrete_oracle,
    feasible_skews,
    min_period_sample,
    run_circuit_mc,
    run_mc,
    sample_graph,
)
from tunessta.reducer import compute_tm
from tunessta.statmath import CanonicalRV


def det_of(graph):
    n, edges = graph_edges(graph)
    return DetGraph.from_edges(n, edges)


# --- min_period_sample -------------------------------------------------------


def test_single_self_loop():
    assert min_period_sample(DetGraph.from_edges(2, [(1, 1, 9.0, 2)])) == pytest.approx(4.5, abs=1e-9)


def test_two_loops():
    det = DetGraph.from_edges(3, [(1, 1, 9.0, 2), (2, 2, 6.0, 1)])
    assert min_period_sample(det) == pytest.approx(6.0, abs=1e-9)


def test_chain_example():
    c = netlist.parse_bench(chain_bench(with_d=False))
    prep = flow.prepare(c, chain_config(ranged=("B",)))
    assert min_period_sample(det_of(prep.graph)) == pytest.approx(6.0, abs=1e-9)


def test_sentinels():
    assert min_period_sample(DetGraph.from_edges(2, [(0, 1, 1.0, 0)])) == UNCONSTRAINED
    assert min_period_sample(DetGraph.from_edges(2, [(0, 1, 1.0, 0), (1, 0, 0.5, 0), (1, 1, 3, 1)])) == HOLD_FAIL


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_matches_cycle_enumeration(seed):
    g = graph_from_edges(*random_spec(random.Random(seed), hold_feasible=False))
    n, edges = graph_edges(g)
    ratio, hold = cycle_stats(n, edges)
    got = min_period_sample(DetGraph.from_edges(n, edges))
    if hold is not None and hold > 0:
        assert got == HOLD_FAIL
    elif ratio is None:
        assert got == UNCONSTRAINED
    else:
        assert got == pytest.approx(ratio, abs=1e-8)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_feasibility_witness(seed):
    n, edges = graph_edges(graph_from_edges(*random_spec(random.Random(seed))))
    det = DetGraph.from_edges(n, edges)
    t = min_period_sample(det)
    if not math.isfinite(t):
        return
    x = feasible_skews(det, t + 1e-6)
    assert x is not None and x[0] == 0
    for s, d, w, k in edges:
        assert x[d] - x[s] >= w - k * (t + 1e-6) - 1e-7
    assert feasible_skews(det, t - 1e-3) is None


# --- critical edges -------------------------------------------------------------


def test_single_binding_loop():
    det = DetGraph.from_edges(3, [(1, 2, 4.0, 1), (2, 1, 2.0, 0), (0, 1, -5.0, 0)])
    assert critical_edges_sample(det, min_period_sample(det)) == {0, 1}


def test_only_the_binding_loop():
    det = DetGraph.from_edges(3, [(1, 2, 4.0, 1), (2, 1, 2.0, 0), (1, 1, 9.0, 2)])
    t = min_period_sample(det)
    assert t == pytest.approx(6.0)
    assert critical_edges_sample(det, t) == {0, 1}


def test_tied_loops():
    det = DetGraph.from_edges(3, [(1, 2, 4.0, 1), (2, 1, 2.0, 0), (1, 1, 12.0, 2)])
    assert critical_edges_sample(det, min_period_sample(det)) == {0, 1, 2}


def tight_cycle_edges(n, edges, t):
    """Edges on a simple cycle whose reduced weight w - kT vanishes (brute force)."""
    g = nx.DiGraph()
    par = {}
    for idx, (s, d, w, k) in enumerate(edges):
        g.add_edge(s, d)
        par.setdefault((s, d), []).append(idx)
    out = set()
    for cyc in nx.simple_cycles(g):
        hops = [(cyc[i], cyc[(i + 1) % len(cyc)]) for i in range(len(cyc))]
        for choice in itertools.product(*(par[h] for h in hops)):
            red = sum(edges[i][2] - edges[i][3] * t for i in choice)
            if abs(red) <= 1e-7:
                out.update(choice)
    return out


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_critical_edges_match_enumeration(seed):
    n, edges = graph_edges(graph_from_edges(*random_spec(random.Random(seed))))
    _, hold = cycle_stats(n, edges)
    if hold is not None and hold > -1e-9:
        return  # a zero-weight period-free loop joins tight components
    det = DetGraph.from_edges(n, edges)
    t = min_period_sample(det)
    if not math.isfinite(t):
        assert critical_edges_sample(det, t) == set()
        return
    assert critical_edges_sample(det, t) == tight_cycle_edges(n, edges, t)


# --- sampling -----------------------------------------------------------------------


def test_deterministic_graph_samples_unchanged():
    g = graph_from_edges(3, [(1, 2, 3.0, 1), (2, 1, -1.0, 0)], ranges={1: 2})
    base = det_of(g)
    rng = np.random.default_rng(0)
    for _ in range(5):
        d = sample_graph(g, rng.standard_normal(3), {})
        assert np.array_equal(np.sort(d.w), np.sort(base.w))


def test_sample_mean():
    g = graph_from_edges(2, [(0, 1, CanonicalRV(5.0, indep_sigma=1.0), 1)])
    (eid,) = g.edges
    rng = np.random.default_rng(1)
    vals = [sample_graph(g, [], {eid: rng.standard_normal()}).w[0] for _ in range(10000)]
    assert np.mean(vals) == pytest.approx(5.0, abs=0.05)


def test_sample_correlation():
    a = CanonicalRV(1.0, [0.8], 0.6)
    b = CanonicalRV(2.0, [0.6], 0.8)
    g = graph_from_edges(3, [(0, 1, a, 1), (1, 2, b, 1)])
    ids = sorted(g.edges)
    rng = np.random.default_rng(2)
    rows = []
    for _ in range(10000):
        d = sample_graph(g, rng.standard_normal(1), {i: rng.standard_normal() for i in ids})
        rows.append([d.w[list(d.ids).index(i)] for i in ids])
    r = np.corrcoef(np.array(rows).T)[0, 1]
    assert r == pytest.approx(0.8 * 0.6, abs=0.05)


def test_sample_missing_private_draw():
    g = graph_from_edges(2, [(0, 1, CanonicalRV(5.0, indep_sigma=1.0), 1)])
    with pytest.raises(KeyError):
        sample_graph(g, [], {})


# --- run_mc -------------------------------------------------------------------------


def test_deterministic_run_mc():
    g = graph_from_edges(3, [(1, 2, 4.0, 1), (2, 1, -2.0, 0)], ranges={1: 1, 2: 1})
    tm, _, _ = compute_tm(g)
    res = run_mc(g, 50, seed=3)
    assert res.std == 0.0
    assert res.mean == pytest.approx(tm.mean, abs=1e-8)


def test_deterministic_circuit_mc():
    c = netlist.parse_bench(chain_bench())
    prep = flow.prepare(c, chain_config())
    res = run_circuit_mc(prep.circuit, prep.delays, prep.graph, 20, seed=1)
    assert res.std == 0.0
    assert res.mean == pytest.approx(6.0, abs=1e-9)


def test_single_sample():
    g = graph_from_edges(2, [(1, 1, CanonicalRV(5.0, [1.0], 0.5), 1)])
    res = run_mc(g, 1, seed=4)
    assert res.n_samples == 1 and res.periods.size == 1
    assert res.mean == res.periods[0]
    assert res.std == 0.0


def test_run_mc_rejects_zero():
    g = graph_from_edges(2, [(1, 1, 1.0, 1)])
    with pytest.raises(ValueError):
        run_mc(g, 0)


def test_run_mc_reproducible_and_chunk_free():
    g = graph_from_edges(3, [(1, 2, CanonicalRV(4.0, [0.3], 0.2), 1), (2, 1, CanonicalRV(1.0, [0.1], 0.3), 1)])
    a = run_mc(g, 2500, seed=9, chunk=1000)
    b = run_mc(g, 2500, seed=9, chunk=1000)
    assert np.array_equal(a.periods, b.periods)
    assert all(0.0 <= v <= 1.0 for v in a.edge_criticality.values())


def test_yield_monotone():
    g = graph_from_edges(3, [(1, 2, CanonicalRV(4.0, [0.5], 0.5), 1), (2, 1, CanonicalRV(1.0, [0.2], 0.4), 1)])
    res = run_mc(g, 2000, seed=5)
    ts = np.linspace(res.periods.min() - 1, res.periods.max() + 1, 200)
    ys = [res.yield_at(t) for t in ts]
    assert all(b >= a for a, b in zip(ys, ys[1:]))
    assert ys[0] == 0.0 and ys[-1] == 1.0


def test_hold_failures_excluded():
    w = CanonicalRV(0.0, indep_sigma=1.0)
    g = graph_from_edges(2, [(0, 1, w, 0), (1, 0, 0.0, 0), (1, 1, 2.0, 1)])
    res = run_mc(g, 2000, seed=6)
    assert 0 < res.n_hold_fail < 2000
    assert res.periods.size + res.n_hold_fail == 2000
    assert res.yield_at(100.0) == pytest.approx(res.periods.size / 2000)


def test_compare_metrics():
    g = graph_from_edges(2, [(1, 1, CanonicalRV(10.0, [1.0]), 1)])
    res = run_mc(g, 10000, seed=7)
    cmp = res.compare(CanonicalRV(10.0, [1.0]))
    assert cmp["e_mu"] < 0.005 and cmp["e_sigma"] < 0.03 and cmp["e_t2sigma"] < 0.01
    assert res.to_dict()["n_valid"] == 10000
    assert res.periods_csv().splitlines()[0] == "sample,period"


# --- discrete oracle ----------------------------------------------------------------


def test_discrete_on_grid():
    # continuous optimum x_1 = 2 sits on the grid {0, 1, ..., 4}
    setup = [(0, 1, 8.0), (1, 0, 4.0)]
    assert discrete_oracle(2, setup, [], {1: 4.0}, steps=4) == pytest.approx(6.0)


def test_discrete_off_grid():
    setup = [(0, 1, 8.5), (1, 0, 3.5)]  # continuous optimum x_1 = 2.5, T_m = 6
    t_d = discrete_oracle(2, setup, [], {1: 4.0}, steps=4)
    assert 6.0 <= t_d <= 7.0
    assert t_d == pytest.approx(6.5)


def test_discrete_hold_infeasible():
    assert discrete_oracle(2, [(0, 1, 1.0)], [(0, 1, 1.0)], {1: 0.5}, steps=2) == math.inf


def test_discrete_size_guard():
    ranges = {v: 1.0 for v in range(1, 8)}
    with pytest.raises(ValueError):
        discrete_oracle(8, [], [], ranges, steps=8)


def test_discrete_bounds_random():
    rng = random.Random(11)
    for _ in range(30):
        n = rng.randint(2, 4)
        ranges = {v: float(rng.randint(1, 4)) for v in range(1, n)}
        setup = [(rng.randrange(n), rng.randrange(n), float(rng.randint(1, 9))) for _ in range(rng.randint(1, 5))]
        g = graph_from_edges(n, [(i, j, w, 1) for i, j, w in setup], ranges)
        t_m = min_period_sample(det_of(g))
        theta = max(ranges.values()) / 8
        t_d = discrete_oracle(n, setup, [], ranges, steps=8)
        assert t_m - 1e-9 <= t_d <= t_m + theta + 1e-9
