"""End-to-end pipeline shared by the CLI and the tests."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import combssta, congraph, criticality, mcoracle, reducer
from . import statmath as sm
from .netlist import AnalysisConfig, Circuit, apply_config, assign_delays
from .statmath import CanonicalRV


class InvariantError(RuntimeError):
    """An internal consistency check failed."""


@dataclass
class Prepared:
    circuit: Circuit  # with flip-flop attributes applied
    delays: dict
    pairs: list
    graph: congraph.ConstraintGraph
    t_nominal: float | None  # mean period with all ranges at zero
    range_value: float


def nominal_period(pairs) -> CanonicalRV | None:
    """Period form when no tuning is possible: max of all setup weights."""
    ws = [p.wbar for p in pairs]
    return sm.stat_max_all(ws) if ws else None


def prepare(
    circuit: Circuit,
    cfg: AnalysisConfig,
    range_multiplier: float | None = None,
    delays: dict | None = None,
    pairs: list | None = None,
) -> Prepared:
    if delays is None:
        delays = assign_delays(circuit, cfg.variation)
    base = apply_config(circuit, cfg, 0.0)
    if pairs is None:
        pairs = combssta.pairwise_delays(
            base, delays, cfg.io_paths, cfg.boundary_setup, cfg.boundary_hold
        )
    tn = nominal_period(pairs)
    t_nom = None if tn is None else tn.mean
    if cfg.range is not None and range_multiplier is None:
        rng = cfg.range
    else:
        mult = cfg.range_multiplier if range_multiplier is None else range_multiplier
        rng = mult * (t_nom if t_nom is not None else 0.0)
    full = apply_config(circuit, cfg, rng)
    graph = congraph.build_graph(pairs, full, cfg.boundary_setup, cfg.boundary_hold)
    return Prepared(full, delays, pairs, graph, t_nom, rng)


def rv_dict(x: CanonicalRV | None):
    return None if x is None else {"mean": x.mean, "std": x.std}


def default_periods(tm: CanonicalRV | None) -> list[float]:
    if tm is None:
        return []
    return [tm.mean + k * tm.std for k in (-2, -1, 0, 1, 2)]


def yield_table(tm, hold_slack, periods: Sequence[float]) -> list[dict]:
    hold_ok = 1.0 if hold_slack is None else sm.prob_leq(hold_slack, 0.0)
    rows = []
    for t in periods:
        y = 1.0 if tm is None else sm.prob_leq(tm, t)
        rows.append({"period": t, "setup_yield": y, "hold_yield": hold_ok})
    return rows


def check_tm(tm: CanonicalRV | None):
    if tm is not None and not (math.isfinite(tm.mean) and math.isfinite(tm.std)):
        raise InvariantError("period form is not finite")


def check_report(rep: criticality.CriticalityReport):
    for r in rep.edges:
        for key in ("c_e", "c_hold"):
            if not 0.0 <= r[key] <= 1.0:
                raise InvariantError(f"edge criticality out of range: {r}")
    for g, c in list(rep.gates.items()) + list(rep.gates_hold.items()):
        if not 0.0 <= c <= 1.0:
            raise InvariantError(f"gate criticality out of range: {g} {c}")


def capture_stats(mc_crit: dict, ssta_crit: dict, threshold: float) -> dict:
    """Gates MC finds above ``threshold``: how many the analysis also flags.

    ``e_c`` is the largest criticality gap among the missed ones.
    """
    hot = [g for g, c in mc_crit.items() if c > threshold]
    caught = [g for g in hot if ssta_crit.get(g, 0.0) > threshold]
    missed = [g for g in hot if ssta_crit.get(g, 0.0) <= threshold]
    e_c = max((abs(mc_crit[g] - ssta_crit.get(g, 0.0)) for g in missed), default=0.0)
    return {"threshold": threshold, "n_mc": len(hot), "n_c": len(caught), "n_m": len(missed), "e_c": e_c}


def sweep_ranges(circuit: Circuit, cfg: AnalysisConfig, multipliers: Sequence[float], prune_threshold: float):
    delays = assign_delays(circuit, cfg.variation)
    base = apply_config(circuit, cfg, 0.0)
    pairs = combssta.pairwise_delays(base, delays, cfg.io_paths, cfg.boundary_setup, cfg.boundary_hold)
    rows = []
    prev = None
    saturated_at = None
    for m in multipliers:
        t0 = time.perf_counter()
        prep = prepare(circuit, cfg, range_multiplier=m, delays=delays, pairs=pairs)
        tm, hs, _ = reducer.compute_tm(prep.graph, prune_threshold)
        dt = time.perf_counter() - t0
        mean = None if tm is None else tm.mean
        flag = False
        if saturated_at is None and prev is not None and mean is not None and prev:
            if abs(prev - mean) / abs(prev) < 1e-3:
                saturated_at = m
                flag = True
        rows.append(
            {
                "multiplier": m,
                "range": prep.range_value,
                "tm_mean": mean,
                "tm_std": None if tm is None else tm.std,
                "runtime_s": dt,
                "saturated": flag,
            }
        )
        prev = mean
    return rows, saturated_at


def discrete_check(prep: Prepared, n: int, steps: int, seed: int) -> dict:
    """Sample the constraint graph; compare continuous and discrete optimum."""
    g = prep.graph
    tun = sorted(g.ranges)
    if len(tun) > 4:
        raise ValueError(f"{len(tun)} tunable flip-flops; the exhaustive search allows at most 4")
    rng = np.random.default_rng(seed)
    top, es = mcoracle._Topology.of_graph(g)
    mu, sens, ind = mcoracle._weight_arrays(es)
    idx = {v: i for i, v in enumerate(sorted(g.out))}
    ranges = {idx[v]: g.ranges[v] for v in tun}
    thetas = [r / steps for r in ranges.values()]
    rows = []
    for _ in range(n):
        w = mu + sens @ rng.standard_normal(sens.shape[1]) + ind * rng.standard_normal(len(es))
        det = mcoracle.DetGraph(top.n, top.src, top.dst, w, top.k.astype(int), top.ids)
        tm = mcoracle.min_period_sample(det)
        setup = [(int(s), int(d), float(x)) for s, d, x, e in zip(top.src, top.dst, w, es) if e.k > 0]
        hold = [
            (int(s), int(d), float(x))
            for s, d, x, e in zip(top.src, top.dst, w, es)
            if e.k == 0 and e.kind == congraph.HOLD
        ]
        td = mcoracle.discrete_oracle(top.n, setup, hold, ranges, steps)
        rows.append((tm, td))
    theta = max(thetas, default=0.0)
    ok = sum(1 for tm, td in rows if tm - 1e-9 <= td <= tm + theta + 1e-9)
    fin = [(a, b) for a, b in rows if math.isfinite(a) and math.isfinite(b)]
    return {
        "samples": n,
        "steps": steps,
        "theta": theta,
        "bounds_hold": ok,
        "mean_tm": float(np.mean([a for a, _ in fin])) if fin else None,
        "mean_td": float(np.mean([b for _, b in fin])) if fin else None,
    }
