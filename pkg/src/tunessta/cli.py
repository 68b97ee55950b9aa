"""Command line front end.

    tunessta analyze --netlist c.bench [--config c.ini] --out DIR
    tunessta criticality | mc | sweep-range | discrete-bounds ...

Exit status is 0 on success, 1 for bad input and 2 when an internal
consistency check fails.  ``TUNESSTA_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import criticality, flow, reducer
from .mcoracle import run_circuit_mc
from .netlist import NetlistError, load_bench, load_config

log = logging.getLogger("tunessta")


@dataclass
class RunConfig:
    command: str
    netlist: Path
    config: Path | None
    out: Path
    samples: int | None = None
    seed: int | None = None
    prune_threshold: float | None = None
    range_multiplier: float | None = None
    discrete_steps: int = 8
    periods: list = field(default_factory=list)


def _positive(kind):
    def conv(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive: {text}")
        return v

    return conv


def _nonneg_float(text):
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative: {text}")
    return v


def _periods(text):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad period list: {text}") from None
    if any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("periods must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tunessta", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("analyze", "period and yield"),
        ("criticality", "edge and gate criticality"),
        ("mc", "Monte Carlo comparison"),
        ("sweep-range", "period versus tuning range"),
        ("discrete-bounds", "discrete tuning steps versus continuous"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--netlist", required=True, type=Path)
        s.add_argument("--config", type=Path, default=None)
        s.add_argument("--out", type=Path, default=Path("out"))
        s.add_argument("--samples", type=_positive(int), default=None)
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--prune-threshold", type=_positive(float), default=None)
        s.add_argument("--periods", type=_periods, default=[])
        s.add_argument("--range-multiplier", type=_nonneg_float, default=None)
        s.add_argument("--discrete-steps", type=_positive(int), default=8)
    return p


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _rows_csv(rows: list[dict], cols) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


class _Session:
    def __init__(self, rc: RunConfig):
        self.rc = rc
        self.circuit = load_bench(rc.netlist)
        cfg = load_config(rc.config)
        over = {}
        if rc.samples is not None:
            over["samples"] = rc.samples
        if rc.seed is not None:
            over["seed"] = rc.seed
        if rc.prune_threshold is not None:
            over["prune_threshold"] = rc.prune_threshold
        self.cfg = replace(cfg, **over)
        self.prep = flow.prepare(self.circuit, self.cfg, rc.range_multiplier)
        rc.out.mkdir(parents=True, exist_ok=True)

    def reduce(self):
        tm, hs, trace = reducer.compute_tm(self.prep.graph, self.cfg.prune_threshold)
        flow.check_tm(tm)
        return tm, hs, trace

    def header(self) -> dict:
        return {
            "circuit": self.circuit.name,
            "flipflops": len(self.circuit.flipflops),
            "gates": len(self.circuit.gates),
            "pairs": len(self.prep.pairs),
            "t_nominal": self.prep.t_nominal,
            "range": self.prep.range_value,
        }


def cmd_analyze(rc: RunConfig) -> dict:
    s = _Session(rc)
    tm, hs, trace = s.reduce()
    periods = rc.periods or flow.default_periods(tm)
    rep = s.header() | {
        "status": "unconstrained" if tm is None else "ok",
        "tm": flow.rv_dict(tm),
        "hold_slack": flow.rv_dict(hs),
        "hold_yield": 1.0 if hs is None else flow.sm.prob_leq(hs, 0.0),
        "yield": flow.yield_table(tm, hs, periods),
        "probabilistic_prunes": trace.probabilistic_prunes,
    }
    _dump(rc.out / "analyze.json", rep)
    (rc.out / "reduce_trace.csv").write_text(trace.to_csv())
    return rep


def _criticality(s: _Session):
    tm, hs, _ = s.reduce()
    rep = criticality.analyze(s.prep.circuit, s.prep.delays, s.prep.graph, tm, hs, s.cfg.prune_threshold)
    flow.check_report(rep)
    return tm, hs, rep


def cmd_criticality(rc: RunConfig) -> dict:
    s = _Session(rc)
    _, _, rep = _criticality(s)
    out = s.header() | rep.to_dict()
    _dump(rc.out / "criticality.json", out)
    (rc.out / "gates.csv").write_text(rep.gates_csv())
    (rc.out / "edges.csv").write_text(rep.edges_csv())
    return out


def cmd_mc(rc: RunConfig) -> dict:
    s = _Session(rc)
    t0 = time.perf_counter()
    tm, hs, rep = _criticality(s)
    t_ssta = time.perf_counter() - t0
    t0 = time.perf_counter()
    res = run_circuit_mc(s.prep.circuit, s.prep.delays, s.prep.graph, s.cfg.samples, s.cfg.seed)
    t_mc = time.perf_counter() - t0
    log.info("ssta %.3fs, mc %.3fs", t_ssta, t_mc)
    out = s.header() | {
        "ssta": {"tm": flow.rv_dict(tm), "hold_slack": flow.rv_dict(hs)},
        "mc": res.to_dict(),
        "comparison": res.compare(tm),
        "capture": [flow.capture_stats(res.gate_criticality, rep.gates, t) for t in (0.3, 0.1)],
    }
    _dump(rc.out / "mc.json", out)
    (rc.out / "mc_periods.csv").write_text(res.periods_csv())
    (rc.out / "runtime.json").write_text(json.dumps({"ssta_s": t_ssta, "mc_s": t_mc}, sort_keys=True) + "\n")
    return out


SWEEP = [k / 16 for k in range(0, 7)]


def cmd_sweep_range(rc: RunConfig) -> dict:
    s = _Session(rc)
    mults = SWEEP if rc.range_multiplier is None else sorted({0.0, rc.range_multiplier} | set(SWEEP))
    rows, sat = flow.sweep_ranges(s.circuit, s.cfg, mults, s.cfg.prune_threshold)
    cols = ["multiplier", "range", "tm_mean", "tm_std", "runtime_s", "saturated"]
    (rc.out / "sweep.csv").write_text(_rows_csv(rows, cols))
    out = s.header() | {
        "sweep": [{k: r[k] for k in cols if k != "runtime_s"} for r in rows],
        "saturated_at": sat,
    }
    _dump(rc.out / "sweep.json", out)
    return out


def cmd_discrete_bounds(rc: RunConfig) -> dict:
    s = _Session(rc)
    n = rc.samples if rc.samples is not None else 100
    res = flow.discrete_check(s.prep, n, rc.discrete_steps, s.cfg.seed)
    out = s.header() | res
    _dump(rc.out / "discrete.json", out)
    return out


COMMANDS = {
    "analyze": cmd_analyze,
    "criticality": cmd_criticality,
    "mc": cmd_mc,
    "sweep-range": cmd_sweep_range,
    "discrete-bounds": cmd_discrete_bounds,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("TUNESSTA_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    rc = RunConfig(
        command=args.command,
        netlist=args.netlist,
        config=args.config,
        out=args.out,
        samples=args.samples,
        seed=args.seed,
        prune_threshold=args.prune_threshold,
        range_multiplier=args.range_multiplier,
        discrete_steps=args.discrete_steps,
        periods=args.periods,
    )
    try:
        COMMANDS[rc.command](rc)
    except flow.InvariantError as exc:
        log.error("invariant violated: %s", exc)
        return 2
    except (NetlistError, configparser.Error, OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
