"""Bench netlists, flip-flop attributes and canonical gate delays."""

from __future__ import annotations

import configparser
import dataclasses
import graphlib
import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .statmath import CanonicalRV

DEFAULT_NOMINAL = {
    "NOT": 1.0,
    "BUFF": 1.0,
    "NAND": 1.2,
    "NOR": 1.4,
    "AND": 1.6,
    "OR": 1.8,
    "XOR": 2.2,
    "XNOR": 2.2,
}

_KIND_ALIASES = {"BUF": "BUFF", "INV": "NOT"}

_RE_IO = re.compile(r"^(INPUT|OUTPUT)\s*\(\s*([^\s()]+)\s*\)$", re.IGNORECASE)
_RE_GATE = re.compile(r"^([^\s=()]+)\s*=\s*([A-Za-z_][A-Za-z0-9_]*)\s*\(([^()]*)\)$")


class NetlistError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Gate:
    id: str
    kind: str
    fanins: tuple[str, ...]
    fanouts: tuple[str, ...] = ()


@dataclass(frozen=True)
class FlipFlop:
    id: str  # the data-out net
    d_net: str
    setup: float = 0.0
    hold: float = 0.0
    has_tuner: bool = True
    range: float = 0.0


@dataclass(frozen=True)
class Circuit:
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    gates: Mapping[str, Gate]
    flipflops: Mapping[str, FlipFlop]
    order: tuple[str, ...]  # gates in topological order
    name: str = ""

    @property
    def ff_ids(self) -> list[str]:
        return list(self.flipflops)

    def fanout_of(self, net: str) -> tuple[str, ...]:
        return self._fanout.get(net, ())

    @property
    def _fanout(self) -> dict[str, tuple[str, ...]]:
        cached = self.__dict__.get("_fanout_cache")
        if cached is None:
            fo: dict[str, list[str]] = {}
            for gid in self.order:
                for f in self.gates[gid].fanins:
                    fo.setdefault(f, []).append(gid)
            cached = {k: tuple(v) for k, v in fo.items()}
            object.__setattr__(self, "_fanout_cache", cached)
        return cached

    def with_ff_attributes(
        self,
        setup: float | Mapping[str, float] | None = None,
        hold: float | Mapping[str, float] | None = None,
        has_tuner: bool | Mapping[str, bool] | None = None,
        ranges: float | Mapping[str, float] | None = None,
    ) -> "Circuit":
        """Return a copy with flip-flop attributes replaced.

        Each argument is either a scalar applied to every flip-flop or a
        mapping of per-flip-flop overrides.
        """

        def pick(value, ff_id, current):
            if value is None:
                return current
            if isinstance(value, Mapping):
                return value.get(ff_id, current)
            return value

        ffs = {}
        for fid, ff in self.flipflops.items():
            new = dataclasses.replace(
                ff,
                setup=float(pick(setup, fid, ff.setup)),
                hold=float(pick(hold, fid, ff.hold)),
                has_tuner=bool(pick(has_tuner, fid, ff.has_tuner)),
                range=float(pick(ranges, fid, ff.range)),
            )
            if new.setup < 0 or new.hold < 0 or new.range < 0:
                raise NetlistError(f"negative setup/hold/range on flip-flop {fid}")
            ffs[fid] = new
        return dataclasses.replace(self, flipflops=ffs)


def _normalize_kind(kind: str) -> str:
    k = kind.upper()
    return _KIND_ALIASES.get(k, k)


def parse_bench(text: str, name: str = "") -> Circuit:
    inputs: list[str] = []
    outputs: list[tuple[str, int]] = []
    defs: dict[str, int] = {}
    gate_rows: list[tuple[str, str, tuple[str, ...], int]] = []
    ffs: dict[str, FlipFlop] = {}

    def define(net: str, lineno: int):
        if net in defs:
            raise NetlistError(f"net {net!r} defined twice (first on line {defs[net]})", lineno)
        defs[net] = lineno

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _RE_IO.match(line)
        if m:
            kw, net = m.group(1).upper(), m.group(2)
            if kw == "INPUT":
                define(net, lineno)
                inputs.append(net)
            else:
                outputs.append((net, lineno))
            continue
        m = _RE_GATE.match(line)
        if not m:
            raise NetlistError(f"cannot parse {line!r}", lineno)
        out, kind = m.group(1), _normalize_kind(m.group(2))
        args = tuple(a.strip() for a in m.group(3).split(",") if a.strip())
        if not args:
            raise NetlistError(f"gate {out!r} has no inputs", lineno)
        define(out, lineno)
        if kind == "DFF":
            if len(args) != 1:
                raise NetlistError(f"DFF {out!r} must have one input", lineno)
            ffs[out] = FlipFlop(id=out, d_net=args[0])
        else:
            gate_rows.append((out, kind, args, lineno))

    for fid, ff in ffs.items():
        if ff.d_net not in defs:
            raise NetlistError(f"undefined net {ff.d_net!r} feeding {fid!r}", defs[fid])
    for out, _, args, lineno in gate_rows:
        for a in args:
            if a not in defs:
                raise NetlistError(f"undefined net {a!r}", lineno)
    for net, lineno in outputs:
        if net not in defs:
            raise NetlistError(f"undefined output net {net!r}", lineno)

    fanouts: dict[str, list[str]] = {}
    for out, _, args, _ in gate_rows:
        for a in args:
            fanouts.setdefault(a, []).append(out)
    gates = {
        out: Gate(out, kind, args, tuple(fanouts.get(out, ())))
        for out, kind, args, _ in gate_rows
    }

    sorter = graphlib.TopologicalSorter()
    for out, g in gates.items():
        sorter.add(out, *[a for a in g.fanins if a in gates])
    try:
        order = tuple(sorter.static_order())
    except graphlib.CycleError as exc:
        cycle = exc.args[1]
        raise NetlistError(
            f"combinational cycle through {' -> '.join(cycle)}", defs[cycle[0]]
        ) from None

    return Circuit(
        inputs=tuple(inputs),
        outputs=tuple(n for n, _ in outputs),
        gates=gates,
        flipflops=ffs,
        order=order,
        name=name,
    )


def load_bench(path: str | Path) -> Circuit:
    path = Path(path)
    return parse_bench(path.read_text(), name=path.stem)


def serialize_bench(circuit: Circuit) -> str:
    lines = [f"# {circuit.name}" if circuit.name else "# bench"]
    lines += [f"INPUT({n})" for n in circuit.inputs]
    lines += [f"OUTPUT({n})" for n in circuit.outputs]
    lines += [f"{f.id} = DFF({f.d_net})" for f in circuit.flipflops.values()]
    for gid in circuit.order:
        g = circuit.gates[gid]
        lines.append(f"{g.id} = {g.kind}({', '.join(g.fanins)})")
    return "\n".join(lines) + "\n"


# --- variation model -------------------------------------------------------


@dataclass(frozen=True)
class VariationConfig:
    nominal: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_NOMINAL))
    length_sigma: float = 0.157
    oxide_sigma: float = 0.053
    vth_sigma: float = 0.044
    grid_levels: int = 3
    independent_fraction: float = 0.2  # share of each gate's variance that is private
    seed: int = 1

    def __post_init__(self):
        for name in ("length_sigma", "oxide_sigma", "vth_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.grid_levels < 1:
            raise ValueError("grid_levels must be >= 1")
        if not 0.0 <= self.independent_fraction <= 1.0:
            raise ValueError("independent_fraction must be in [0, 1]")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.length_sigma, self.oxide_sigma, self.vth_sigma)

    @property
    def total_sigma_fraction(self) -> float:
        return math.sqrt(sum(f * f for f in self.fractions))

    @property
    def cells_per_parameter(self) -> int:
        return sum(4 ** lvl for lvl in range(self.grid_levels))

    @property
    def n_components(self) -> int:
        return 3 * self.cells_per_parameter

    @property
    def reference_delay(self) -> float:
        """One nominal gate delay (the inverter when configured)."""
        if "NOT" in self.nominal:
            return float(self.nominal["NOT"])
        return float(min(self.nominal.values()))


def grid_cell(gate_id: str, levels: int, seed: int) -> tuple[int, int]:
    """Deterministic placement on the finest grid level."""
    side = 2 ** (levels - 1)
    h = hashlib.blake2b(f"{seed}:{gate_id}".encode(), digest_size=8).digest()
    v = int.from_bytes(h, "little")
    return (v % side, (v // side) % side)


def component_indices(cell: tuple[int, int], levels: int) -> list[int]:
    """Component index of the cell containing ``cell`` at every grid level."""
    out = []
    offset = 0
    x, y = cell
    for lvl in range(levels):
        side = 2 ** lvl
        shift = levels - 1 - lvl
        out.append(offset + (y >> shift) * side + (x >> shift))
        offset += side * side
    return out


def assign_delays(circuit: Circuit, config: VariationConfig) -> dict[str, tuple[CanonicalRV, CanonicalRV]]:
    n_comp = config.n_components
    per_param = config.cells_per_parameter
    corr_share = math.sqrt((1.0 - config.independent_fraction) / config.grid_levels)
    delays = {}
    for gid in circuit.order:
        kind = circuit.gates[gid].kind
        if kind not in config.nominal:
            raise KeyError(f"no nominal delay for gate kind {kind!r} (gate {gid})")
        nom = float(config.nominal[kind])
        cell = grid_cell(gid, config.grid_levels, config.seed)
        sens = np.zeros(n_comp)
        for p, frac in enumerate(config.fractions):
            for idx in component_indices(cell, config.grid_levels):
                sens[p * per_param + idx] = nom * frac * corr_share
        indep = nom * config.total_sigma_fraction * math.sqrt(config.independent_fraction)
        rv = CanonicalRV(nom, sens, indep)
        delays[gid] = (rv, rv)
    return delays


# --- configuration file ----------------------------------------------------


@dataclass(frozen=True)
class AnalysisConfig:
    variation: VariationConfig = field(default_factory=VariationConfig)
    setup: float | None = None  # None -> one nominal gate delay
    hold: float | None = None  # None -> a fifth of a nominal gate delay
    range: float | None = None  # None -> range_multiplier * T_n
    range_multiplier: float = 0.125
    io_paths: bool = True
    boundary_setup: float = 0.0
    boundary_hold: float = 0.0
    tuner_overrides: Mapping[str, bool] = field(default_factory=dict)
    range_overrides: Mapping[str, float] = field(default_factory=dict)
    setup_overrides: Mapping[str, float] = field(default_factory=dict)
    hold_overrides: Mapping[str, float] = field(default_factory=dict)
    default_tuner: bool = True
    prune_threshold: float = 0.98
    samples: int = 10000
    seed: int = 2024


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config(text: str) -> AnalysisConfig:
    """Parse the INI-style analysis config.

    Sections: ``[variation]``, ``[delays]`` (per-kind nominal), ``[flipflops]``,
    ``[tuners]`` and ``[ranges]`` (per-flip-flop overrides), ``[analysis]``.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    cp.read_string(text)
    known = {"variation", "delays", "flipflops", "tuners", "ranges", "setup", "hold", "analysis"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")

    var_kw: dict = {}
    if cp.has_section("variation"):
        sec = cp["variation"]
        for key in ("length_sigma", "oxide_sigma", "vth_sigma", "independent_fraction"):
            if key in sec:
                var_kw[key] = float(sec[key])
        for key in ("grid_levels", "seed"):
            if key in sec:
                var_kw[key] = int(sec[key])
        extra = set(sec) - set(var_kw)
        if extra:
            raise ValueError(f"unknown [variation] keys: {sorted(extra)}")
    if cp.has_section("delays"):
        nominal = dict(DEFAULT_NOMINAL)
        for k, v in cp["delays"].items():
            nominal[_normalize_kind(k)] = float(v)
        var_kw["nominal"] = nominal
    kw: dict = {"variation": VariationConfig(**var_kw)}

    if cp.has_section("flipflops"):
        sec = cp["flipflops"]
        for key in ("setup", "hold", "range", "range_multiplier", "boundary_setup", "boundary_hold"):
            if key in sec:
                kw[key] = float(sec[key])
        if "io_paths" in sec:
            kw["io_paths"] = _bool(sec["io_paths"])
        if "tuners" in sec:
            kw["default_tuner"] = _bool(sec["tuners"])
    if cp.has_section("tuners"):
        kw["tuner_overrides"] = {k: _bool(v) for k, v in cp["tuners"].items()}
    if cp.has_section("ranges"):
        kw["range_overrides"] = {k: float(v) for k, v in cp["ranges"].items()}
    if cp.has_section("setup"):
        kw["setup_overrides"] = {k: float(v) for k, v in cp["setup"].items()}
    if cp.has_section("hold"):
        kw["hold_overrides"] = {k: float(v) for k, v in cp["hold"].items()}
    if cp.has_section("analysis"):
        sec = cp["analysis"]
        if "prune_threshold" in sec:
            kw["prune_threshold"] = float(sec["prune_threshold"])
        if "samples" in sec:
            kw["samples"] = int(sec["samples"])
        if "seed" in sec:
            kw["seed"] = int(sec["seed"])
    return AnalysisConfig(**kw)


def load_config(path: str | Path | None) -> AnalysisConfig:
    if path is None:
        return AnalysisConfig()
    return parse_config(Path(path).read_text())


def apply_config(circuit: Circuit, cfg: AnalysisConfig, ranges: float | Mapping[str, float] | None = None) -> Circuit:
    """Attach setup/hold/tuner/range attributes from the config.

    ``ranges`` supplies the default range when the config leaves it to the
    zero-tuning pre-pass.
    """
    unit = cfg.variation.reference_delay
    setup = cfg.setup if cfg.setup is not None else unit
    hold = cfg.hold if cfg.hold is not None else 0.2 * unit
    default_range = cfg.range if cfg.range is not None else ranges
    if default_range is None:
        default_range = 0.0
    c = circuit.with_ff_attributes(setup=setup, hold=hold, has_tuner=cfg.default_tuner, ranges=default_range)
    return c.with_ff_attributes(
        setup=dict(cfg.setup_overrides) or None,
        hold=dict(cfg.hold_overrides) or None,
        has_tuner=dict(cfg.tuner_overrides) or None,
        ranges=dict(cfg.range_overrides) or None,
    )


# --- synthetic circuits ----------------------------------------------------


def synthesize_bench(
    n_ff: int,
    n_gates: int,
    n_inputs: int = 4,
    n_outputs: int = 4,
    seed: int = 0,
    name: str = "synth",
    levels: int | None = None,
) -> str:
    """Random sequential netlist in bench syntax.

    Gates sit on ``levels`` logic levels (default about sqrt(n_gates)/2); each
    takes one fanin from the level below and the rest from anywhere lower.
    Flip-flop inputs tap nets at mixed depths so stage delays are unbalanced,
    which is what makes clock tuning pay off.
    """
    rng = np.random.default_rng(seed)
    kinds = ["NAND", "NOR", "AND", "OR", "NOT", "BUFF", "XOR"]
    weights = np.array([0.25, 0.2, 0.15, 0.15, 0.12, 0.05, 0.08])
    weights = weights / weights.sum()
    if levels is None:
        levels = max(3, int(round(math.sqrt(n_gates) / 2)))
    levels = max(1, min(levels, n_gates))

    pis = [f"I{k}" for k in range(n_inputs)]
    qs = [f"Q{k}" for k in range(n_ff)]
    by_level: list[list[str]] = [pis + qs]
    unused = set(pis + qs)
    counts = np.full(levels, n_gates // levels)
    counts[: n_gates % levels] += 1
    body = []
    g = 0
    for lvl in range(1, levels + 1):
        here = []
        lower = [n for layer in by_level for n in layer]
        for _ in range(int(counts[lvl - 1])):
            kind = str(rng.choice(kinds, p=weights))
            arity = 1 if kind in ("NOT", "BUFF") else (2 if kind == "XOR" else int(rng.integers(2, 4)))
            prev = by_level[-1]
            fresh = [n for n in prev if n in unused]
            first = fresh[int(rng.integers(len(fresh)))] if fresh else prev[int(rng.integers(len(prev)))]
            chosen = [first]
            tries = 0
            while len(chosen) < min(arity, len(lower)) and tries < 50:
                tries += 1
                if rng.random() < 0.5:
                    pool = prev
                else:
                    pool = lower
                stale = [n for n in pool if n in unused and n not in chosen]
                if stale and rng.random() < 0.6:
                    pick = stale[int(rng.integers(len(stale)))]
                else:
                    pick = pool[int(rng.integers(len(pool)))]
                if pick not in chosen:
                    chosen.append(pick)
            out = f"N{g}"
            g += 1
            unused.difference_update(chosen)
            unused.add(out)
            body.append(f"{out} = {kind}({', '.join(chosen)})")
            here.append(out)
        by_level.append(here)

    gate_nets = [n for layer in by_level[1:] for n in layer]
    deep = [n for layer in by_level[max(1, levels // 3):] for n in layer] or gate_nets
    dangling = [n for n in deep if n in unused]
    rng.shuffle(dangling)
    d_nets = []
    for _ in range(n_ff):
        if dangling and rng.random() < 0.8:
            d_nets.append(dangling.pop())
        else:
            d_nets.append(deep[int(rng.integers(len(deep)))])
    unused.difference_update(d_nets)
    outs = [n for n in gate_nets if n in unused]
    rng.shuffle(outs)
    outs = outs[:n_outputs] or gate_nets[-n_outputs:]
    lines = [f"# {name}"] + [f"INPUT({p})" for p in pis]
    lines += [f"OUTPUT({o})" for o in outs]
    lines += [f"{q} = DFF({d})" for q, d in zip(qs, d_nets)]
    lines += body
    return "\n".join(lines) + "\n"


S27_BENCH = """\
# s27 (ISCAS89)
INPUT(G0)
INPUT(G1)
INPUT(G2)
INPUT(G3)
OUTPUT(G17)
G5 = DFF(G10)
G6 = DFF(G11)
G7 = DFF(G13)
G14 = NOT(G0)
G17 = NOT(G11)
G8 = AND(G14, G6)
G15 = OR(G12, G8)
G16 = OR(G3, G8)
G9 = NAND(G16, G15)
G10 = NOR(G14, G11)
G11 = NOR(G5, G9)
G12 = NOR(G1, G7)
G13 = NAND(G2, G12)
"""


def nets_of(circuit: Circuit) -> Iterable[str]:
    yield from circuit.inputs
    yield from circuit.flipflops
    yield from circuit.order
