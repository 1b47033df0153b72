"""Typed water-network graph and the EPANET-style .inp subset parser.

Internal units are US customary throughout: heads and elevations in ft,
flows in GPM, time in hours, electricity prices in $/kWh.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

GPM_PER_CFS = 448.8312

# Hazen-Williams 1.852, Darcy-Weisbach / Chezy-Manning 2 (on the configured formula)
HEADLOSS_EXPONENTS = {"H-W": 1.852, "D-W": 2.0, "C-M": 2.0}

DEFAULT_FLOW_BOUND = 3000.0  # GPM, symmetric default box on link flows


class NetworkError(Exception):
    """Base class for network construction problems."""


class InpSyntaxError(NetworkError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(NetworkError):
    pass


class ValveStatus(Enum):
    OPEN = "OPEN"
    ACTIVE = "ACTIVE"
    CLOSED = "CLOSED"


class ValveKind(Enum):
    GPV = "GPV"
    PRV = "PRV"
    FCV = "FCV"


@dataclass(frozen=True)
class DemandPattern:
    name: str
    multipliers: tuple[float, ...]

    def __post_init__(self):
        if any(m < 0 for m in self.multipliers):
            raise ValidationError(f"pattern {self.name}: negative multiplier")

    def __len__(self) -> int:
        return len(self.multipliers)


@dataclass(frozen=True)
class Curve:
    """A piecewise point curve from [CURVES]; (x, y) pairs, x ascending."""

    name: str
    points: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class EfficiencyCurve:
    """Polynomial pump efficiency eta(q), coefficients low order first."""

    coeffs: tuple[float, ...] = (0.75,)

    def __call__(self, q: float) -> float:
        eta = 0.0
        for i, c in enumerate(self.coeffs):
            eta += c * q**i
        return min(1.0, max(1e-6, eta))


@dataclass(frozen=True)
class Junction:
    id: str
    elevation: float
    base_demand: float = 0.0
    pattern_ref: Optional[str] = None

    def __post_init__(self):
        if not math.isfinite(self.elevation):
            raise ValidationError(f"junction {self.id}: elevation not finite")
        if self.base_demand < 0:
            raise ValidationError(f"junction {self.id}: negative base demand")


@dataclass(frozen=True)
class Tank:
    id: str
    elevation: float
    init_head: float
    min_head: float
    max_head: float
    area: float
    safe_head: float

    def __post_init__(self):
        if self.area <= 0:
            raise ValidationError(f"tank {self.id}: area must be positive")
        if not self.min_head <= self.safe_head <= self.max_head:
            raise ValidationError(
                f"tank {self.id}: safe head {self.safe_head} outside "
                f"[{self.min_head}, {self.max_head}]"
            )


@dataclass(frozen=True)
class Reservoir:
    id: str
    fixed_head: float


@dataclass(frozen=True)
class Pipe:
    id: str
    from_node: str
    to_node: str
    resistance: float
    exponent: float = 1.852
    q_min: float = -DEFAULT_FLOW_BOUND
    q_max: float = DEFAULT_FLOW_BOUND

    def __post_init__(self):
        if self.resistance <= 0:
            raise ValidationError(f"pipe {self.id}: resistance must be positive")
        if not self.q_min < self.q_max:
            raise ValidationError(f"pipe {self.id}: empty flow box")


@dataclass(frozen=True)
class Pump:
    id: str
    from_node: str
    to_node: str
    shutoff_head: float
    curve_coeff: float
    curve_exp: float
    max_speed: float = 1.0
    efficiency_curve: EfficiencyCurve = EfficiencyCurve()
    paired_tank: Optional[str] = None
    q_min: float = 0.0
    q_max: float = DEFAULT_FLOW_BOUND
    head_curve_ref: Optional[str] = None
    efficiency_curve_ref: Optional[str] = None

    def __post_init__(self):
        if self.shutoff_head <= 0:
            raise ValidationError(f"pump {self.id}: shutoff head must be positive")
        if self.curve_exp <= 1:
            raise ValidationError(f"pump {self.id}: curve exponent must exceed 1")
        if self.curve_coeff >= 0:
            # r < 0 in the adopted convention: the gain term -r(q/s)^nu grows with flow
            raise ValidationError(f"pump {self.id}: curve coefficient must be negative")
        if self.max_speed <= 0:
            raise ValidationError(f"pump {self.id}: max speed must be positive")


@dataclass(frozen=True)
class Valve:
    id: str
    from_node: str
    to_node: str
    kind: ValveKind
    # GPV: resistance/exponent; PRV: h_set (elevation + pressure head, ft);
    # FCV: q_set (GPM)
    resistance: float = 0.0
    exponent: float = 1.852
    h_set: float = 0.0
    q_set: float = 0.0
    status: ValveStatus = ValveStatus.ACTIVE
    q_min: float = -DEFAULT_FLOW_BOUND
    q_max: float = DEFAULT_FLOW_BOUND

    def __post_init__(self):
        if self.kind is ValveKind.GPV:
            if self.resistance <= 0:
                raise ValidationError(f"valve {self.id}: GPV resistance must be positive")
            if self.status is not ValveStatus.OPEN:
                # GPVs are always on; their control is the openness variable
                object.__setattr__(self, "status", ValveStatus.OPEN)
        if self.kind is ValveKind.FCV and self.q_set < 0:
            raise ValidationError(f"valve {self.id}: FCV setting must be nonnegative")


class Counts(NamedTuple):
    n_j: int
    n_t: int
    n_r: int
    n_p: int
    n_m: int
    n_w: int
    n_g: int


@dataclass(frozen=True)
class EnergyOptions:
    global_price: float = 1.0
    price_pattern: Optional[str] = None
    global_efficiency: float = 0.75


@dataclass(frozen=True)
class Network:
    name: str = ""
    junctions: tuple[Junction, ...] = ()
    tanks: tuple[Tank, ...] = ()
    reservoirs: tuple[Reservoir, ...] = ()
    pipes: tuple[Pipe, ...] = ()
    pumps: tuple[Pump, ...] = ()
    valves: tuple[Valve, ...] = ()
    patterns: dict[str, DemandPattern] = field(default_factory=dict)
    curves: dict[str, Curve] = field(default_factory=dict)
    energy: EnergyOptions = EnergyOptions()
    headloss_formula: str = "H-W"

    def __post_init__(self):
        self.validate()

    # -- lookups ---------------------------------------------------------

    @property
    def nodes(self) -> tuple:
        return self.junctions + self.tanks + self.reservoirs

    @property
    def links(self) -> tuple:
        return self.pipes + self.pumps + self.valves

    def node(self, node_id: str):
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def link(self, link_id: str):
        for e in self.links:
            if e.id == link_id:
                return e
        raise KeyError(link_id)

    def junction(self, jid: str) -> Junction:
        for j in self.junctions:
            if j.id == jid:
                return j
        raise KeyError(jid)

    def tank(self, tid: str) -> Tank:
        for t in self.tanks:
            if t.id == tid:
                return t
        raise KeyError(tid)

    @property
    def counts(self) -> Counts:
        n_g = sum(1 for v in self.valves if v.kind is ValveKind.GPV)
        return Counts(
            n_j=len(self.junctions),
            n_t=len(self.tanks),
            n_r=len(self.reservoirs),
            n_p=len(self.pipes),
            n_m=len(self.pumps),
            n_w=len(self.valves),
            n_g=n_g,
        )

    def sorted_junctions(self) -> list[Junction]:
        return sorted(self.junctions, key=lambda j: j.id)

    def sorted_tanks(self) -> list[Tank]:
        return sorted(self.tanks, key=lambda t: t.id)

    def sorted_reservoirs(self) -> list[Reservoir]:
        return sorted(self.reservoirs, key=lambda r: r.id)

    def sorted_pipes(self) -> list[Pipe]:
        return sorted(self.pipes, key=lambda p: p.id)

    def sorted_pumps(self) -> list[Pump]:
        return sorted(self.pumps, key=lambda m: m.id)

    def sorted_valves(self) -> list[Valve]:
        return sorted(self.valves, key=lambda w: w.id)

    def controllable_links(self) -> list:
        """Pumps then valves, each id-sorted: the u-vector ordering."""
        return list(self.sorted_pumps()) + list(self.sorted_valves())

    # -- validation ------------------------------------------------------

    def validate(self) -> None:
        node_ids = [n.id for n in self.nodes]
        if len(set(node_ids)) != len(node_ids):
            dup = _first_duplicate(node_ids)
            raise ValidationError(f"duplicate node id {dup!r}")
        link_ids = [e.id for e in self.links]
        if len(set(link_ids)) != len(link_ids):
            dup = _first_duplicate(link_ids)
            raise ValidationError(f"duplicate link id {dup!r}")
        known = set(node_ids)
        for e in self.links:
            for end in (e.from_node, e.to_node):
                if end not in known:
                    raise ValidationError(
                        f"link {e.id} references unknown node {end!r}"
                    )
        tank_ids = {t.id for t in self.tanks}
        for m in self.pumps:
            if m.paired_tank is not None and m.paired_tank not in tank_ids:
                raise ValidationError(
                    f"pump {m.id} paired with unknown tank {m.paired_tank!r}"
                )
        for j in self.junctions:
            if j.pattern_ref is not None and j.pattern_ref not in self.patterns:
                raise ValidationError(
                    f"junction {j.id} references unknown pattern {j.pattern_ref!r}"
                )

    def electricity_price(self, k: int) -> float:
        """lambda(k) in $/kWh: global price times the price-pattern multiplier.

        Patterns repeat cyclically, as in EPANET, so a forecast window may
        run past the end of the tabulated day.
        """
        lam = self.energy.global_price
        if self.energy.price_pattern is not None:
            pat = self.patterns[self.energy.price_pattern]
            lam *= pat.multipliers[k % len(pat)]
        return lam

    def pump_efficiency(self, pump: Pump, q: float) -> float:
        return pump.efficiency_curve(q)


def _first_duplicate(items: Sequence[str]) -> str:
    seen = set()
    for x in items:
        if x in seen:
            return x
        seen.add(x)
    return ""


@dataclass(frozen=True)
class DemandNoise:
    """Multiplicative demand uncertainty: d -> d*(1+u), u ~ U[-eps, eps]."""

    eps: float
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.eps < 1:
            raise ValidationError("noise magnitude must be in [0, 1)")


def resolve_demand(net: Network, k: int, noise: Optional[DemandNoise] = None) -> np.ndarray:
    """Demand vector d(k) [GPM] over id-sorted junctions.

    Deterministic given (noise.seed, k): the generator is re-seeded per call so
    forecasts and realizations can be replayed independently.
    """
    juncs = net.sorted_junctions()
    d = np.empty(len(juncs))
    for i, j in enumerate(juncs):
        mult = 1.0
        if j.pattern_ref is not None:
            pat = net.patterns[j.pattern_ref]
            # patterns repeat cyclically, as in EPANET
            mult = pat.multipliers[k % len(pat)]
        d[i] = j.base_demand * mult
    if noise is not None and noise.eps > 0:
        rng = np.random.default_rng([noise.seed, k])
        u = rng.uniform(-noise.eps, noise.eps, size=len(juncs))
        d = d * (1.0 + u)
    return d


def structurally_equal(a: Network, b: Network, rel_tol: float = 1e-12) -> bool:
    """Field-by-field equality with float tolerance (unit round-trips excepted)."""

    def eq(x, y) -> bool:
        if isinstance(x, float) and isinstance(y, float):
            return math.isclose(x, y, rel_tol=rel_tol, abs_tol=1e-12)
        if isinstance(x, tuple) and isinstance(y, tuple):
            return len(x) == len(y) and all(eq(p, q) for p, q in zip(x, y))
        if isinstance(x, dict) and isinstance(y, dict):
            return x.keys() == y.keys() and all(eq(x[k], y[k]) for k in x)
        if hasattr(x, "__dataclass_fields__") and hasattr(y, "__dataclass_fields__"):
            if type(x) is not type(y):
                return False
            return all(
                eq(getattr(x, f), getattr(y, f)) for f in x.__dataclass_fields__
            )
        return x == y

    for name in ("junctions", "tanks", "reservoirs", "pipes", "pumps", "valves"):
        xa = sorted(getattr(a, name), key=lambda v: v.id)
        xb = sorted(getattr(b, name), key=lambda v: v.id)
        if len(xa) != len(xb) or not all(eq(p, q) for p, q in zip(xa, xb)):
            return False
    return (
        eq(a.patterns, b.patterns)
        and eq(a.curves, b.curves)
        and eq(a.energy, b.energy)
        and a.headloss_formula == b.headloss_formula
    )


# ---------------------------------------------------------------------------
# .inp parsing


KNOWN_SECTIONS = {
    "TITLE",
    "JUNCTIONS",
    "RESERVOIRS",
    "TANKS",
    "PIPES",
    "PUMPS",
    "VALVES",
    "DEMANDS",
    "PATTERNS",
    "CURVES",
    "COORDINATES",
    "OPTIONS",
    "ENERGY",
    "RESISTANCES",
    "SAFEHEADS",
    "PUMPTANKS",
    "END",
}


def hazen_williams_resistance(length: float, diameter_in: float, roughness: float) -> float:
    """Pipe resistance for GPM flows from length [ft], diameter [in], C-factor.

    The cfs-based US-customary coefficient 4.727 is rescaled so that
    h = R * q * |q|^0.852 holds with q in GPM.
    """
    r_cfs = 4.727 * roughness**-1.852 * (diameter_in / 12.0) ** -4.871 * length
    return r_cfs / GPM_PER_CFS**1.852


def fit_pump_curve(points: Sequence[tuple[float, float]]) -> tuple[float, float, float]:
    """Recover (h0, r, nu) from a three-point head curve h(q) = h0 - r*q^nu.

    Points must include q=0 (the shutoff head) plus two positive-flow points.
    """
    pts = sorted(points)
    if len(pts) != 3 or pts[0][0] != 0.0:
        raise ValidationError(
            "pump head curve needs exactly 3 points, the first at q=0"
        )
    h0 = pts[0][1]
    (q1, h1), (q2, h2) = pts[1], pts[2]
    if q1 <= 0 or q2 <= q1:
        raise ValidationError("pump head curve flows must be positive and increasing")
    d1, d2 = h1 - h0, h2 - h0
    if d1 == 0 or d2 == 0 or (d1 > 0) != (d2 > 0):
        raise ValidationError("pump head curve must be one-sided around q=0")
    nu = math.log(d1 / d2) / math.log(q1 / q2)
    r = -d1 / q1**nu
    if nu <= 1:
        raise ValidationError(f"pump head curve exponent {nu:.4f} not > 1")
    return h0, r, nu


def _tokenize(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        yield lineno, line


def parse_inp(text: str) -> Network:
    """Parse the supported .inp subset into a validated Network.

    Unknown sections are skipped with a warning on stderr. Section order is
    free; links may reference nodes declared later.
    """
    section = None
    title = ""
    juncs: dict[str, dict] = {}
    tanks: dict[str, dict] = {}
    reservoirs: dict[str, dict] = {}
    pipes: dict[str, dict] = {}
    pumps: dict[str, dict] = {}
    valves: dict[str, dict] = {}
    patterns: dict[str, list[float]] = {}
    curves: dict[str, list[tuple[float, float]]] = {}
    resist_override: dict[str, tuple[float, float]] = {}
    safeheads: dict[str, float] = {}
    pairings: dict[str, str] = {}
    pump_effic: dict[str, str] = {}
    energy = {"global_price": 1.0, "price_pattern": None, "global_efficiency": 0.75}
    options = {"headloss": "H-W", "units": "GPM"}
    warned: set[str] = set()

    def dup_check(table: dict, kind: str, name: str, lineno: int):
        for t in (juncs, tanks, reservoirs) if kind == "node" else (pipes, pumps, valves):
            if name in t:
                raise InpSyntaxError(f"duplicate {kind} id {name!r}", lineno)

    for lineno, line in _tokenize(text):
        if line.startswith("["):
            if not line.endswith("]"):
                raise InpSyntaxError("unterminated section header", lineno)
            section = line[1:-1].strip().upper()
            if section not in KNOWN_SECTIONS and section not in warned:
                print(f"warning: ignoring unknown section [{section}]", file=sys.stderr)
                warned.add(section)
            continue
        if section is None:
            raise InpSyntaxError("content before first section header", lineno)
        if section not in KNOWN_SECTIONS:
            continue
        parts = line.split()
        try:
            _parse_row(
                section, parts, lineno, title_box := [title],
                juncs, tanks, reservoirs, pipes, pumps, valves,
                patterns, curves, resist_override, safeheads, pairings,
                pump_effic, energy, options, dup_check,
            )
            title = title_box[0]
        except (ValueError, IndexError) as exc:
            raise InpSyntaxError(f"bad row in [{section}]: {exc}", lineno) from exc

    return _assemble_network(
        title, juncs, tanks, reservoirs, pipes, pumps, valves,
        patterns, curves, resist_override, safeheads, pairings,
        pump_effic, energy, options,
    )


def _parse_row(section, parts, lineno, title_box, juncs, tanks, reservoirs,
               pipes, pumps, valves, patterns, curves, resist_override,
               safeheads, pairings, pump_effic, energy, options, dup_check):
    if section == "TITLE":
        title_box[0] = (title_box[0] + " " + " ".join(parts)).strip()
    elif section == "JUNCTIONS":
        # id  elevation  [base_demand]  [pattern]
        name = parts[0]
        dup_check(juncs, "node", name, lineno)
        juncs[name] = {
            "elevation": float(parts[1]),
            "base_demand": float(parts[2]) if len(parts) > 2 else 0.0,
            "pattern_ref": parts[3] if len(parts) > 3 else None,
        }
    elif section == "RESERVOIRS":
        # id  head
        name = parts[0]
        dup_check(reservoirs, "node", name, lineno)
        reservoirs[name] = {"fixed_head": float(parts[1])}
    elif section == "TANKS":
        # id  elevation  init_level  min_level  max_level  diameter
        name = parts[0]
        dup_check(tanks, "node", name, lineno)
        elev = float(parts[1])
        diam = float(parts[5])
        tanks[name] = {
            "elevation": elev,
            "init_head": elev + float(parts[2]),
            "min_head": elev + float(parts[3]),
            "max_head": elev + float(parts[4]),
            "area": math.pi * diam * diam / 4.0,
        }
    elif section == "PIPES":
        # id  node1  node2  length  diameter[in]  roughness
        name = parts[0]
        dup_check(pipes, "link", name, lineno)
        pipes[name] = {
            "from_node": parts[1],
            "to_node": parts[2],
            "length": float(parts[3]),
            "diameter": float(parts[4]),
            "roughness": float(parts[5]),
        }
    elif section == "PUMPS":
        # id  node1  node2  HEAD curve  [SPEED smax]
        name = parts[0]
        dup_check(pumps, "link", name, lineno)
        row = {"from_node": parts[1], "to_node": parts[2], "curve": None, "max_speed": 1.0}
        i = 3
        while i < len(parts):
            key = parts[i].upper()
            if key == "HEAD":
                row["curve"] = parts[i + 1]
            elif key == "SPEED":
                row["max_speed"] = float(parts[i + 1])
            else:
                raise ValueError(f"unknown pump keyword {parts[i]!r}")
            i += 2
        if row["curve"] is None:
            raise ValueError("pump needs a HEAD curve reference")
        pumps[name] = row
    elif section == "VALVES":
        # id  node1  node2  diameter  type  setting
        name = parts[0]
        dup_check(valves, "link", name, lineno)
        kind = parts[4].upper()
        if kind not in ("GPV", "PRV", "FCV"):
            raise ValueError(f"unsupported valve type {kind!r}")
        valves[name] = {
            "from_node": parts[1],
            "to_node": parts[2],
            "kind": kind,
            "setting": float(parts[5]),
        }
    elif section == "DEMANDS":
        # id  demand  [pattern]   (overrides [JUNCTIONS] columns)
        name = parts[0]
        if name not in juncs:
            raise ValueError(f"demand for undeclared junction {name!r}")
        juncs[name]["base_demand"] = float(parts[1])
        if len(parts) > 2:
            juncs[name]["pattern_ref"] = parts[2]
    elif section == "PATTERNS":
        # name  m1 m2 ...   (continuation rows append)
        patterns.setdefault(parts[0], []).extend(float(x) for x in parts[1:])
    elif section == "CURVES":
        # name  x  y
        curves.setdefault(parts[0], []).append((float(parts[1]), float(parts[2])))
    elif section == "RESISTANCES":
        # pipe_or_gpv_id  R  [mu]    (direct resistance entry path)
        resist_override[parts[0]] = (
            float(parts[1]),
            float(parts[2]) if len(parts) > 2 else -1.0,
        )
    elif section == "SAFEHEADS":
        # tank_id  safe_head[ft absolute]
        safeheads[parts[0]] = float(parts[1])
    elif section == "PUMPTANKS":
        # pump_id  tank_id
        pairings[parts[0]] = parts[1]
    elif section == "ENERGY":
        key = parts[0].upper()
        if key == "GLOBAL":
            sub = parts[1].upper()
            if sub in ("EFFIC", "EFFICIENCY"):
                energy["global_efficiency"] = float(parts[2]) / 100.0
            elif sub == "PRICE":
                energy["global_price"] = float(parts[2])
            elif sub == "PATTERN":
                energy["price_pattern"] = parts[2]
            else:
                raise ValueError(f"unknown ENERGY GLOBAL key {parts[1]!r}")
        elif key == "PUMP":
            if parts[2].upper() in ("EFFIC", "EFFICIENCY"):
                pump_effic[parts[1]] = parts[3]
            else:
                raise ValueError(f"unknown ENERGY PUMP key {parts[2]!r}")
        else:
            raise ValueError(f"unknown ENERGY key {parts[0]!r}")
    elif section == "OPTIONS":
        key = parts[0].upper()
        if key == "HEADLOSS":
            hl = parts[1].upper()
            if hl not in HEADLOSS_EXPONENTS:
                raise ValueError(f"unsupported head-loss formula {parts[1]!r}")
            options["headloss"] = hl
        elif key == "UNITS":
            if parts[1].upper() != "GPM":
                raise ValueError("only GPM units are supported")
        # other options ignored
    elif section in ("COORDINATES", "END"):
        pass


def _assemble_network(title, juncs, tanks, reservoirs, pipes, pumps, valves,
                      patterns, curves, resist_override, safeheads, pairings,
                      pump_effic, energy, options) -> Network:
    mu_default = HEADLOSS_EXPONENTS[options["headloss"]]

    junction_objs = tuple(
        Junction(id=k, **v) for k, v in juncs.items()
    )
    tank_objs = tuple(
        Tank(id=k, safe_head=safeheads.get(k, v["min_head"]), **v)
        for k, v in tanks.items()
    )
    reservoir_objs = tuple(Reservoir(id=k, **v) for k, v in reservoirs.items())

    pipe_objs = []
    for k, v in pipes.items():
        if k in resist_override:
            r, mu = resist_override[k]
            if mu <= 0:
                mu = mu_default
        else:
            r = hazen_williams_resistance(v["length"], v["diameter"], v["roughness"])
            mu = mu_default
        pipe_objs.append(
            Pipe(id=k, from_node=v["from_node"], to_node=v["to_node"],
                 resistance=r, exponent=mu)
        )

    curve_objs = {
        k: Curve(name=k, points=tuple(sorted(v))) for k, v in curves.items()
    }

    pump_objs = []
    for k, v in pumps.items():
        if v["curve"] not in curve_objs:
            raise ValidationError(f"pump {k} references unknown curve {v['curve']!r}")
        h0, r, nu = fit_pump_curve(curve_objs[v["curve"]].points)
        eff = EfficiencyCurve((energy["global_efficiency"],))
        if k in pump_effic:
            if pump_effic[k] not in curve_objs:
                raise ValidationError(
                    f"pump {k} references unknown efficiency curve {pump_effic[k]!r}"
                )
            # fit a low-order polynomial through the supplied (q, eta%) points
            pts = curve_objs[pump_effic[k]].points
            coeffs = np.polyfit([p[0] for p in pts], [p[1] / 100.0 for p in pts],
                                deg=min(2, len(pts) - 1))
            eff = EfficiencyCurve(tuple(float(c) for c in coeffs[::-1]))
        pump_objs.append(
            Pump(id=k, from_node=v["from_node"], to_node=v["to_node"],
                 shutoff_head=h0, curve_coeff=r, curve_exp=nu,
                 max_speed=v["max_speed"], efficiency_curve=eff,
                 paired_tank=pairings.get(k),
                 head_curve_ref=v["curve"], efficiency_curve_ref=pump_effic.get(k))
        )

    valve_objs = []
    for k, v in valves.items():
        kind = ValveKind[v["kind"]]
        if kind is ValveKind.GPV:
            if k in resist_override:
                r, mu = resist_override[k]
                if mu <= 0:
                    mu = mu_default
            else:
                r, mu = v["setting"], mu_default
            valve_objs.append(
                Valve(id=k, from_node=v["from_node"], to_node=v["to_node"],
                      kind=kind, resistance=r, exponent=mu,
                      status=ValveStatus.OPEN)
            )
        elif kind is ValveKind.PRV:
            # setting is pressure head in ft; h_set = downstream elevation + setting
            down = v["to_node"]
            if down in juncs:
                elev = juncs[down]["elevation"]
            elif down in tanks:
                elev = tanks[down]["elevation"]
            else:
                raise ValidationError(f"PRV {k}: downstream node {down!r} not found")
            valve_objs.append(
                Valve(id=k, from_node=v["from_node"], to_node=v["to_node"],
                      kind=kind, h_set=elev + v["setting"],
                      status=ValveStatus.ACTIVE)
            )
        else:
            valve_objs.append(
                Valve(id=k, from_node=v["from_node"], to_node=v["to_node"],
                      kind=kind, q_set=v["setting"], status=ValveStatus.ACTIVE)
            )

    pattern_objs = {
        k: DemandPattern(name=k, multipliers=tuple(v)) for k, v in patterns.items()
    }

    net = Network(
        name=title,
        junctions=junction_objs,
        tanks=tank_objs,
        reservoirs=reservoir_objs,
        pipes=tuple(pipe_objs),
        pumps=tuple(pump_objs),
        valves=tuple(valve_objs),
        patterns=pattern_objs,
        curves=curve_objs,
        energy=EnergyOptions(
            global_price=energy["global_price"],
            price_pattern=energy["price_pattern"],
            global_efficiency=energy["global_efficiency"],
        ),
        headloss_formula=options["headloss"],
    )

    # pairing fallback: nearest tank by undirected BFS from the pump outlet
    missing = [m for m in net.pumps if m.paired_tank is None]
    if missing and net.tanks:
        adj: dict[str, set[str]] = {}
        for e in net.links:
            adj.setdefault(e.from_node, set()).add(e.to_node)
            adj.setdefault(e.to_node, set()).add(e.from_node)
        tank_ids = {t.id for t in net.tanks}
        fixed = []
        for m in net.pumps:
            if m.paired_tank is not None:
                fixed.append(m)
                continue
            found = _bfs_nearest(adj, m.to_node, tank_ids)
            if found is None:
                raise ValidationError(f"pump {m.id}: no tank reachable for pairing")
            fixed.append(replace(m, paired_tank=found))
        net = replace(net, pumps=tuple(fixed))
    return net


def _bfs_nearest(adj: dict[str, set[str]], start: str, targets: set[str]) -> Optional[str]:
    from collections import deque

    seen = {start}
    frontier = deque([start])
    while frontier:
        # scan one BFS layer at a time so distance ties break by smallest id
        layer_hits = sorted(t for t in frontier if t in targets)
        if layer_hits:
            return layer_hits[0]
        for _ in range(len(frontier)):
            node = frontier.popleft()
            for nxt in sorted(adj.get(node, ())):
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
    return None


def parse_inp_file(path: str) -> Network:
    with open(path, "r", encoding="utf-8") as f:
        return parse_inp(f.read())


# ---------------------------------------------------------------------------
# serialization


def _fmt(x: float) -> str:
    return repr(float(x))


def write_inp(net: Network) -> str:
    """Serialize a Network back to the supported .inp subset.

    Pipe geometry is not retained internally, so [PIPES] carries placeholder
    length/diameter/roughness columns and the exact resistances go to
    [RESISTANCES]; parse_inp(write_inp(net)) is structurally equal to net.
    """
    out = []
    if net.name:
        out += ["[TITLE]", net.name, ""]
    out.append("[JUNCTIONS]")
    out.append(";id  elevation  base_demand  pattern")
    for j in net.junctions:
        row = f"{j.id}  {_fmt(j.elevation)}  {_fmt(j.base_demand)}"
        if j.pattern_ref is not None:
            row += f"  {j.pattern_ref}"
        out.append(row)
    out += ["", "[RESERVOIRS]", ";id  head"]
    for r in net.reservoirs:
        out.append(f"{r.id}  {_fmt(r.fixed_head)}")
    out += ["", "[TANKS]", ";id  elev  init_lvl  min_lvl  max_lvl  diameter"]
    for t in net.tanks:
        diam = math.sqrt(4.0 * t.area / math.pi)
        out.append(
            f"{t.id}  {_fmt(t.elevation)}  {_fmt(t.init_head - t.elevation)}  "
            f"{_fmt(t.min_head - t.elevation)}  {_fmt(t.max_head - t.elevation)}  "
            f"{_fmt(diam)}"
        )
    out += ["", "[PIPES]", ";id  node1  node2  length  diameter  roughness"]
    for p in net.pipes:
        out.append(f"{p.id}  {p.from_node}  {p.to_node}  1000.0  12.0  130.0")
    out += ["", "[PUMPS]", ";id  node1  node2  HEAD curve  SPEED smax"]
    for m in net.pumps:
        ref = m.head_curve_ref if m.head_curve_ref in net.curves else f"_hc_{m.id}"
        out.append(
            f"{m.id}  {m.from_node}  {m.to_node}  HEAD {ref}  SPEED {_fmt(m.max_speed)}"
        )
    out += ["", "[VALVES]", ";id  node1  node2  diameter  type  setting"]
    for v in net.valves:
        if v.kind is ValveKind.GPV:
            setting = v.resistance
        elif v.kind is ValveKind.PRV:
            down = net.node(v.to_node)
            setting = v.h_set - down.elevation
        else:
            setting = v.q_set
        out.append(f"{v.id}  {v.from_node}  {v.to_node}  12.0  {v.kind.value}  {_fmt(setting)}")
    out += ["", "[RESISTANCES]", ";link  R  mu"]
    for p in net.pipes:
        out.append(f"{p.id}  {_fmt(p.resistance)}  {_fmt(p.exponent)}")
    for v in net.valves:
        if v.kind is ValveKind.GPV:
            out.append(f"{v.id}  {_fmt(v.resistance)}  {_fmt(v.exponent)}")
    out += ["", "[SAFEHEADS]", ";tank  safe_head"]
    for t in net.tanks:
        out.append(f"{t.id}  {_fmt(t.safe_head)}")
    out += ["", "[PUMPTANKS]", ";pump  tank"]
    for m in net.pumps:
        if m.paired_tank is not None:
            out.append(f"{m.id}  {m.paired_tank}")
    out += ["", "[PATTERNS]"]
    for name, pat in net.patterns.items():
        for i in range(0, len(pat.multipliers), 6):
            chunk = "  ".join(_fmt(x) for x in pat.multipliers[i : i + 6])
            out.append(f"{name}  {chunk}")
    out += ["", "[CURVES]"]
    for name, curve in net.curves.items():
        for x, y in curve.points:
            out.append(f"{name}  {_fmt(x)}  {_fmt(y)}")
    # pumps built programmatically carry no curve reference: regenerate an
    # exact 3-point head curve from the fitted parameters
    for m in net.pumps:
        if m.head_curve_ref in net.curves:
            continue
        h0, r, nu = m.shutoff_head, m.curve_coeff, m.curve_exp
        for q in (0.0, 1000.0, 2000.0):
            out.append(f"_hc_{m.id}  {_fmt(q)}  {_fmt(h0 - r * q**nu if q else h0)}")
    out += ["", "[ENERGY]"]
    out.append(f"GLOBAL EFFIC {_fmt(net.energy.global_efficiency * 100.0)}")
    out.append(f"GLOBAL PRICE {_fmt(net.energy.global_price)}")
    if net.energy.price_pattern is not None:
        out.append(f"GLOBAL PATTERN {net.energy.price_pattern}")
    for m in net.pumps:
        if m.efficiency_curve_ref is not None and m.efficiency_curve_ref in net.curves:
            out.append(f"PUMP {m.id} EFFIC {m.efficiency_curve_ref}")
    out += ["", "[OPTIONS]", f"HEADLOSS {net.headloss_formula}", "UNITS GPM", "", "[END]", ""]
    return "\n".join(out)
