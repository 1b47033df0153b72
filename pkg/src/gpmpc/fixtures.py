"""Built-in test systems: a 3-node loopless network, an 8-node two-zone
network with every component type, and a parameterized large system with
PRV-fed district subgrids for scaling studies.

All generators emit .inp text; the convenience constructors parse it so the
returned Network is exactly what a file round trip would produce.
"""

from __future__ import annotations

import math

from .network import Network, parse_inp

DIURNAL_24 = (
    0.82, 0.76, 0.74, 0.78, 0.90, 1.04,
    1.18, 1.26, 1.22, 1.14, 1.08, 1.05,
    1.02, 1.00, 1.01, 1.05, 1.12, 1.22,
    1.28, 1.24, 1.12, 0.99, 0.90, 0.84,
)

# $/kWh multipliers; the 6-hour stretch starting at hour 1 is the tariff
# profile used throughout the scheduling tests
PRICE_24 = (
    1.00, 1.15, 1.00, 1.00, 1.025, 1.15,
    1.35, 1.20, 1.10, 1.05, 1.00, 1.00,
    1.00, 1.05, 1.10, 1.20, 1.30, 1.35,
    1.25, 1.15, 1.05, 1.00, 1.00, 1.00,
)


def _pattern_rows(name: str, values) -> list[str]:
    rows = []
    for i in range(0, len(values), 6):
        chunk = "  ".join(str(v) for v in values[i : i + 6])
        rows.append(f"{name}  {chunk}")
    return rows


def _curve_rows(name: str, h0: float, r: float, nu: float) -> list[str]:
    rows = [f"{name}  0.0  {h0!r}"]
    for q in (1000.0, 2000.0):
        rows.append(f"{name}  {q!r}  {h0 - r * q**nu!r}")
    return rows


def three_node_inp(init_level: float = 25.0, base_demand: float = 300.0) -> str:
    """Reservoir, pump, demand junction, pipe, elevated tank.

    The default tank starts at 905 ft against a 910 ft safe level, so the
    controller has to lift it. init_level=45 starts it at 925 ft with a
    20 ft buffer above the safe level.
    """
    lines = [
        "[TITLE]",
        "three node single zone system",
        "",
        "[JUNCTIONS]",
        ";id  elev  demand  pattern",
        f"J2  650.0  {base_demand!r}  DIURNAL",
        "",
        "[RESERVOIRS]",
        "R1  700.0",
        "",
        "[TANKS]",
        ";id  elev  init  min  max  diameter",
        f"T3  880.0  {init_level!r}  10.0  50.0  36.0",
        "",
        "[PIPES]",
        ";id  node1  node2  length  diam_in  roughness",
        "P1  J2  T3  5280.0  5.0  120.0",
        "",
        "[PUMPS]",
        "M1  R1  J2  HEAD HC1  SPEED 1.0",
        "",
        "[VALVES]",
        "",
        "[PATTERNS]",
        *_pattern_rows("DIURNAL", DIURNAL_24),
        "",
        *_pattern_rows("PRICE", PRICE_24),
        "",
        "[CURVES]",
        *_curve_rows("HC1", 740.0, -8.382e-5, 1.94),
        "",
        "[SAFEHEADS]",
        "T3  910.0",
        "",
        "[PUMPTANKS]",
        "M1  T3",
        "",
        "[ENERGY]",
        "GLOBAL EFFIC 75.0",
        "GLOBAL PRICE 0.12",
        "GLOBAL PATTERN PRICE",
        "",
        "[OPTIONS]",
        "HEADLOSS H-W",
        "UNITS GPM",
        "",
        "[END]",
    ]
    return "\n".join(lines) + "\n"


def three_node(init_level: float = 25.0, base_demand: float = 300.0) -> Network:
    return parse_inp(three_node_inp(init_level, base_demand))


def eight_node_inp() -> str:
    """Two pressure zones off one reservoir, with a transfer pipe and a GPV.

    Zone A (pump M1, tank T7) sits near 860 ft; zone B (pump M2, tank T8)
    near 1160 ft. P3 transfers from the high zone down to the low one and W1
    breaks pressure from the zone-B trunk to a mid-elevation junction.
    """
    lines = [
        "[TITLE]",
        "eight node two zone system",
        "",
        "[JUNCTIONS]",
        ";id  elev  demand  pattern",
        "J2  700.0  100.0  DIURNAL",
        "J3  900.0  100.0  DIURNAL",
        "J4  750.0  400.0  DIURNAL",
        "J5  1000.0  300.0  DIURNAL",
        "J6  800.0  200.0  DIURNAL",
        "",
        "[RESERVOIRS]",
        "R1  425.0",
        "",
        "[TANKS]",
        ";id  elev  init  min  max  diameter",
        "T7  800.0  58.9  43.9  75.9  40.0",
        "T8  1100.0  47.09  47.1  78.99  40.0",
        "",
        "[PIPES]",
        ";id  node1  node2  length  diam_in  roughness",
        "P1  J2  J4  2640.0  16.0  120.0",
        "P2  J3  J5  2640.0  16.0  120.0",
        "P3  J5  J4  5280.0  4.0  100.0",
        "P4  J4  T7  5280.0  5.0  120.0",
        "P5  J5  T8  5280.0  5.5  120.0",
        "P6  J5  J6  2640.0  10.0  110.0",
        "",
        "[PUMPS]",
        "M1  R1  J2  HEAD HC170  SPEED 1.0",
        "M2  R1  J3  HEAD HC172  SPEED 1.0",
        "",
        "[VALVES]",
        ";id  node1  node2  diam  type  setting",
        "W1  J3  J6  8.0  GPV  0.0079",
        "",
        "[PATTERNS]",
        *_pattern_rows("DIURNAL", DIURNAL_24),
        "",
        *_pattern_rows("PRICE", PRICE_24),
        "",
        "[CURVES]",
        *_curve_rows("HC170", 445.0, -1.947e-5, 2.28),
        *_curve_rows("HC172", 740.0, -8.382e-5, 1.94),
        "",
        "[SAFEHEADS]",
        "T7  854.0",
        "T8  1150.45",
        "",
        "[PUMPTANKS]",
        "M1  T7",
        "M2  T8",
        "",
        "[ENERGY]",
        "GLOBAL EFFIC 75.0",
        "GLOBAL PRICE 0.12",
        "GLOBAL PATTERN PRICE",
        "",
        "[OPTIONS]",
        "HEADLOSS H-W",
        "UNITS GPM",
        "",
        "[END]",
    ]
    return "\n".join(lines) + "\n"


def eight_node() -> Network:
    return parse_inp(eight_node_inp())


def district_system_inp(districts_per_zone: int = 4, grid: int = 4) -> str:
    """Large two-zone system with PRV-fed district subgrids.

    Each zone has a pump from the shared reservoir into a trunk main with a
    tank, plus `districts_per_zone` PRVs, each feeding a grid x grid mesh of
    demand junctions. The defaults give 2 + 2*4*(1+16) = 138 junctions,
    2 tanks, 2 pumps and 8 PRVs.
    """
    juncs: list[str] = []
    pipes: list[str] = []
    valves: list[str] = []
    n_pipe = 0
    n_valve = 0

    def add_junction(jid: str, elev: float, demand: float) -> None:
        juncs.append(f"{jid}  {elev!r}  {demand!r}  DIURNAL")

    def add_pipe(a: str, b: str, length: float, diam: float, rough: float) -> None:
        nonlocal n_pipe
        n_pipe += 1
        pipes.append(f"P{n_pipe}  {a}  {b}  {length!r}  {diam!r}  {rough!r}")

    def add_prv(a: str, b: str, setting: float) -> None:
        nonlocal n_valve
        n_valve += 1
        valves.append(f"V{n_valve}  {a}  {b}  8.0  PRV  {setting!r}")

    # zone trunks: pump -> trunk junction -> tank
    zones = [
        # (trunk id, trunk elev, tank id, tank elev, levels, district elev)
        ("A0", 700.0, "TA", 800.0, (58.9, 43.9, 75.9, 54.0), 650.0),
        ("B0", 1000.0, "TB", 1100.0, (47.09, 47.1, 78.99, 50.45), 950.0),
    ]
    for trunk, trunk_elev, _tank, _te, _lv, _de in zones:
        add_junction(trunk, trunk_elev, 50.0)

    # the trunk-to-tank main carries the headloss that the pump curve needs
    # to find a stable operating point at full speed
    trunk_mains = {"A0": (5280.0, 5.0, 120.0), "B0": (5280.0, 5.5, 120.0)}
    for zi, (trunk, trunk_elev, tank, tank_elev, levels, delev) in enumerate(zones):
        add_pipe(trunk, tank, *trunk_mains[trunk])
        for d in range(districts_per_zone):
            head = f"{trunk}D{d}"  # district inlet junction behind the PRV
            add_junction(head, delev, 5.0)
            add_prv(trunk, head, 60.0)
            prev_row: list[str] = []
            for gy in range(grid):
                row = []
                for gx in range(grid):
                    jid = f"{trunk}D{d}N{gy}{gx}"
                    add_junction(jid, delev - 5.0 * gy, 8.0)
                    row.append(jid)
                    if gx > 0:
                        add_pipe(row[gx - 1], jid, 800.0, 8.0, 110.0)
                    if prev_row:
                        add_pipe(prev_row[gx], jid, 800.0, 8.0, 110.0)
                prev_row = row
                if gy == 0:
                    add_pipe(head, row[0], 600.0, 10.0, 110.0)

    lines = [
        "[TITLE]",
        "two zone district system",
        "",
        "[JUNCTIONS]",
        *juncs,
        "",
        "[RESERVOIRS]",
        "R1  425.0",
        "",
        "[TANKS]",
    ]
    for trunk, _elev, tank, tank_elev, levels, _de in zones:
        init, lo, hi, safe_lv = levels
        lines.append(f"{tank}  {tank_elev!r}  {init!r}  {lo!r}  {hi!r}  40.0")
    lines += [
        "",
        "[PIPES]",
        *pipes,
        "",
        "[PUMPS]",
        "M1  R1  A0  HEAD HC170  SPEED 1.0",
        "M2  R1  B0  HEAD HC172  SPEED 1.0",
        "",
        "[VALVES]",
        *valves,
        "",
        "[PATTERNS]",
        *_pattern_rows("DIURNAL", DIURNAL_24),
        "",
        *_pattern_rows("PRICE", PRICE_24),
        "",
        "[CURVES]",
        *_curve_rows("HC170", 445.0, -1.947e-5, 2.28),
        *_curve_rows("HC172", 740.0, -8.382e-5, 1.94),
        "",
        "[SAFEHEADS]",
    ]
    for trunk, _elev, tank, tank_elev, levels, _de in zones:
        lines.append(f"{tank}  {tank_elev + levels[3]!r}")
    lines += [
        "",
        "[PUMPTANKS]",
        "M1  TA",
        "M2  TB",
        "",
        "[ENERGY]",
        "GLOBAL EFFIC 75.0",
        "GLOBAL PRICE 0.12",
        "GLOBAL PATTERN PRICE",
        "",
        "[OPTIONS]",
        "HEADLOSS H-W",
        "UNITS GPM",
        "",
        "[END]",
    ]
    return "\n".join(lines) + "\n"


def district_system(districts_per_zone: int = 4, grid: int = 4) -> Network:
    return parse_inp(district_system_inp(districts_per_zone, grid))
