"""Geometric-programming MPC for drinking-water distribution networks.

The package models a pressurized network (tanks, junctions, reservoirs,
pipes, variable-speed pumps, PRV/FCV/GPV valves) as a discrete-time
difference-algebraic system, convexifies it around the previous iterate as
a geometric program, and closes the loop with a receding-horizon controller
whose pump schedules come from a binary search over pre-emptive off slots.
A rule-based controller and an exact hydraulic simulator serve as the
benchmark and the plant.
"""

from .network import (
    DemandNoise,
    DemandPattern,
    Junction,
    Network,
    Pipe,
    Pump,
    Reservoir,
    Tank,
    Valve,
    ValveKind,
    ValveStatus,
    parse_inp,
    parse_inp_file,
    resolve_demand,
    structurally_equal,
    write_inp,
)

__all__ = [
    "DemandNoise",
    "DemandPattern",
    "Junction",
    "Network",
    "Pipe",
    "Pump",
    "Reservoir",
    "Tank",
    "Valve",
    "ValveKind",
    "ValveStatus",
    "parse_inp",
    "parse_inp_file",
    "resolve_demand",
    "structurally_equal",
    "write_inp",
]

__version__ = "0.1.0"
