"""Log-space window model: one geometric program per controller iteration.

The change of variables xhat = b**x maps heads and flows onto positive
quantities. Mass-balance rows transcribe exactly into monomial equalities;
the pipe, pump and valve head relations become monomials whose constants
freeze the nonlinear factor at the previous iterate. Rebuilding the
constants and re-solving until the iterates settle is the controller's job.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .dae import DaeMatrices, TrajectoryVector
from .gp import GpError, GpProblem, Monomial, Posynomial
from .hydraulics import next_valve_status
from .network import Network, ValveKind, ValveStatus

log = logging.getLogger(__name__)

# cap on |exponent| handed to base**exponent; past this the hat values leave
# the range the solver can carry accurately, so clamp and complain
EXP_CLAMP = 5000.0

# a GPV can throttle but never seal, so its openness keeps a small floor
GPV_MIN_OPENNESS = 1e-6

# variable-name prefixes making up the window state vector; the safety and
# smoothness auxiliaries (z, p) are deliberately not part of it
XI_CLASSES = ("x", "l", "q", "s", "o")


@dataclass(frozen=True)
class GpConfig:
    """Knobs shared by the window transform and the controller loop."""

    base: float = 1.005
    horizon: int = 6
    dt: float = 1.0
    omega: float = 1e-4      # weight of the smoothness objective
    alpha: float = 0.0       # demanded floor for each smoothness term; 0 = off
    threshold: float = 0.5   # iterate-distance stop for the outer loop
    max_iter: int = 10

    def __post_init__(self):
        if self.base <= 1.0:
            raise ValueError(f"base must exceed 1, got {self.base}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {self.horizon}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.omega < 0 or self.alpha < 0:
            raise ValueError("objective weights must be nonnegative")
        if self.threshold <= 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")


def _clamped(exponent: float) -> float:
    if abs(exponent) > EXP_CLAMP:
        log.warning("exponent %.6g clamped to +/-%g", exponent, EXP_CLAMP)
        return math.copysign(EXP_CLAMP, exponent)
    return exponent


def encode(value, base: float):
    """Map a physical value (or array) to its hat form base**value."""
    arr = np.asarray(value, dtype=float)
    if np.any(np.abs(arr) > EXP_CLAMP):
        worst = float(arr.flat[int(np.argmax(np.abs(arr)))])
        log.warning("encode clamped %.6g to +/-%g", worst, EXP_CLAMP)
        arr = np.clip(arr, -EXP_CLAMP, EXP_CLAMP)
    out = np.power(base, arr)
    return float(out) if np.isscalar(value) or out.ndim == 0 else out


def decode(hat, base: float):
    """Invert encode: log_base of a positive hat value (or array)."""
    arr = np.asarray(hat, dtype=float)
    if np.any(arr <= 0):
        raise ValueError("hat values must be positive")
    out = np.log(arr) / math.log(base)
    return float(out) if np.isscalar(hat) or out.ndim == 0 else out


# ---------------------------------------------------------------------------
# per-component constants frozen at the previous iterate


def pipe_constant(q_prev: float, resistance: float, exponent: float,
                  base: float) -> float:
    """Coefficient of the pipe head row: base**(q*(R|q|^(mu-1) - 1)).

    At q_prev = 0 the exponent vanishes and the constant is exactly 1.
    """
    if resistance <= 0:
        raise ValueError(f"resistance must be positive, got {resistance}")
    e = q_prev * (resistance * abs(q_prev) ** (exponent - 1.0) - 1.0)
    return base ** _clamped(e)


def pump_constants(q_prev: float, s_prev: float, shutoff_head: float,
                   curve_coeff: float, curve_exp: float) -> tuple[float, float]:
    """The (speed, flow) exponents of the pump head row.

    Only running pumps have a head row, so the previous iterate must carry a
    positive speed; a zero flow is allowed and degenerates to the shutoff
    relation.
    """
    if s_prev <= 0:
        raise ValueError(f"pump speed must be positive, got {s_prev}")
    if q_prev < 0:
        raise ValueError(f"pump flow must be nonnegative, got {q_prev}")
    c1 = -s_prev * shutoff_head
    c2 = curve_coeff * q_prev ** (curve_exp - 1.0) * s_prev ** (2.0 - curve_exp)
    return c1, c2


def gpv_constant(q_prev: float, resistance: float, exponent: float) -> float:
    """The openness exponent of a GPV head row: q*(R|q|^(mu-1) - 1).

    At openness 1 the row collapses onto the pipe form with the same
    resistance, which anchors the sign conventions.
    """
    if resistance <= 0:
        raise ValueError(f"resistance must be positive, got {resistance}")
    return q_prev * (resistance * abs(q_prev) ** (exponent - 1.0) - 1.0)


@dataclass
class IterateConstants:
    """Everything the next GP build freezes from the previous iterate."""

    pipe_C: np.ndarray      # (H, n_p) pipe row coefficients
    pump_C1: np.ndarray     # (H, n_m) speed exponents; 0 where the pump is off
    pump_C2: np.ndarray     # (H, n_m) flow exponents; 0 where the pump is off
    gpv_C: np.ndarray       # (H, n_g) openness exponents
    delta_u: np.ndarray     # (H, n_u) controllable flow changes, physical units
    below_safe: np.ndarray  # (H, n_t) bool, end-of-step head at or under safe

    @property
    def horizon(self) -> int:
        return self.pipe_C.shape[0]


def build_iterate_constants(
    net: Network,
    traj: TrajectoryVector,
    u_prev: np.ndarray,
    cfg: GpConfig,
    pump_on=None,
    first_pass: bool = False,
) -> IterateConstants:
    """Freeze row constants and branch conditions at a window iterate.

    `u_prev` holds the controllable flows realized just before the window,
    used for the first flow-change entry. `pump_on` masks (step, pump) slots
    whose head rows will not be built; their constants are left at zero.
    `first_pass` zeroes the frozen flow-change exponents: the flat initial
    guess carries no flow-change information, so the first refinement pass
    runs without smoothness pressure.
    """
    tanks = net.sorted_tanks()
    pipes = net.sorted_pipes()
    pumps = net.sorted_pumps()
    valves = net.sorted_valves()
    gpvs = [(i, v) for i, v in enumerate(valves) if v.kind is ValveKind.GPV]
    H = traj.horizon
    n_u = traj.u.shape[1]
    if len(u_prev) != n_u:
        raise ValueError(f"u_prev has {len(u_prev)} entries, need {n_u}")
    if pump_on is None:
        pump_on = np.ones((H, len(pumps)), dtype=bool)

    pipe_C = np.empty((H, len(pipes)))
    pump_C1 = np.zeros((H, len(pumps)))
    pump_C2 = np.zeros((H, len(pumps)))
    gpv_C = np.empty((H, len(gpvs)))
    delta_u = np.empty((H, n_u))
    below = np.empty((H, len(tanks)), dtype=bool)

    for k in range(H):
        for i, pipe in enumerate(pipes):
            pipe_C[k, i] = pipe_constant(traj.v[k][i], pipe.resistance,
                                         pipe.exponent, cfg.base)
        for i, pump in enumerate(pumps):
            if not pump_on[k][i]:
                continue
            q = max(0.0, float(traj.u[k][i]))
            s = float(traj.s[k][i])
            if s < 1e-3:
                # an iterate can park a running pump at the s=0 box corner
                # while still carrying flow; a head row rebuilt there caps
                # the deliverable gain near zero and can empty the feasible
                # set, so the slot re-anchors at the initialization speed
                s = 1.0
            pump_C1[k, i], pump_C2[k, i] = pump_constants(
                q, s, pump.shutoff_head, pump.curve_coeff, pump.curve_exp)
        for i, (off, gpv) in enumerate(gpvs):
            q = float(traj.u[k][len(pumps) + off])
            gpv_C[k, i] = gpv_constant(q, gpv.resistance, gpv.exponent)
        if first_pass:
            delta_u[k] = 0.0
        else:
            prev = u_prev if k == 0 else traj.u[k - 1]
            delta_u[k] = traj.u[k] - prev
        for i, tank in enumerate(tanks):
            below[k, i] = traj.x[k][i] <= tank.safe_head

    out = IterateConstants(pipe_C=pipe_C, pump_C1=pump_C1, pump_C2=pump_C2,
                           gpv_C=gpv_C, delta_u=delta_u, below_safe=below)
    for arr in (out.pipe_C, out.pump_C1, out.pump_C2, out.gpv_C, out.delta_u):
        if arr.size and not np.all(np.isfinite(arr)):
            raise GpError("non-finite iterate constant; iterate out of range")
    return out


def initial_iterate(
    net: Network,
    forecast: np.ndarray,
    x0: np.ndarray,
    l0: np.ndarray,
) -> TrajectoryVector:
    """Flat first guess: the window-average total demand split evenly over
    all links in the positive direction, actuators fully on, heads held at
    the current state.

    The same flow value fills every step so the guess carries no flow
    changes of its own; the first refinement pass then starts with inert
    smoothness exponents.
    """
    c = net.counts
    H = forecast.shape[0]
    n_links = c.n_p + c.n_m + c.n_w
    split = float(np.sum(forecast)) / (max(1, n_links) * max(1, H))
    u = np.full((H, c.n_m + c.n_w), split)
    v = np.full((H, c.n_p), split)
    return TrajectoryVector(
        x0=np.asarray(x0, dtype=float).copy(),
        x=np.tile(np.asarray(x0, dtype=float), (H, 1)),
        l=np.tile(np.asarray(l0, dtype=float), (H, 1)),
        u=u,
        v=v,
        s=np.ones((H, c.n_m)),
        o=np.ones((H, c.n_g)),
    )


def relax_iterate(
    prev: TrajectoryVector,
    sol: TrajectoryVector,
    weight: float = 0.5,
) -> TrajectoryVector:
    """Blend a fresh window solution into the running iterate.

    Refreezing the row constants at each raw solution makes the loop orbit:
    the smoothness exponents are frozen from the last flow changes, so each
    solve is rewarded for undoing the move the previous one made, and from
    a cold start the solves bounce between mirrored profiles instead of
    settling. The half-step average cancels a two-point orbit outright and
    leaves a settled iterate exactly where it is, so the constants converge
    to the same values the raw loop would certify at its fixed point.
    """
    if not 0.0 < weight <= 1.0:
        raise ValueError(f"weight must be in (0, 1], got {weight}")
    w = float(weight)

    def mix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return (1.0 - w) * a + w * b

    return TrajectoryVector(
        x0=sol.x0.copy(),
        x=mix(prev.x, sol.x),
        l=mix(prev.l, sol.l),
        u=mix(prev.u, sol.u),
        v=mix(prev.v, sol.v),
        s=mix(prev.s, sol.s),
        o=mix(prev.o, sol.o),
    )


# ---------------------------------------------------------------------------
# window GP assembly


def _vn(cls: str, cid: str, k: int) -> str:
    return f"{cls}:{cid}:{k}"


def build_gp_mpc(
    net: Network,
    mats: DaeMatrices,
    forecast: np.ndarray,
    x0: np.ndarray,
    u_prev: np.ndarray,
    consts: IterateConstants,
    pump_on: np.ndarray,
    statuses: list,
    cfg: GpConfig,
) -> GpProblem:
    """Assemble the window GP for one controller iteration.

    Variables are named class:id:step with the classes in XI_CLASSES plus
    the auxiliaries z (safety) and p (smoothness). Step k covers the k-th
    hour of the window; x:*:k is the tank head at the END of that hour, all
    other classes hold during it. Reservoir heads and the entering tank
    heads x0 fold into row coefficients instead of becoming variables.

    Pumps masked off in `pump_on` get their speed and flow pinned to the
    off point instead of a head row; closed PRVs/FCVs get their flow
    pinned. Pinned variables get no range rows, everything else gets its
    box from the component data.
    """
    tanks = net.sorted_tanks()
    juncs = net.sorted_junctions()
    pipes = net.sorted_pipes()
    pumps = net.sorted_pumps()
    valves = net.sorted_valves()
    ctrl = pumps + valves
    gpv_idx = {v.id: i for i, v in
               enumerate([w for w in valves if w.kind is ValveKind.GPV])}
    H = consts.horizon
    b = cfg.base

    if forecast.shape != (H, len(juncs)):
        raise ValueError(f"forecast shape {forecast.shape}, "
                         f"need {(H, len(juncs))}")
    if len(x0) != len(tanks):
        raise ValueError(f"x0 has {len(x0)} entries, need {len(tanks)}")
    if len(u_prev) != len(ctrl):
        raise ValueError(f"u_prev has {len(u_prev)} entries, need {len(ctrl)}")
    pump_on = np.asarray(pump_on, dtype=bool)
    if pump_on.shape != (H, len(pumps)):
        raise ValueError(f"pump_on shape {pump_on.shape}, "
                         f"need {(H, len(pumps))}")
    if len(statuses) != H:
        raise ValueError(f"got {len(statuses)} status maps, need {H}")

    p = GpProblem()
    for k in range(H):
        for t in tanks:
            p.declare_variable(_vn("x", t.id, k))
        for j in juncs:
            p.declare_variable(_vn("l", j.id, k))
        for link in pipes + list(ctrl):
            p.declare_variable(_vn("q", link.id, k))
        for m in pumps:
            p.declare_variable(_vn("s", m.id, k))
        for v in valves:
            if v.kind is ValveKind.GPV:
                p.declare_variable(_vn("o", v.id, k))
        for t in tanks:
            p.declare_variable(_vn("z", t.id, k))
        for e in ctrl:
            p.declare_variable(_vn("p", e.id, k))

    def bpow(e: float) -> float:
        return b ** _clamped(e)

    def head_pair(link, k: int):
        """Exponent dict and folded constant for h_from - h_to at step k."""
        exps: dict[str, float] = {}
        const = 0.0
        for node_id, sign in ((link.from_node, 1.0), (link.to_node, -1.0)):
            if node_id in mats.tank_index:
                ti = mats.tank_index[node_id]
                if k == 0:
                    const += sign * x0[ti]
                else:
                    nm = _vn("x", node_id, k - 1)
                    exps[nm] = exps.get(nm, 0.0) + sign
            elif node_id in mats.junction_index:
                nm = _vn("l", node_id, k)
                exps[nm] = exps.get(nm, 0.0) + sign
            else:
                const += sign * mats.reservoir_heads[mats.reservoir_index[node_id]]
        return exps, const

    for k in range(H):
        # tank level updates
        for i, t in enumerate(tanks):
            exps = {_vn("x", t.id, k): 1.0}
            const = 0.0
            if k == 0:
                const -= x0[i]
            else:
                exps[_vn("x", t.id, k - 1)] = -1.0
            for col, e in enumerate(ctrl):
                coef = mats.B_u[i, col]
                if coef:
                    exps[_vn("q", e.id, k)] = -coef
            for col, pipe in enumerate(pipes):
                coef = mats.B_v[i, col]
                if coef:
                    exps[_vn("q", pipe.id, k)] = -coef
            p.add_equality(Monomial(bpow(const), exps), f"tank:{t.id}:{k}")

        # junction balance
        for j_i, j in enumerate(juncs):
            exps = {}
            for col, e in enumerate(ctrl):
                coef = mats.E_u[j_i, col]
                if coef:
                    exps[_vn("q", e.id, k)] = coef
            for col, pipe in enumerate(pipes):
                coef = mats.E_v[j_i, col]
                if coef:
                    exps[_vn("q", pipe.id, k)] = coef
            p.add_equality(Monomial(bpow(-forecast[k][j_i]), exps),
                           f"junction:{j.id}:{k}")

        # pipe head rows
        for i, pipe in enumerate(pipes):
            exps, const = head_pair(pipe, k)
            exps[_vn("q", pipe.id, k)] = exps.get(_vn("q", pipe.id, k), 0.0) - 1.0
            p.add_equality(Monomial(bpow(const) / consts.pipe_C[k, i], exps),
                           f"pipe:{pipe.id}:{k}")

        # pump head rows or off pins
        for i, m in enumerate(pumps):
            if pump_on[k][i]:
                exps, const = head_pair(m, k)
                exps[_vn("s", m.id, k)] = -consts.pump_C1[k, i]
                exps[_vn("q", m.id, k)] = (exps.get(_vn("q", m.id, k), 0.0)
                                           - consts.pump_C2[k, i])
                p.add_equality(Monomial(bpow(const), exps), f"pump:{m.id}:{k}")
                gain_exps, gain_const = head_pair(m, k)
                p.add_inequality(Monomial(bpow(gain_const), gain_exps),
                                 f"pump-gain:{m.id}:{k}")
            else:
                p.add_equality(Monomial(1.0, {_vn("q", m.id, k): 1.0}),
                               f"pump-off-q:{m.id}:{k}")
                p.add_equality(Monomial(1.0, {_vn("s", m.id, k): 1.0}),
                               f"pump-off-s:{m.id}:{k}")

        # valve rows by kind and status
        for v in valves:
            if v.kind is ValveKind.GPV:
                exps, const = head_pair(v, k)
                exps[_vn("o", v.id, k)] = -consts.gpv_C[k, gpv_idx[v.id]]
                exps[_vn("q", v.id, k)] = exps.get(_vn("q", v.id, k), 0.0) - 1.0
                p.add_equality(Monomial(bpow(const), exps), f"gpv:{v.id}:{k}")
                continue
            st = statuses[k][v.id]
            if st is ValveStatus.CLOSED:
                p.add_equality(Monomial(1.0, {_vn("q", v.id, k): 1.0}),
                               f"valve-closed:{v.id}:{k}")
            elif st is ValveStatus.OPEN:
                exps, const = head_pair(v, k)
                p.add_equality(Monomial(bpow(const), exps),
                               f"valve-open:{v.id}:{k}")
            elif v.kind is ValveKind.PRV:
                if v.to_node not in mats.junction_index:
                    raise GpError(f"PRV {v.id} must discharge to a junction")
                p.add_equality(
                    Monomial(bpow(-v.h_set), {_vn("l", v.to_node, k): 1.0}),
                    f"prv-active:{v.id}:{k}")
            else:
                p.add_equality(
                    Monomial(bpow(-v.q_set), {_vn("q", v.id, k): 1.0}),
                    f"fcv-active:{v.id}:{k}")

        # safety branch per tank
        for i, t in enumerate(tanks):
            if consts.below_safe[k][i]:
                p.add_equality(
                    Monomial(bpow(-t.safe_head),
                             {_vn("z", t.id, k): 1.0, _vn("x", t.id, k): 1.0}),
                    f"safety:{t.id}:{k}")
                p.add_inequality(Monomial(1.0, {_vn("z", t.id, k): -1.0}),
                                 f"safety-floor:{t.id}:{k}")
            else:
                p.add_equality(Monomial(1.0, {_vn("z", t.id, k): 1.0}),
                               f"safety-pin:{t.id}:{k}")

        # smoothness links
        for i, e in enumerate(ctrl):
            exps = {_vn("p", e.id, k): 1.0, _vn("q", e.id, k): -1.0}
            if k == 0:
                coeff = bpow(u_prev[i])
            else:
                coeff = 1.0
                exps[_vn("q", e.id, k - 1)] = exps.get(_vn("q", e.id, k - 1), 0.0) + 1.0
            p.add_equality(Monomial(coeff, exps), f"smooth:{e.id}:{k}")

        # range rows, skipping anything pinned above
        for t in tanks:
            nm = _vn("x", t.id, k)
            p.add_inequality(Monomial(bpow(t.min_head), {nm: -1.0}),
                             f"box-x-lo:{t.id}:{k}")
            p.add_inequality(Monomial(bpow(-t.max_head), {nm: 1.0}),
                             f"box-x-hi:{t.id}:{k}")
        for j in juncs:
            p.add_inequality(Monomial(bpow(j.elevation), {_vn("l", j.id, k): -1.0}),
                             f"box-l:{j.id}:{k}")
        for pipe in pipes:
            nm = _vn("q", pipe.id, k)
            p.add_inequality(Monomial(bpow(pipe.q_min), {nm: -1.0}),
                             f"box-q-lo:{pipe.id}:{k}")
            p.add_inequality(Monomial(bpow(-pipe.q_max), {nm: 1.0}),
                             f"box-q-hi:{pipe.id}:{k}")
        for i, m in enumerate(pumps):
            if not pump_on[k][i]:
                continue
            nm = _vn("q", m.id, k)
            p.add_inequality(Monomial(bpow(m.q_min), {nm: -1.0}),
                             f"box-q-lo:{m.id}:{k}")
            p.add_inequality(Monomial(bpow(-m.q_max), {nm: 1.0}),
                             f"box-q-hi:{m.id}:{k}")
            sn = _vn("s", m.id, k)
            p.add_inequality(Monomial(1.0, {sn: -1.0}), f"box-s-lo:{m.id}:{k}")
            p.add_inequality(Monomial(bpow(-m.max_speed), {sn: 1.0}),
                             f"box-s-hi:{m.id}:{k}")
        for v in valves:
            if v.kind is not ValveKind.GPV and statuses[k][v.id] is ValveStatus.CLOSED:
                continue
            nm = _vn("q", v.id, k)
            p.add_inequality(Monomial(bpow(v.q_min), {nm: -1.0}),
                             f"box-q-lo:{v.id}:{k}")
            p.add_inequality(Monomial(bpow(-v.q_max), {nm: 1.0}),
                             f"box-q-hi:{v.id}:{k}")
            if v.kind is ValveKind.GPV:
                on = _vn("o", v.id, k)
                p.add_inequality(Monomial(bpow(GPV_MIN_OPENNESS), {on: -1.0}),
                                 f"box-o-lo:{v.id}:{k}")
                p.add_inequality(Monomial(bpow(-1.0), {on: 1.0}),
                                 f"box-o-hi:{v.id}:{k}")

        if cfg.alpha > 0:
            exps = {}
            for i, e in enumerate(ctrl):
                du = consts.delta_u[k][i]
                if du:
                    exps[_vn("p", e.id, k)] = -du
            p.add_inequality(Monomial(cfg.alpha, exps), f"smooth-floor:{k}")

    terms = []
    for k in range(H):
        if np.any(consts.below_safe[k]):
            terms.append(Monomial(1.0, {_vn("z", t.id, k): 1.0 for t in tanks}))
        exps = {}
        for i, e in enumerate(ctrl):
            du = consts.delta_u[k][i]
            if du:
                exps[_vn("p", e.id, k)] = du
        terms.append(Monomial(cfg.omega, exps))
    p.set_objective(Posynomial(tuple(terms)))
    return p


def xi_dimension(net: Network, horizon: int) -> int:
    """Size of the window state vector (classes in XI_CLASSES)."""
    c = net.counts
    return horizon * (c.n_t + c.n_j + c.n_g + c.n_w + c.n_p + 2 * c.n_m)


def xi_values(problem: GpProblem, values: dict[str, float]) -> np.ndarray:
    """The window state entries of a solution, in declaration order."""
    return np.array([values[nm] for nm in problem.variables
                     if nm.split(":", 1)[0] in XI_CLASSES])


def iterate_warm_start(
    net: Network,
    traj: TrajectoryVector,
    u_prev: np.ndarray,
    cfg: GpConfig,
    pump_on: np.ndarray,
    consts: IterateConstants,
) -> dict[str, float]:
    """Encode an iterate as solver start values, keyed like the built problem.

    Feeding the running iterate back to the solver does two jobs: it skips
    most of the feasibility search, and it anchors the solution on whatever
    slack the objective leaves, so a settled iterate stays put instead of
    wandering across an indifferent face.
    """
    b = cfg.base
    tanks = net.sorted_tanks()
    juncs = net.sorted_junctions()
    pipes = net.sorted_pipes()
    pumps = net.sorted_pumps()
    valves = net.sorted_valves()
    H = traj.horizon
    out: dict[str, float] = {}
    for k in range(H):
        for i, t in enumerate(tanks):
            out[_vn("x", t.id, k)] = b ** _clamped(traj.x[k, i])
        for j_i, j in enumerate(juncs):
            out[_vn("l", j.id, k)] = b ** _clamped(traj.l[k, j_i])
        for i, pipe in enumerate(pipes):
            out[_vn("q", pipe.id, k)] = b ** _clamped(traj.v[k, i])
        for i, m in enumerate(pumps):
            if pump_on[k][i]:
                out[_vn("q", m.id, k)] = b ** _clamped(traj.u[k, i])
                out[_vn("s", m.id, k)] = b ** _clamped(traj.s[k, i])
            else:
                out[_vn("q", m.id, k)] = 1.0
                out[_vn("s", m.id, k)] = 1.0
        gpv_i = 0
        for i, v in enumerate(valves):
            out[_vn("q", v.id, k)] = b ** _clamped(traj.u[k, len(pumps) + i])
            if v.kind is ValveKind.GPV:
                out[_vn("o", v.id, k)] = b ** _clamped(traj.o[k, gpv_i])
                gpv_i += 1
        for i, t in enumerate(tanks):
            if consts.below_safe[k][i]:
                out[_vn("z", t.id, k)] = max(
                    1.0, b ** _clamped(t.safe_head - traj.x[k, i]))
            else:
                out[_vn("z", t.id, k)] = 1.0
        for i, e in enumerate(pumps + valves):
            prev = u_prev[i] if k == 0 else traj.u[k - 1, i]
            out[_vn("p", e.id, k)] = b ** _clamped(traj.u[k, i] - prev)
    return out


def prox_scales(net: Network, consts: IterateConstants) -> dict[str, float]:
    """Tie-break metric stretch for the actuator variables.

    A unit of speed or openness spans a sliver of log space yet swings the
    adjacent head row by its full exponent, so under a uniform metric the
    solver parks those variables anywhere. Scaling them by the frozen row
    exponent makes the anchor hold actuators and heads equally hard.
    """
    pumps = net.sorted_pumps()
    gpvs = [v for v in net.sorted_valves() if v.kind is ValveKind.GPV]
    out: dict[str, float] = {}
    for k in range(consts.horizon):
        for i, m in enumerate(pumps):
            out[_vn("s", m.id, k)] = max(abs(float(consts.pump_C1[k, i])),
                                         m.shutoff_head * 0.1)
        for i, v in enumerate(gpvs):
            out[_vn("o", v.id, k)] = abs(float(consts.gpv_C[k, i]))
    return out


def decode_solution(
    net: Network,
    values: dict[str, float],
    x0: np.ndarray,
    pump_on: np.ndarray,
    statuses: list,
    cfg: GpConfig,
) -> TrajectoryVector:
    """Map a solved window back to physical units.

    Slots pinned in the build come back exact: off pumps as speed and flow
    zero, closed valves as flow zero, bypassing the log round trip.
    """
    tanks = net.sorted_tanks()
    juncs = net.sorted_junctions()
    pipes = net.sorted_pipes()
    pumps = net.sorted_pumps()
    valves = net.sorted_valves()
    gpvs = [v for v in valves if v.kind is ValveKind.GPV]
    H = len(statuses)
    pump_on = np.asarray(pump_on, dtype=bool)

    def dec(cls: str, cid: str, k: int) -> float:
        return decode(values[_vn(cls, cid, k)], cfg.base)

    x = np.array([[dec("x", t.id, k) for t in tanks] for k in range(H)])
    l = np.array([[dec("l", j.id, k) for j in juncs] for k in range(H)])
    v_flows = np.array([[dec("q", pp.id, k) for pp in pipes] for k in range(H)])
    u = np.empty((H, len(pumps) + len(valves)))
    s = np.empty((H, len(pumps)))
    o = np.array([[dec("o", g.id, k) for g in gpvs] for k in range(H)])
    for k in range(H):
        for i, m in enumerate(pumps):
            if pump_on[k][i]:
                u[k, i] = dec("q", m.id, k)
                s[k, i] = dec("s", m.id, k)
            else:
                u[k, i] = 0.0
                s[k, i] = 0.0
        for i, v in enumerate(valves):
            col = len(pumps) + i
            if v.kind is not ValveKind.GPV and statuses[k][v.id] is ValveStatus.CLOSED:
                u[k, col] = 0.0
            else:
                u[k, col] = dec("q", v.id, k)
    return TrajectoryVector(
        x0=np.asarray(x0, dtype=float).copy(),
        x=x.reshape(H, len(tanks)),
        l=l.reshape(H, len(juncs)),
        u=u,
        v=v_flows.reshape(H, len(pipes)),
        s=s,
        o=o.reshape(H, len(gpvs)),
    )


def update_valve_statuses(
    net: Network,
    mats: DaeMatrices,
    traj: TrajectoryVector,
    initial: dict[str, ValveStatus],
) -> list[dict[str, ValveStatus]]:
    """Roll the PRV/FCV status logic along a window iterate.

    Step k's statuses come from applying one transition to step k-1's (the
    window-entry statuses for k=0) at the iterate's heads and flows.
    """
    valves = net.sorted_valves()
    pumps = net.sorted_pumps()
    out: list[dict[str, ValveStatus]] = []
    prev = dict(initial)
    for k in range(traj.horizon):
        x_in = traj.tank_heads_entering(k)

        def head(node_id: str) -> float:
            if node_id in mats.tank_index:
                return float(x_in[mats.tank_index[node_id]])
            if node_id in mats.junction_index:
                return float(traj.l[k][mats.junction_index[node_id]])
            return float(mats.reservoir_heads[mats.reservoir_index[node_id]])

        cur = {}
        for i, v in enumerate(valves):
            q = float(traj.u[k][len(pumps) + i])
            cur[v.id] = next_valve_status(v, prev[v.id], head(v.from_node),
                                          head(v.to_node), q)
        out.append(cur)
        prev = cur
    return out
