"""Difference-algebraic form of the network over a control window.

Tank dynamics are the difference part, junction mass balance and link head
equations the algebraic part:

    x(k+1) = A x(k) + B_u u(k) + B_v v(k)
    0      = E_u u(k) + E_v v(k) + E_d d(k)
    head rows: E_x. x(k) + E_l. l(k) + E_r. r  =  component loss at q(k)

with x tank heads, l junction heads, r fixed reservoir heads, u the
controllable flows (pumps then valves), v pipe flows. All blocks use
id-sorted ordering so column/row meanings are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .hydraulics import CUFT_PER_GPM_HR, SPEED_OFF, gpv_headloss, pipe_headloss, pump_headgain
from .network import Network, ValveKind, ValveStatus


@dataclass
class DaeMatrices:
    dt: float
    A: np.ndarray        # n_t x n_t
    B_u: np.ndarray      # n_t x (n_m + n_w)
    B_v: np.ndarray      # n_t x n_p
    E_u: np.ndarray      # n_j x (n_m + n_w)
    E_v: np.ndarray      # n_j x n_p
    E_d: np.ndarray      # n_j x n_j
    E_x1: np.ndarray     # n_p x n_t   pipe head rows
    E_l1: np.ndarray     # n_p x n_j
    E_r1: np.ndarray     # n_p x n_r
    E_x2: np.ndarray     # n_m x n_t   pump head rows
    E_l2: np.ndarray     # n_m x n_j
    E_r2: np.ndarray     # n_m x n_r
    E_x3: np.ndarray     # n_w x n_t   valve head rows
    E_l3: np.ndarray     # n_w x n_j
    E_r3: np.ndarray     # n_w x n_r
    tank_index: dict[str, int] = field(default_factory=dict)
    junction_index: dict[str, int] = field(default_factory=dict)
    reservoir_index: dict[str, int] = field(default_factory=dict)
    pipe_index: dict[str, int] = field(default_factory=dict)
    pump_index: dict[str, int] = field(default_factory=dict)
    valve_index: dict[str, int] = field(default_factory=dict)
    u_index: dict[str, int] = field(default_factory=dict)
    reservoir_heads: np.ndarray = field(default_factory=lambda: np.zeros(0))


def build_dae(net: Network, dt: float = 1.0) -> DaeMatrices:
    """Assemble the constant matrices of the window model."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    tanks = net.sorted_tanks()
    juncs = net.sorted_junctions()
    reservoirs = net.sorted_reservoirs()
    pipes = net.sorted_pipes()
    pumps = net.sorted_pumps()
    valves = net.sorted_valves()

    t_idx = {t.id: i for i, t in enumerate(tanks)}
    j_idx = {j.id: i for i, j in enumerate(juncs)}
    r_idx = {r.id: i for i, r in enumerate(reservoirs)}
    n_t, n_j, n_r = len(tanks), len(juncs), len(reservoirs)
    n_p, n_m, n_w = len(pipes), len(pumps), len(valves)
    ctrl = pumps + valves

    A = np.eye(n_t)
    B_u = np.zeros((n_t, n_m + n_w))
    B_v = np.zeros((n_t, n_p))
    E_u = np.zeros((n_j, n_m + n_w))
    E_v = np.zeros((n_j, n_p))
    E_d = -np.eye(n_j)

    def fill_flow_blocks(link, col, B, E):
        # dynamics get +/- dt_vol/area, mass balance +/- 1, both oriented
        # into the node at the link's downstream end
        for node_id, sign in ((link.to_node, 1.0), (link.from_node, -1.0)):
            if node_id in t_idx:
                t = tanks[t_idx[node_id]]
                B[t_idx[node_id], col] += sign * dt * CUFT_PER_GPM_HR / t.area
            elif node_id in j_idx:
                E[j_idx[node_id], col] += sign

    for col, link in enumerate(ctrl):
        fill_flow_blocks(link, col, B_u, E_u)
    for col, pipe in enumerate(pipes):
        fill_flow_blocks(pipe, col, B_v, E_v)

    def head_blocks(links):
        Ex = np.zeros((len(links), n_t))
        El = np.zeros((len(links), n_j))
        Er = np.zeros((len(links), n_r))
        for row, link in enumerate(links):
            for node_id, sign in ((link.from_node, 1.0), (link.to_node, -1.0)):
                if node_id in t_idx:
                    Ex[row, t_idx[node_id]] += sign
                elif node_id in j_idx:
                    El[row, j_idx[node_id]] += sign
                else:
                    Er[row, r_idx[node_id]] += sign
        return Ex, El, Er

    E_x1, E_l1, E_r1 = head_blocks(pipes)
    E_x2, E_l2, E_r2 = head_blocks(pumps)
    E_x3, E_l3, E_r3 = head_blocks(valves)

    return DaeMatrices(
        dt=dt,
        A=A, B_u=B_u, B_v=B_v, E_u=E_u, E_v=E_v, E_d=E_d,
        E_x1=E_x1, E_l1=E_l1, E_r1=E_r1,
        E_x2=E_x2, E_l2=E_l2, E_r2=E_r2,
        E_x3=E_x3, E_l3=E_l3, E_r3=E_r3,
        tank_index=t_idx, junction_index=j_idx, reservoir_index=r_idx,
        pipe_index={p.id: i for i, p in enumerate(pipes)},
        pump_index={m.id: i for i, m in enumerate(pumps)},
        valve_index={v.id: i for i, v in enumerate(valves)},
        u_index={e.id: i for i, e in enumerate(ctrl)},
        reservoir_heads=np.array([r.fixed_head for r in reservoirs]),
    )


@dataclass
class TrajectoryVector:
    """Window unknowns in physical units, step-major.

    x holds end-of-step tank heads x(k+1) for the H window steps; x0 the
    heads entering the first step. u stacks pump then valve flows. s and o
    are the actuator settings (pump speeds, GPV openness).
    """

    x0: np.ndarray           # (n_t,)
    x: np.ndarray            # (H, n_t)
    l: np.ndarray            # (H, n_j)
    u: np.ndarray            # (H, n_m + n_w)
    v: np.ndarray            # (H, n_p)
    s: np.ndarray            # (H, n_m)
    o: np.ndarray            # (H, n_g)

    @property
    def horizon(self) -> int:
        return self.x.shape[0]

    def tank_heads_entering(self, k: int) -> np.ndarray:
        return self.x0 if k == 0 else self.x[k - 1]


@dataclass
class DaeResidual:
    tank_gpm: np.ndarray       # (H, n_t)
    junction_gpm: np.ndarray   # (H, n_j)
    head_rel: np.ndarray       # (H, n_p + n_m + n_w)
    pump_off_gpm: np.ndarray   # (H, n_m)  flow through pumps meant to be off

    @property
    def max_mass_gpm(self) -> float:
        parts = []
        for arr in (self.tank_gpm, self.junction_gpm, self.pump_off_gpm):
            if arr.size:
                parts.append(np.max(np.abs(arr)))
        return float(max(parts)) if parts else 0.0

    @property
    def max_head_rel(self) -> float:
        return float(np.max(self.head_rel)) if self.head_rel.size else 0.0


def eval_dae_residual(
    mats: DaeMatrices,
    traj: TrajectoryVector,
    demands: np.ndarray,
    net: Network,
    pump_on: Optional[np.ndarray] = None,
    statuses: Optional[list[dict[str, ValveStatus]]] = None,
) -> DaeResidual:
    """Certify a window trajectory against the exact nonlinear model.

    Mass-type residuals (tank dynamics, junction balance) come back in GPM,
    head rows as errors relative to the larger of 1 ft and the component
    loss. `pump_on` is an (H, n_m) mask; off slots are checked as q=0 and
    their head rows skipped. `statuses` gives PRV/FCV statuses per step.
    """
    tanks = net.sorted_tanks()
    pipes = net.sorted_pipes()
    pumps = net.sorted_pumps()
    valves = net.sorted_valves()
    gpv_ids = [v.id for v in valves if v.kind is ValveKind.GPV]
    g_idx = {vid: i for i, vid in enumerate(gpv_ids)}
    H = traj.horizon
    n_t, n_j = len(tanks), len(net.junctions)
    areas = np.array([t.area for t in tanks])

    tank_res = np.zeros((H, n_t))
    junc_res = np.zeros((H, n_j))
    head_res = np.zeros((H, len(pipes) + len(pumps) + len(valves)))
    off_res = np.zeros((H, len(pumps)))

    for k in range(H):
        x_in = traj.tank_heads_entering(k)
        # difference rows, rescaled to GPM through the tank areas
        drift_ft = traj.x[k] - (mats.A @ x_in + mats.B_u @ traj.u[k] + mats.B_v @ traj.v[k])
        if n_t:
            tank_res[k] = drift_ft * areas / (mats.dt * CUFT_PER_GPM_HR)
        if n_j:
            junc_res[k] = mats.E_u @ traj.u[k] + mats.E_v @ traj.v[k] + mats.E_d @ demands[k]

        def rel(err: float, loss: float) -> float:
            return abs(err) / max(1.0, abs(loss))

        dh1 = mats.E_x1 @ x_in + mats.E_l1 @ traj.l[k] + mats.E_r1 @ mats.reservoir_heads
        for i, pipe in enumerate(pipes):
            loss = pipe_headloss(traj.v[k][i], pipe.resistance, pipe.exponent)
            head_res[k][i] = rel(dh1[i] - loss, loss)

        dh2 = mats.E_x2 @ x_in + mats.E_l2 @ traj.l[k] + mats.E_r2 @ mats.reservoir_heads
        for i, pump in enumerate(pumps):
            row = len(pipes) + i
            q = traj.u[k][mats.u_index[pump.id]]
            on = True if pump_on is None else bool(pump_on[k][i])
            if not on or traj.s[k][i] <= SPEED_OFF:
                # the head row does not apply; the flow must be pinned at zero
                off_res[k][i] = abs(q)
                continue
            loss = pump_headgain(q, traj.s[k][i], pump.shutoff_head,
                                 pump.curve_coeff, pump.curve_exp)
            head_res[k][row] = rel(dh2[i] - loss, loss)

        dh3 = mats.E_x3 @ x_in + mats.E_l3 @ traj.l[k] + mats.E_r3 @ mats.reservoir_heads
        for i, valve in enumerate(valves):
            row = len(pipes) + len(pumps) + i
            q = traj.u[k][mats.u_index[valve.id]]
            if valve.kind is ValveKind.GPV:
                o = traj.o[k][g_idx[valve.id]]
                loss = gpv_headloss(q, o, valve.resistance, valve.exponent)
                head_res[k][row] = rel(dh3[i] - loss, loss)
                continue
            st = ValveStatus.ACTIVE if statuses is None else statuses[k][valve.id]
            if st is ValveStatus.OPEN:
                head_res[k][row] = rel(dh3[i], 0.0)
            elif st is ValveStatus.CLOSED:
                head_res[k][row] = rel(q, 0.0)  # flow should be pinned at zero
            elif valve.kind is ValveKind.PRV:
                # ACTIVE pins the downstream head to the setting
                h_down = _node_head(mats, net, valve.to_node, x_in, traj.l[k])
                head_res[k][row] = rel(h_down - valve.h_set, valve.h_set)
            else:
                head_res[k][row] = rel(q - valve.q_set, valve.q_set)

    return DaeResidual(tank_gpm=tank_res, junction_gpm=junc_res,
                       head_rel=head_res, pump_off_gpm=off_res)


def _node_head(mats: DaeMatrices, net: Network, node_id: str,
               x: np.ndarray, l: np.ndarray) -> float:
    if node_id in mats.tank_index:
        return float(x[mats.tank_index[node_id]])
    if node_id in mats.junction_index:
        return float(l[mats.junction_index[node_id]])
    return float(mats.reservoir_heads[mats.reservoir_index[node_id]])


def trajectory_from_states(net: Network, states) -> TrajectoryVector:
    """Pack simulator output into the window layout for certification."""
    tanks = net.sorted_tanks()
    juncs = net.sorted_junctions()
    pipes = net.sorted_pipes()
    ctrl = net.controllable_links()
    pumps = net.sorted_pumps()
    gpvs = [v for v in net.sorted_valves() if v.kind is ValveKind.GPV]
    H = len(states)
    if H == 0:
        raise ValueError("need at least one state")
    x0 = np.array([states[0].heads[t.id] for t in tanks])
    x = np.array([[st.next_tank_heads[t.id] for t in tanks] for st in states])
    l = np.array([[st.heads[j.id] for j in juncs] for st in states]).reshape(H, len(juncs))
    u = np.array([[st.flows[e.id] for e in ctrl] for st in states]).reshape(H, len(ctrl))
    v = np.array([[st.flows[p.id] for p in pipes] for st in states]).reshape(H, len(pipes))
    s = np.array([[st.controls.speed(m.id) for m in pumps] for st in states]).reshape(H, len(pumps))
    o = np.array([[st.controls.gpv_openness(g.id) for g in gpvs] for st in states]).reshape(H, len(gpvs))
    return TrajectoryVector(x0=x0, x=x, l=l, u=u, v=v, s=s, o=o)
