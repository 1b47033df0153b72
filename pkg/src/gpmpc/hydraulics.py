"""Component head equations and the exact hydraulic simulator.

The simulator is the plant model: given tank heads, demands, pump speeds and
valve settings for one step it solves the nonlinear network equations with a
damped Newton iteration, then integrates the tank levels forward. Units are
ft / GPM / hours.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .network import Network, Pump, Valve, ValveKind, ValveStatus

# tank volume balance: 1 GPM over 1 hr = 60 gal = 60*231/1728 cubic ft
CUFT_PER_GPM_HR = 60.0 * 231.0 / 1728.0

# Jacobian smoothing scale for |q|^(mu-1) near q=0 (residuals stay exact)
Q_SMOOTH = 1e-4

SPEED_OFF = 1e-9  # speeds at or below this mean the pump is off


class ConvergenceError(RuntimeError):
    """Newton iteration failed to reach tolerance."""


def pipe_headloss(q: float, resistance: float, exponent: float) -> float:
    """h_i - h_j across a pipe: R * q * |q|^(mu-1), sign-preserving."""
    return resistance * q * abs(q) ** (exponent - 1.0)


def pump_headgain(q: float, s: float, h0: float, r: float, nu: float) -> float:
    """h_i - h_j across a running pump: -s^2 * (h0 - r*(q/s)^nu).

    Negative values are head gains. r < 0, so the gain grows with flow.
    """
    if s <= 0:
        raise ValueError(f"pump speed must be positive, got {s}")
    return -s * s * (h0 - r * abs(q / s) ** nu)


def gpv_headloss(q: float, o: float, resistance: float, exponent: float) -> float:
    """h_i - h_j across a general-purpose valve at openness o in (0, 1]."""
    if o <= 0:
        raise ValueError(f"valve openness must be positive, got {o}")
    return o * resistance * q * abs(q) ** (exponent - 1.0)


def tank_step(head: float, net_inflow: float, area: float, dt: float) -> float:
    """Integrate a tank level one step: inflow in GPM, area in ft^2, dt in hours."""
    return head + dt * CUFT_PER_GPM_HR * net_inflow / area


@dataclass(frozen=True)
class Controls:
    """Actuator settings for one step: pump speeds and GPV openness.

    Pumps absent from `speeds` run at full speed; a speed of 0 turns the pump
    off. GPVs absent from `openness` are fully open.
    """

    speeds: dict[str, float] = field(default_factory=dict)
    openness: dict[str, float] = field(default_factory=dict)

    def speed(self, pump_id: str) -> float:
        return self.speeds.get(pump_id, 1.0)

    def gpv_openness(self, valve_id: str) -> float:
        return self.openness.get(valve_id, 1.0)


@dataclass
class HydraulicState:
    """Network condition over one step plus the advanced tank heads.

    `heads` holds junction heads solved for the step and tank heads at the
    START of the step; `next_tank_heads` has the integrated end-of-step tank
    levels. Residuals are reported post-convergence from the exact equations.
    """

    heads: dict[str, float]
    flows: dict[str, float]
    valve_statuses: dict[str, ValveStatus]
    next_tank_heads: dict[str, float] = field(default_factory=dict)
    controls: Controls = field(default_factory=Controls)
    iterations: int = 0
    mass_residual: float = 0.0
    head_residual: float = 0.0


def initial_state(net: Network) -> HydraulicState:
    heads = {t.id: t.init_head for t in net.tanks}
    heads.update({r.id: r.fixed_head for r in net.reservoirs})
    for j in net.junctions:
        heads[j.id] = j.elevation
    statuses = {v.id: v.status for v in net.valves}
    return HydraulicState(
        heads=heads,
        flows={e.id: 0.0 for e in net.links},
        valve_statuses=statuses,
        next_tank_heads={t.id: t.init_head for t in net.tanks},
    )


def _pump_is_off(speed: float) -> bool:
    return speed <= SPEED_OFF


def _link_order(net: Network) -> list:
    return list(net.sorted_pipes()) + list(net.sorted_pumps()) + list(net.sorted_valves())


def _residual_and_jacobian(
    net: Network,
    links: list,
    jidx: dict[str, int],
    fixed_heads: dict[str, float],
    z: np.ndarray,
    demand: np.ndarray,
    controls: Controls,
    statuses: dict[str, ValveStatus],
    want_jacobian: bool,
):
    n_j = len(jidx)
    n_e = len(links)
    F = np.zeros(n_j + n_e)
    J = np.zeros((n_j + n_e, n_j + n_e)) if want_jacobian else None

    def head_of(node_id: str) -> float:
        i = jidx.get(node_id)
        return z[i] if i is not None else fixed_heads[node_id]

    F[:n_j] = -demand
    for e_i, link in enumerate(links):
        q = z[n_j + e_i]
        col = n_j + e_i
        up, down = jidx.get(link.from_node), jidx.get(link.to_node)
        # 1) mass balance contributions
        if up is not None:
            F[up] -= q
            if want_jacobian:
                J[up, col] -= 1.0
        if down is not None:
            F[down] += q
            if want_jacobian:
                J[down, col] += 1.0
        # 2) head equation for the link
        row = n_j + e_i
        hi, hj = head_of(link.from_node), head_of(link.to_node)

        def _head_row(dq: float, loss: float) -> None:
            F[row] = hi - hj - loss
            if want_jacobian:
                if up is not None:
                    J[row, up] += 1.0
                if down is not None:
                    J[row, down] -= 1.0
                J[row, col] = -dq

        if isinstance(link, Pump):
            s = controls.speed(link.id)
            if _pump_is_off(s):
                F[row] = q
                if want_jacobian:
                    J[row, col] = 1.0
            else:
                loss = pump_headgain(q, s, link.shutoff_head, link.curve_coeff,
                                     link.curve_exp)
                # d/dq of r*s^(2-nu)*|q|^nu, written q*(q^2+tau^2)^((nu-2)/2)
                # so it stays smooth through q=0
                nu = link.curve_exp
                smooth = q * (q * q + Q_SMOOTH**2) ** ((nu - 2.0) / 2.0)
                _head_row(link.curve_coeff * s ** (2.0 - nu) * nu * smooth, loss)
        elif isinstance(link, Valve):
            if link.kind is ValveKind.GPV:
                o = controls.gpv_openness(link.id)
                loss = gpv_headloss(q, o, link.resistance, link.exponent)
                mu = link.exponent
                smooth = (q * q + Q_SMOOTH**2) ** ((mu - 1.0) / 2.0)
                _head_row(o * link.resistance * mu * smooth, loss)
            else:
                st = statuses[link.id]
                if st is ValveStatus.CLOSED:
                    F[row] = q
                    if want_jacobian:
                        J[row, col] = 1.0
                elif st is ValveStatus.OPEN:
                    _head_row(0.0, 0.0)
                elif link.kind is ValveKind.PRV:
                    # ACTIVE: pin the downstream head to the setting
                    F[row] = hj - link.h_set
                    if want_jacobian and down is not None:
                        J[row, down] = 1.0
                else:
                    # FCV ACTIVE: pin the flow to the setting
                    F[row] = q - link.q_set
                    if want_jacobian:
                        J[row, col] = 1.0
        else:
            loss = pipe_headloss(q, link.resistance, link.exponent)
            mu = link.exponent
            smooth = (q * q + Q_SMOOTH**2) ** ((mu - 1.0) / 2.0)
            _head_row(link.resistance * mu * smooth, loss)

    return F, J


def _solve_network(
    net: Network,
    fixed_heads: dict[str, float],
    demand: np.ndarray,
    controls: Controls,
    statuses: dict[str, ValveStatus],
    z0: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-9,
) -> tuple[np.ndarray, int]:
    links = _link_order(net)
    jidx = {j.id: i for i, j in enumerate(net.sorted_junctions())}
    z = z0.copy()
    F, _ = _residual_and_jacobian(net, links, jidx, fixed_heads, z, demand,
                                  controls, statuses, want_jacobian=False)
    norm = np.linalg.norm(F, ord=np.inf)
    for it in range(1, max_iter + 1):
        if norm < tol:
            return z, it - 1
        _, J = _residual_and_jacobian(net, links, jidx, fixed_heads, z, demand,
                                      controls, statuses, want_jacobian=True)
        try:
            dz = np.linalg.solve(J, F)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"singular Jacobian at iteration {it}") from exc
        # damped update: halve until the residual actually drops
        lam = 1.0
        for _ in range(40):
            z_try = z - lam * dz
            F_try, _ = _residual_and_jacobian(net, links, jidx, fixed_heads, z_try,
                                              demand, controls, statuses,
                                              want_jacobian=False)
            norm_try = np.linalg.norm(F_try, ord=np.inf)
            if norm_try < norm * (1.0 - 1e-4 * lam) or norm_try < tol:
                break
            lam *= 0.5
        z, F, norm = z_try, F_try, norm_try
    if norm < tol:
        return z, max_iter
    raise ConvergenceError(f"no convergence after {max_iter} iterations, |F|={norm:.3e}")


def next_valve_status(
    valve: Valve,
    status: ValveStatus,
    h_up: float,
    h_down: float,
    q: float,
) -> ValveStatus:
    """One status-transition step from the solved heads and flow."""
    if valve.kind is ValveKind.GPV:
        return ValveStatus.OPEN
    if valve.kind is ValveKind.FCV:
        return ValveStatus.ACTIVE if h_up >= h_down else ValveStatus.OPEN
    # PRV
    if status in (ValveStatus.ACTIVE, ValveStatus.OPEN):
        if q < 0:
            return ValveStatus.CLOSED
        if h_up > valve.h_set:
            return ValveStatus.ACTIVE
        return ValveStatus.OPEN
    # from CLOSED, reopen on restored upstream pressure
    if h_up > valve.h_set:
        return ValveStatus.ACTIVE
    if h_up > h_down:
        return ValveStatus.OPEN
    return ValveStatus.CLOSED


def _post_residuals(
    net: Network,
    links: list,
    jidx: dict[str, int],
    fixed_heads: dict[str, float],
    z: np.ndarray,
    demand: np.ndarray,
    controls: Controls,
    statuses: dict[str, ValveStatus],
) -> tuple[float, float]:
    F, _ = _residual_and_jacobian(net, links, jidx, fixed_heads, z, demand,
                                  controls, statuses, want_jacobian=False)
    n_j = len(jidx)
    mass = float(np.max(np.abs(F[:n_j]))) if n_j else 0.0

    def head_of(node_id: str) -> float:
        i = jidx.get(node_id)
        return z[i] if i is not None else fixed_heads[node_id]

    head = 0.0
    for e_i, link in enumerate(links):
        scale = max(1.0, abs(head_of(link.from_node)), abs(head_of(link.to_node)))
        head = max(head, abs(F[n_j + e_i]) / scale)
    return mass, head


def simulate_step(
    net: Network,
    state: HydraulicState,
    demand: np.ndarray,
    controls: Controls,
    dt: float = 1.0,
) -> HydraulicState:
    """Solve one hydraulic step and integrate the tank levels.

    `state` supplies the tank heads at the start of the step, the previous
    flows/heads as the Newton warm start, and the PRV/FCV statuses to hold
    during the solve. Statuses are updated once from the solved condition and
    stored on the returned state. Raises ConvergenceError when the network
    equations cannot be solved.
    """
    links = _link_order(net)
    juncs = net.sorted_junctions()
    jidx = {j.id: i for i, j in enumerate(juncs)}
    if len(demand) != len(juncs):
        raise ValueError(f"demand vector has {len(demand)} entries, need {len(juncs)}")

    fixed_heads = {r.id: r.fixed_head for r in net.reservoirs}
    for t in net.tanks:
        fixed_heads[t.id] = state.heads[t.id]

    statuses = dict(state.valve_statuses)

    # warm start from the previous condition, falling back to a cold guess
    n_j = len(juncs)
    z0 = np.empty(n_j + len(links))
    for j_i, j in enumerate(juncs):
        z0[j_i] = state.heads.get(j.id, j.elevation)
    for e_i, link in enumerate(links):
        z0[n_j + e_i] = state.flows.get(link.id, 0.0)

    try:
        z, iters = _solve_network(net, fixed_heads, demand, controls, statuses, z0)
    except ConvergenceError:
        # cold start: hydrostatic heads, demand split uniformly across links
        z0[:n_j] = max(fixed_heads.values(), default=0.0) if fixed_heads else 0.0
        z0[n_j:] = float(np.sum(demand)) / max(1, len(links))
        z, iters = _solve_network(net, fixed_heads, demand, controls, statuses, z0)

    heads = dict(fixed_heads)
    for j_i, j in enumerate(juncs):
        heads[j.id] = float(z[j_i])
    flows = {link.id: float(z[n_j + e_i]) for e_i, link in enumerate(links)}

    # 3) integrate tanks on the solved flows
    next_tanks = {}
    for t in net.tanks:
        inflow = 0.0
        for link in links:
            if link.to_node == t.id:
                inflow += flows[link.id]
            if link.from_node == t.id:
                inflow -= flows[link.id]
        next_tanks[t.id] = tank_step(state.heads[t.id], inflow, t.area, dt)

    # 4) one status-transition pass on the solved condition
    new_statuses = {}
    for v in net.sorted_valves():
        new_statuses[v.id] = next_valve_status(
            v, statuses[v.id], heads[v.from_node], heads[v.to_node], flows[v.id]
        )

    mass, head = _post_residuals(net, links, jidx, fixed_heads, z, demand,
                                 controls, statuses)
    return HydraulicState(
        heads=heads,
        flows=flows,
        valve_statuses=new_statuses,
        next_tank_heads=next_tanks,
        controls=controls,
        iterations=iters,
        mass_residual=mass,
        head_residual=head,
    )


def advance(state: HydraulicState) -> HydraulicState:
    """Shift a solved state so its end-of-step tank heads become current."""
    heads = dict(state.heads)
    heads.update(state.next_tank_heads)
    return HydraulicState(
        heads=heads,
        flows=dict(state.flows),
        valve_statuses=dict(state.valve_statuses),
        next_tank_heads=dict(state.next_tank_heads),
        controls=state.controls,
    )


def run_simulation(
    net: Network,
    controls_per_step: Sequence[Controls],
    demands_per_step: Sequence[np.ndarray],
    dt: float = 1.0,
) -> list[HydraulicState]:
    """Closed-loop plant rollout under a fixed control sequence."""
    if len(controls_per_step) != len(demands_per_step):
        raise ValueError("controls and demands must have equal length")
    states = []
    current = initial_state(net)
    for controls, demand in zip(controls_per_step, demands_per_step):
        solved = simulate_step(net, current, demand, controls, dt)
        states.append(solved)
        current = advance(solved)
    return states
