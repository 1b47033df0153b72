"""Receding-horizon control loop and the per-window schedule search.

One window: refine the convexified model around a running iterate until
successive solutions agree, while a binary search over the number of
pre-emptively switched-off pump slots hunts for a cheaper schedule whose
planned tank profile fails no more safety checks than the all-on baseline.
The closed loop applies the first hour of the winning plan to the exact
simulator and shifts the window.
"""

from __future__ import annotations

import math
import sys
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dae import DaeMatrices, DaeResidual, TrajectoryVector, build_dae, eval_dae_residual
from .gp import solve_gp
from .hydraulics import Controls, HydraulicState, advance, initial_state, simulate_step
from .network import DemandNoise, Network, ValveKind, ValveStatus, resolve_demand
from .transform import (
    GpConfig,
    build_gp_mpc,
    build_iterate_constants,
    decode_solution,
    initial_iterate,
    iterate_warm_start,
    prox_scales,
    relax_iterate,
    update_valve_statuses,
    xi_values,
)

DEFAULT_WEIGHTS = (1.0, 1e-4, 10.0)

# water horsepower: kW drawn by lifting q GPM a head of dh ft at efficiency
# eta; 3960 GPM*ft per horsepower, 0.7457 kW per horsepower
HP_GPM_FT = 3960.0
KW_PER_HP = 0.7457


class WindowFailure(RuntimeError):
    """The all-on window problem itself has no solution."""


@dataclass(frozen=True)
class CostBreakdown:
    """Objective components over one window or one applied step.

    safety is the aggregate squared shortfall under the safe tank levels
    [ft^2], smoothness the aggregate squared hourly flow change of the
    controllable links [GPM^2], energy the pump electricity bill [$].
    """

    safety: float
    smoothness: float
    energy: float
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS

    @property
    def total(self) -> float:
        w1, w2, w3 = self.weights
        return w1 * self.safety + w2 * self.smoothness + w3 * self.energy

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        if self.weights != other.weights:
            raise ValueError("cannot add breakdowns with different weights")
        return CostBreakdown(self.safety + other.safety,
                             self.smoothness + other.smoothness,
                             self.energy + other.energy, self.weights)


def pump_cost(gain_ft: float, flow_gpm: float, efficiency: float,
              price: float, dt: float) -> float:
    """Electricity cost [$] of one pump over one step.

    Power is the water-horsepower conversion q*|dh|/(3960*eta) scaled to kW;
    the specific gravity of water is 1 so it does not appear.
    """
    if efficiency <= 0.0:
        raise ValueError(f"pump efficiency must be positive, got {efficiency}")
    power_kw = flow_gpm * abs(gain_ft) / (HP_GPM_FT * efficiency) * KW_PER_HP
    return power_kw * price * dt


def evaluate_objectives(
    net: Network,
    mats: DaeMatrices,
    traj: TrajectoryVector,
    u_prev: np.ndarray,
    prices: Sequence[float],
    dt: float,
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS,
) -> CostBreakdown:
    """Score a window trajectory in physical units.

    Safety counts only shortfalls under the safe level; levels at or above
    it contribute nothing. The energy term prices each pump's actual head
    rise at its own flow-dependent efficiency; slots with zero flow are
    free and skip the efficiency lookup, so an off pump never trips the
    positive-efficiency check.
    """
    tanks = net.sorted_tanks()
    pumps = net.sorted_pumps()
    H = traj.horizon

    safety = 0.0
    for k in range(H):
        for i, t in enumerate(tanks):
            short = t.safe_head - traj.x[k][i]
            if short > 0.0:
                safety += short * short

    smoothness = 0.0
    prev = np.asarray(u_prev, dtype=float)
    for k in range(H):
        delta = traj.u[k] - prev
        smoothness += float(delta @ delta)
        prev = traj.u[k]

    energy = 0.0
    for k in range(H):
        x_in = traj.tank_heads_entering(k)
        dh = (mats.E_x2 @ x_in + mats.E_l2 @ traj.l[k]
              + mats.E_r2 @ mats.reservoir_heads)
        for i, pump in enumerate(pumps):
            q = float(traj.u[k][mats.u_index[pump.id]])
            if q <= 0.0:
                continue
            eta = net.pump_efficiency(pump, q)
            energy += pump_cost(float(dh[i]), q, eta, float(prices[k]), dt)

    return CostBreakdown(safety, smoothness, energy, weights)


def build_turnoff_cell(net: Network, traj: TrajectoryVector) -> list[list[str]]:
    """Per-slot turn-off candidates: pumps whose paired tank enters the slot
    at or above its safe level. Pumps without a paired tank never qualify."""
    tanks = net.sorted_tanks()
    tidx = {t.id: i for i, t in enumerate(tanks)}
    cell: list[list[str]] = []
    for k in range(traj.horizon):
        x = traj.tank_heads_entering(k)
        ids = []
        for pump in net.sorted_pumps():
            if pump.paired_tank is None:
                continue
            i = tidx[pump.paired_tank]
            if x[i] >= tanks[i].safe_head:
                ids.append(pump.id)
        cell.append(ids)
    return cell


def select_preoff_slots(
    turnoff: list[list[str]],
    prices: Sequence[float],
    m: int,
) -> dict[str, frozenset[int]]:
    """Choose, per candidate pump, its m most expensive candidate slots.

    Equal prices break toward the earlier slot. A pump with fewer than m
    candidate slots surrenders all of them (logged; the search treats the
    schedule like any other)."""
    if m < 0:
        raise ValueError(f"m must be nonnegative, got {m}")
    slots: dict[str, list[int]] = {}
    for k, ids in enumerate(turnoff):
        for pid in ids:
            slots.setdefault(pid, []).append(k)
    out: dict[str, frozenset[int]] = {}
    for pid, ks in slots.items():
        ranked = sorted(ks, key=lambda k: (-float(prices[k]), k))
        if m > len(ranked):
            print(f"warning: pump {pid} has {len(ranked)} candidate slots, "
                  f"fewer than m={m}; switching off all of them",
                  file=sys.stderr)
        out[pid] = frozenset(ranked[:m])
    return out


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


@dataclass
class WindowResult:
    """Winning plan of one window search plus its bookkeeping."""

    traj: TrajectoryVector
    cost: CostBreakdown
    m: int
    off_slots: dict[str, frozenset[int]]
    pump_on: np.ndarray
    statuses: list[dict[str, ValveStatus]]
    iterations: int
    converged: bool
    distance: float
    n_fail: int
    evaluated_m: tuple[int, ...]
    residual: DaeResidual


@dataclass
class _Candidate:
    feasible: bool
    traj: Optional[TrajectoryVector] = None
    cost: Optional[CostBreakdown] = None
    pump_on: Optional[np.ndarray] = None
    statuses: Optional[list] = None
    off_slots: dict[str, frozenset[int]] = field(default_factory=dict)
    iterations: int = 0
    converged: bool = False
    distance: float = math.inf
    n_fail: int = 0


def _schedule_consistent(
    net: Network,
    mats: DaeMatrices,
    traj: TrajectoryVector,
    pump_on: np.ndarray,
    forecast: np.ndarray,
) -> TrajectoryVector:
    """Rewrite slots whose pumps are forced off so the anchor agrees.

    The off pins make the junction balance settle on drain flows, while the
    head rows stay value-exact only at the anchor flows. Anchoring an off
    slot at on-flows therefore hands the solver rows that contradict the
    head boxes outright. Zeroing the masked pumps and rerouting the lost
    supply through the passive links keeps the first solve honest; slots
    already consistent with the mask pass through untouched.
    """
    if bool(pump_on.all()):
        return traj
    n_m = len(net.sorted_pumps())
    E_u = np.asarray(mats.E_u, dtype=float)
    E_v = np.asarray(mats.E_v, dtype=float)
    u = traj.u.copy()
    s = traj.s.copy()
    v = traj.v.copy()
    changed = False
    for k in range(traj.horizon):
        off = ~pump_on[k]
        if not off.any() or not np.any(np.abs(u[k, :n_m][off]) > 1e-9):
            continue
        changed = True
        u[k, :n_m][off] = 0.0
        s[k][off] = 0.0
        resid = forecast[k] - E_u @ u[k] - E_v @ v[k]
        if np.any(np.abs(resid) > 1e-9):
            dv, *_ = np.linalg.lstsq(E_v, resid, rcond=None)
            v[k] += dv
    if not changed:
        return traj
    B_u = np.asarray(mats.B_u, dtype=float)
    B_v = np.asarray(mats.B_v, dtype=float)
    x = np.empty_like(traj.x)
    level = np.asarray(traj.x0, dtype=float)
    for k in range(traj.horizon):
        level = level + B_u @ u[k] + B_v @ v[k]
        x[k] = level
    return TrajectoryVector(x0=traj.x0.copy(), x=x, l=traj.l.copy(),
                            u=u, v=v, s=s, o=traj.o.copy())


def _refine_candidate(
    net: Network,
    mats: DaeMatrices,
    m: int,
    seed: TrajectoryVector,
    u_prev: np.ndarray,
    forecast: np.ndarray,
    prices: Sequence[float],
    entry_statuses: dict[str, ValveStatus],
    cfg: GpConfig,
    weights: tuple[float, float, float],
    n_fail_save: Optional[int],
) -> _Candidate:
    """Run the inner refinement loop for one candidate slot count m.

    The turn-off schedule, valve statuses, and row constants are all
    re-derived from the current iterate each pass, so the schedule follows
    the plan as it settles. A candidate aborts as soon as its planned tank
    profile fails more safety checks than the all-on baseline did."""
    tanks = net.sorted_tanks()
    pumps = net.sorted_pumps()
    pidx = {p.id: i for i, p in enumerate(pumps)}
    H = cfg.horizon
    safe = np.array([t.safe_head for t in tanks])

    traj = seed
    prev_xi = None
    cand = _Candidate(feasible=True)
    for n in range(1, cfg.max_iter + 1):
        turnoff = build_turnoff_cell(net, traj)
        chosen = select_preoff_slots(turnoff, prices, m)
        pump_on = np.ones((H, len(pumps)), dtype=bool)
        for pid, ks in chosen.items():
            for k in ks:
                pump_on[k][pidx[pid]] = False
        traj = _schedule_consistent(net, mats, traj, pump_on, forecast)
        statuses = update_valve_statuses(net, mats, traj, entry_statuses)
        consts = build_iterate_constants(net, traj, u_prev, cfg, pump_on,
                                         first_pass=(n == 1))
        prob = build_gp_mpc(net, mats, forecast, np.asarray(seed.x0), u_prev,
                            consts, pump_on, statuses, cfg)
        sol = solve_gp(prob,
                       warm_start=iterate_warm_start(net, traj, u_prev, cfg,
                                                     pump_on, consts),
                       prox_scales=prox_scales(net, consts))
        if sol.status != "optimal":
            print(f"warning: window GP {sol.status} at m={m}, iteration {n}",
                  file=sys.stderr)
            return _Candidate(feasible=False, iterations=n)
        dec = decode_solution(net, sol.values, np.asarray(seed.x0), pump_on,
                              statuses, cfg)
        cand.traj = dec
        cand.pump_on = pump_on
        cand.statuses = statuses
        cand.off_slots = chosen
        cand.iterations = n
        cand.n_fail = int(np.sum(dec.x < safe[np.newaxis, :])) if len(tanks) else 0
        if m > 0 and n_fail_save is not None and cand.n_fail > n_fail_save:
            cand.feasible = False
            return cand
        xi = xi_values(prob, sol.values)
        if prev_xi is not None:
            cand.distance = float(np.linalg.norm(xi - prev_xi))
            if cand.distance < cfg.threshold:
                cand.converged = True
                break
        prev_xi = xi
        # heavy damping while the iterate is still travelling, raw refreeze
        # once it is close enough for the tie-break anchor to hold it; full
        # averaging all the way would halve the tail convergence rate
        if cand.distance > RAW_REFREEZE_DIST:
            traj = relax_iterate(traj, dec)
        else:
            traj = dec
    cand.cost = evaluate_objectives(net, mats, cand.traj, u_prev, prices,
                                    cfg.dt, weights)
    return cand


def solve_window(
    net: Network,
    mats: DaeMatrices,
    seed: TrajectoryVector,
    u_prev: np.ndarray,
    forecast: np.ndarray,
    prices: Sequence[float],
    entry_statuses: dict[str, ValveStatus],
    cfg: GpConfig,
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS,
) -> WindowResult:
    """Search pump-off slot counts for the cheapest certified window plan.

    The all-on problem (m=0) anchors the search: its safety-failure count
    is the bar every candidate must meet, and its plan is the fallback when
    every candidate fails. Candidates bisect on m; a candidate counts as a
    success only when its refinement settled under the iterate-distance
    threshold, so an oscillating schedule cannot shrink the certified plan
    pool. The returned plan minimizes pump cost over the saved pool.

    Raises WindowFailure when the all-on problem itself is insoluble.
    """
    H = cfg.horizon
    if forecast.shape[0] != H:
        raise ValueError(f"forecast covers {forecast.shape[0]} steps, "
                         f"window needs {H}")

    base = _refine_candidate(net, mats, 0, seed, u_prev, forecast, prices,
                             entry_statuses, cfg, weights, None)
    if not base.feasible:
        raise WindowFailure("all-on window problem is infeasible")
    if not base.converged:
        print(f"warning: all-on window refinement hit the iteration cap at "
              f"distance {base.distance:.3g}; using its last iterate",
              file=sys.stderr)
    n_fail_save = base.n_fail
    saved: list[tuple[int, _Candidate]] = [(0, base)]
    evaluated = [0]

    left, right = 0, H
    while left < right - 1:
        m = _round_half_away((left + right) / 2.0)
        evaluated.append(m)
        cand = _refine_candidate(net, mats, m, seed, u_prev, forecast, prices,
                                 entry_statuses, cfg, weights, n_fail_save)
        if cand.feasible and cand.converged:
            saved.append((m, cand))
            left = m
        else:
            right = m

    best_m, best = min(saved, key=lambda it: it[1].cost.energy)
    residual = eval_dae_residual(mats, best.traj, forecast, net,
                                 pump_on=best.pump_on, statuses=best.statuses)
    return WindowResult(
        traj=best.traj, cost=best.cost, m=best_m, off_slots=best.off_slots,
        pump_on=best.pump_on, statuses=best.statuses,
        iterations=best.iterations, converged=best.converged,
        distance=best.distance, n_fail=best.n_fail,
        evaluated_m=tuple(evaluated), residual=residual)


@dataclass
class StepRecord:
    """One applied control step of the closed loop."""

    t0: int
    m: int
    speeds: dict[str, float]
    openness: dict[str, float]
    statuses: dict[str, str]
    tank_heads: dict[str, float]
    planned: CostBreakdown
    realized: CostBreakdown
    iterations: int
    converged: bool
    distance: float
    wall_time: float


@dataclass
class MpcRun:
    """Closed-loop record: per-step data plus the realized totals."""

    records: list[StepRecord]
    states: list[HydraulicState]
    total: CostBreakdown

    @property
    def horizon(self) -> int:
        return len(self.records)


def _step_cost(
    net: Network,
    state: HydraulicState,
    u_prev_flows: dict[str, float],
    price: float,
    dt: float,
    weights: tuple[float, float, float],
) -> CostBreakdown:
    """Realized objective components of one applied simulator step."""
    safety = 0.0
    for t in net.sorted_tanks():
        short = t.safe_head - state.next_tank_heads[t.id]
        if short > 0.0:
            safety += short * short
    smoothness = 0.0
    for e in net.controllable_links():
        delta = state.flows[e.id] - u_prev_flows.get(e.id, 0.0)
        smoothness += delta * delta
    energy = 0.0
    for pump in net.sorted_pumps():
        q = state.flows[pump.id]
        # backward leakage through a barely spinning pump does no billable work
        if q <= 0.0 or state.controls.speed(pump.id) == 0.0:
            continue
        gain = state.heads[pump.to_node] - state.heads[pump.from_node]
        eta = net.pump_efficiency(pump, q)
        energy += pump_cost(gain, q, eta, price, dt)
    return CostBreakdown(safety, smoothness, energy, weights)


def run_mpc(
    net: Network,
    cfg: GpConfig,
    t_final: int,
    noise: Optional[DemandNoise] = None,
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS,
) -> MpcRun:
    """Close the loop for t_final hourly steps.

    Each step forecasts demand from the network patterns, searches the
    window schedule, applies the first hour's controls to the simulator
    under the realized (optionally noisy) demand, and shifts. Windows from
    the second step on are seeded with the plant's standing link flows;
    the first window, having no history, starts from the flat split.

    Raises WindowFailure annotated with the step index if a window has no
    all-on solution.
    """
    if t_final < 1:
        raise ValueError(f"t_final must be at least 1, got {t_final}")
    mats = build_dae(net, cfg.dt)
    tanks = net.sorted_tanks()
    juncs = net.sorted_junctions()
    ctrl = net.controllable_links()
    pipes = net.sorted_pipes()
    gpvs = [v for v in net.sorted_valves() if v.kind is ValveKind.GPV]

    state = initial_state(net)
    records: list[StepRecord] = []
    states: list[HydraulicState] = []
    total = CostBreakdown(0.0, 0.0, 0.0, weights)

    applied_u: Optional[dict[str, float]] = None
    for t0 in range(1, t_final + 1):
        started = time.perf_counter()
        ks = range(t0 - 1, t0 - 1 + cfg.horizon)
        forecast = np.stack([resolve_demand(net, k) for k in ks])
        prices = [net.electricity_price(k) for k in ks]
        x0 = np.array([state.heads[t.id] for t in tanks])
        l0 = np.array([state.heads[j.id] for j in juncs])

        seed = initial_iterate(net, forecast, x0, l0)
        if applied_u is None:
            # cold start: nothing has been applied yet, so the window enters
            # at the flat guess's own value and the first step carries no
            # fabricated flow change
            u_prev = np.full(len(ctrl), seed.u[0][0] if len(ctrl) else 0.0)
        else:
            # seed with the plant's standing flows so the refinement starts
            # at the operating point instead of the flat split
            u_prev = np.array([applied_u[e.id] for e in ctrl])
            v_now = np.array([state.flows[p.id] for p in pipes])
            u_tile = np.tile(u_prev, (cfg.horizon, 1))
            v_tile = np.tile(v_now, (cfg.horizon, 1))
            x_chain = np.empty_like(seed.x)
            level = np.asarray(seed.x0)
            for k in range(cfg.horizon):
                level = level + mats.B_u @ u_tile[k] + mats.B_v @ v_tile[k]
                x_chain[k] = level
            seed = TrajectoryVector(
                x0=seed.x0, x=x_chain, l=seed.l,
                u=u_tile, v=v_tile, s=seed.s, o=seed.o)

        try:
            wr = solve_window(net, mats, seed, u_prev, forecast, prices,
                              dict(state.valve_statuses), cfg, weights)
        except WindowFailure as exc:
            raise WindowFailure(f"step {t0}: {exc}") from exc

        pumps = net.sorted_pumps()
        speeds = {p.id: float(wr.traj.s[0][i]) for i, p in enumerate(pumps)}
        openness = {g.id: float(wr.traj.o[0][i]) for i, g in enumerate(gpvs)}
        controls = Controls(speeds=speeds, openness=openness)
        realized_demand = resolve_demand(net, t0 - 1, noise)
        stepped = simulate_step(net, state, realized_demand, controls, cfg.dt)

        realized = _step_cost(net, stepped, applied_u or {},
                              net.electricity_price(t0 - 1), cfg.dt, weights)
        total = total + realized
        records.append(StepRecord(
            t0=t0, m=wr.m, speeds=speeds, openness=openness,
            statuses={k: v.name for k, v in stepped.valve_statuses.items()},
            tank_heads=dict(stepped.next_tank_heads),
            planned=wr.cost, realized=realized,
            iterations=wr.iterations, converged=wr.converged,
            distance=wr.distance,
            wall_time=time.perf_counter() - started))
        states.append(stepped)
        applied_u = {e.id: stepped.flows[e.id] for e in ctrl}
        state = advance(stepped)

    return MpcRun(records=records, states=states, total=total)
