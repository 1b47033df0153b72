"""Component equations and Newton simulator behaviour."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpmpc.fixtures import eight_node, three_node
from gpmpc.hydraulics import (
    CUFT_PER_GPM_HR,
    Controls,
    advance,
    gpv_headloss,
    initial_state,
    pipe_headloss,
    pump_headgain,
    run_simulation,
    simulate_step,
    tank_step,
)
from gpmpc.network import ValveStatus, parse_inp, resolve_demand


class TestComponentEquations:
    def test_pipe_loss_sign_and_magnitude(self) -> None:
        assert pipe_headloss(100.0, 2e-3, 1.852) > 0
        assert pipe_headloss(-100.0, 2e-3, 1.852) == -pipe_headloss(100.0, 2e-3, 1.852)
        assert pipe_headloss(0.0, 2e-3, 1.852) == 0.0

    def test_pump_gain_reference_points(self) -> None:
        # negative return values are head gains; gain grows with flow
        assert pump_headgain(1000.0, 1.0, 740.0, -8.382e-5, 1.94) == pytest.approx(
            -795.3793248119966, rel=1e-14
        )
        assert pump_headgain(0.0, 1.0, 445.0, -1.947e-5, 2.28) == -445.0
        assert pump_headgain(0.0, 0.5, 445.0, -1.947e-5, 2.28) == pytest.approx(-111.25)

    def test_pump_speed_domain(self) -> None:
        with pytest.raises(ValueError, match="speed"):
            pump_headgain(100.0, 0.0, 740.0, -8.382e-5, 1.94)
        with pytest.raises(ValueError, match="speed"):
            pump_headgain(100.0, -1.0, 740.0, -8.382e-5, 1.94)

    def test_gpv_matches_pipe_when_fully_open(self) -> None:
        assert gpv_headloss(250.0, 1.0, 7.9e-3, 1.852) == pipe_headloss(
            250.0, 7.9e-3, 1.852
        )
        assert gpv_headloss(250.0, 0.5, 7.9e-3, 1.852) == pytest.approx(
            0.5 * pipe_headloss(250.0, 7.9e-3, 1.852)
        )

    def test_gpv_openness_domain(self) -> None:
        with pytest.raises(ValueError, match="openness"):
            gpv_headloss(100.0, 0.0, 7.9e-3, 1.852)

    def test_tank_step_volume_conversion(self) -> None:
        assert CUFT_PER_GPM_HR == pytest.approx(8.020833333333334, rel=1e-15)
        area = math.pi * 36.0**2 / 4.0
        h1 = tank_step(905.0, 714.2554667264994, area, 1.0)
        assert h1 == pytest.approx(910.6283122352846, rel=1e-12)
        # zero inflow holds the level; negative inflow drains
        assert tank_step(905.0, 0.0, area, 1.0) == 905.0
        assert tank_step(905.0, -300.0, area, 1.0) < 905.0

    @given(
        q=st.floats(-2500, 2500),
        r=st.floats(1e-5, 1e-2),
        mu=st.floats(1.5, 2.2),
    )
    @settings(max_examples=200, deadline=None)
    def test_pipe_loss_is_odd_and_monotone(self, q, r, mu) -> None:
        assert pipe_headloss(-q, r, mu) == pytest.approx(-pipe_headloss(q, r, mu))
        assert pipe_headloss(q + 1.0, r, mu) > pipe_headloss(q, r, mu)


class TestThreeNodeSolve:
    def test_full_speed_operating_point(self) -> None:
        net = three_node()
        state = initial_state(net)
        d = resolve_demand(net, 13)  # multiplier 1.0
        out = simulate_step(net, state, d, Controls(speeds={"M1": 1.0}))
        # independent root-bracketing on the scalar balance gives 1014.2555 GPM
        assert out.flows["M1"] == pytest.approx(1014.2554667264994, abs=1e-5)
        assert out.flows["P1"] == pytest.approx(714.2554667264994, abs=1e-5)
        assert out.mass_residual < 1e-6
        assert out.head_residual < 1e-8
        assert out.next_tank_heads["T3"] == pytest.approx(910.6283, abs=1e-3)

    def test_pump_off_drains_tank(self) -> None:
        net = three_node()
        state = initial_state(net)
        d = resolve_demand(net, 13)
        out = simulate_step(net, state, d, Controls(speeds={"M1": 0.0}))
        assert out.flows["M1"] == pytest.approx(0.0, abs=1e-9)
        assert out.flows["P1"] == pytest.approx(-300.0, abs=1e-6)
        assert out.next_tank_heads["T3"] < 905.0
        # junction still pressurized from the tank
        assert out.heads["J2"] > 650.0

    def test_residual_fields_reflect_solution_quality(self) -> None:
        net = three_node()
        out = simulate_step(net, initial_state(net), resolve_demand(net, 0),
                            Controls(speeds={"M1": 1.0}))
        assert out.iterations > 0
        assert out.mass_residual < 1e-6
        assert out.head_residual < 1e-8

    def test_demand_vector_length_checked(self) -> None:
        net = three_node()
        with pytest.raises(ValueError, match="demand vector"):
            simulate_step(net, initial_state(net), np.zeros(3), Controls())

    def test_24h_rollout(self) -> None:
        net = three_node()
        demands = [resolve_demand(net, k) for k in range(24)]
        controls = [Controls(speeds={"M1": 1.0})] * 24
        states = run_simulation(net, controls, demands)
        assert len(states) == 24
        for s in states:
            assert s.mass_residual < 1e-6
            assert s.head_residual < 1e-8


class TestEightNodeSolve:
    def test_both_zones_fill_at_full_speed(self) -> None:
        net = eight_node()
        state = initial_state(net)
        d = resolve_demand(net, 13)
        out = simulate_step(net, state, d, Controls(speeds={"M1": 1.0, "M2": 1.0}))
        assert out.mass_residual < 1e-6
        assert out.head_residual < 1e-8
        assert out.next_tank_heads["T7"] > state.heads["T7"]
        assert out.next_tank_heads["T8"] > state.heads["T8"]
        # transfer pipe runs from the high zone down to the low one
        assert out.flows["P3"] > 0.0

    def test_gpv_throttling_reduces_flow(self) -> None:
        net = eight_node()
        d = resolve_demand(net, 13)
        full = simulate_step(net, initial_state(net), d,
                             Controls(speeds={"M1": 1.0, "M2": 1.0}))
        choked = simulate_step(net, initial_state(net), d,
                               Controls(speeds={"M1": 1.0, "M2": 1.0},
                                        openness={"W1": 0.05}))
        # lower openness means lower conductance in this formulation
        assert abs(choked.flows["W1"]) > abs(full.flows["W1"])

    def test_24h_rollout(self) -> None:
        net = eight_node()
        demands = [resolve_demand(net, k) for k in range(24)]
        controls = [Controls(speeds={"M1": 1.0, "M2": 1.0})] * 24
        states = run_simulation(net, controls, demands)
        for s in states:
            assert s.mass_residual < 1e-6
            assert s.head_residual < 1e-8


PRV_NET = """
[JUNCTIONS]
J2  600.0  0.0
J3  500.0  150.0

[RESERVOIRS]
R1  900.0

[TANKS]

[PIPES]
P1  R1  J2  2640.0  12.0  120.0

[PUMPS]

[VALVES]
V1  J2  J3  8.0  PRV  250.0

[OPTIONS]
HEADLOSS H-W
"""

FCV_NET = """
[JUNCTIONS]
J2  600.0  0.0
J3  500.0  30.0

[RESERVOIRS]
R1  900.0

[TANKS]
T4  760.0  40.0  10.0  60.0  30.0

[PIPES]
P1  R1  J2  2640.0  12.0  120.0
P2  J3  T4  2640.0  12.0  120.0

[PUMPS]

[VALVES]
V1  J2  J3  8.0  FCV  50.0

[OPTIONS]
HEADLOSS H-W
"""


class TestValveBehaviour:
    def test_active_prv_pins_downstream_head(self) -> None:
        net = parse_inp(PRV_NET)
        out = simulate_step(net, initial_state(net), resolve_demand(net, 0),
                            Controls())
        assert out.heads["J3"] == pytest.approx(500.0 + 250.0, abs=1e-7)
        assert out.flows["V1"] == pytest.approx(150.0, abs=1e-6)
        assert out.valve_statuses["V1"] is ValveStatus.ACTIVE

    def test_active_fcv_pins_flow(self) -> None:
        net = parse_inp(FCV_NET)
        out = simulate_step(net, initial_state(net), resolve_demand(net, 0),
                            Controls())
        assert out.flows["V1"] == pytest.approx(50.0, abs=1e-9)
        assert out.flows["P2"] == pytest.approx(20.0, abs=1e-6)
        assert out.valve_statuses["V1"] is ValveStatus.ACTIVE

    def test_advance_carries_tank_heads(self) -> None:
        net = three_node()
        out = simulate_step(net, initial_state(net), resolve_demand(net, 0),
                            Controls(speeds={"M1": 1.0}))
        nxt = advance(out)
        assert nxt.heads["T3"] == out.next_tank_heads["T3"]
