"""Window-model matrices and the exact-residual certifier."""

import numpy as np
import pytest

from gpmpc.dae import build_dae, eval_dae_residual, trajectory_from_states
from gpmpc.fixtures import eight_node, three_node
from gpmpc.hydraulics import CUFT_PER_GPM_HR, Controls, advance, initial_state, simulate_step
from gpmpc.network import resolve_demand


class TestBuildThreeNode:
    def test_shapes_and_ordering(self) -> None:
        net = three_node()
        m = build_dae(net, dt=1.0)
        assert m.A.shape == (1, 1) and m.A[0, 0] == 1.0
        assert m.B_u.shape == (1, 1)
        assert m.B_v.shape == (1, 1)
        assert m.E_u.shape == (1, 1)
        assert m.E_v.shape == (1, 1)
        assert m.E_d.shape == (1, 1) and m.E_d[0, 0] == -1.0
        assert m.u_index == {"M1": 0}
        assert m.pipe_index == {"P1": 0}

    def test_tank_dynamics_coefficients(self) -> None:
        net = three_node()
        m = build_dae(net, dt=1.0)
        area = net.tank("T3").area
        # pump M1 touches only R1 and J2, never the tank
        assert m.B_u[0, 0] == 0.0
        # pipe P1 discharges into T3
        assert m.B_v[0, 0] == pytest.approx(CUFT_PER_GPM_HR / area)

    def test_mass_balance_coefficients(self) -> None:
        net = three_node()
        m = build_dae(net, dt=1.0)
        assert m.E_u[0, 0] == 1.0   # pump into J2
        assert m.E_v[0, 0] == -1.0  # pipe leaves J2

    def test_head_row_orientation(self) -> None:
        net = three_node()
        m = build_dae(net, dt=1.0)
        # pipe P1: J2 -> T3
        assert m.E_l1[0, 0] == 1.0
        assert m.E_x1[0, 0] == -1.0
        assert np.all(m.E_r1 == 0.0)
        # pump M1: R1 -> J2
        assert m.E_r2[0, 0] == 1.0
        assert m.E_l2[0, 0] == -1.0
        assert np.all(m.E_x2 == 0.0)

    def test_dt_scales_dynamics_only(self) -> None:
        net = three_node()
        m1 = build_dae(net, dt=1.0)
        m2 = build_dae(net, dt=0.5)
        assert m2.B_v[0, 0] == pytest.approx(0.5 * m1.B_v[0, 0])
        assert np.array_equal(m1.E_v, m2.E_v)

    def test_rejects_bad_dt(self) -> None:
        with pytest.raises(ValueError, match="dt"):
            build_dae(three_node(), dt=0.0)


class TestBuildEightNode:
    def test_shapes(self) -> None:
        net = eight_node()
        m = build_dae(net, dt=1.0)
        assert m.B_u.shape == (2, 3)    # 2 pumps + 1 valve
        assert m.B_v.shape == (2, 6)
        assert m.E_u.shape == (5, 3)
        assert m.E_x1.shape == (6, 2)
        assert m.E_l3.shape == (1, 5)
        assert m.reservoir_heads.tolist() == [425.0]

    def test_columns_are_id_sorted(self) -> None:
        m = build_dae(eight_node(), dt=1.0)
        assert m.u_index == {"M1": 0, "M2": 1, "W1": 2}
        assert list(m.pipe_index) == ["P1", "P2", "P3", "P4", "P5", "P6"]

    def test_gpv_head_row(self) -> None:
        net = eight_node()
        m = build_dae(net, dt=1.0)
        # W1: J3 -> J6
        j = m.junction_index
        assert m.E_l3[0, j["J3"]] == 1.0
        assert m.E_l3[0, j["J6"]] == -1.0


class TestResidualCertifier:
    def _rollout(self, net, speeds, H):
        states = []
        cur = initial_state(net)
        demands = []
        for k in range(H):
            d = resolve_demand(net, k)
            out = simulate_step(net, cur, d, Controls(speeds=speeds))
            states.append(out)
            demands.append(d)
            cur = advance(out)
        return states, np.array(demands)

    def test_simulator_trajectory_certifies_clean(self) -> None:
        net = three_node()
        states, demands = self._rollout(net, {"M1": 1.0}, 6)
        traj = trajectory_from_states(net, states)
        res = eval_dae_residual(build_dae(net, 1.0), traj, demands, net)
        assert res.max_mass_gpm < 1e-6
        assert res.max_head_rel < 1e-8

    def test_eight_node_trajectory_certifies_clean(self) -> None:
        net = eight_node()
        states, demands = self._rollout(net, {"M1": 1.0, "M2": 1.0}, 6)
        traj = trajectory_from_states(net, states)
        res = eval_dae_residual(build_dae(net, 1.0), traj, demands, net)
        assert res.max_mass_gpm < 1e-6
        assert res.max_head_rel < 1e-8

    def test_corrupted_flow_is_flagged(self) -> None:
        net = three_node()
        states, demands = self._rollout(net, {"M1": 1.0}, 3)
        traj = trajectory_from_states(net, states)
        traj.v[1, 0] += 25.0  # break mass balance and the pipe head row
        res = eval_dae_residual(build_dae(net, 1.0), traj, demands, net)
        assert res.max_mass_gpm > 20.0
        assert res.max_head_rel > 1e-3

    def test_corrupted_tank_head_is_flagged(self) -> None:
        net = three_node()
        states, demands = self._rollout(net, {"M1": 1.0}, 3)
        traj = trajectory_from_states(net, states)
        traj.x[2, 0] += 0.5
        res = eval_dae_residual(build_dae(net, 1.0), traj, demands, net)
        assert res.max_mass_gpm > 10.0  # half a foot of tank volume in an hour

    def test_pump_off_mask(self) -> None:
        net = three_node()
        states, demands = self._rollout(net, {"M1": 1.0}, 2)
        traj = trajectory_from_states(net, states)
        pump_on = np.array([[True], [False]])
        res = eval_dae_residual(build_dae(net, 1.0), traj, demands, net,
                                pump_on=pump_on)
        # slot 1 claims the pump is off, but the trajectory has it flowing
        assert res.pump_off_gpm[1, 0] == pytest.approx(abs(traj.u[1, 0]))
        assert res.pump_off_gpm[0, 0] == 0.0
