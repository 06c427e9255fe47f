import itertools
import json

import numpy as np
import pytest

from portdfcl import qp
from portdfcl.port_model import (DiscreteAssignment, InfeasibleInstance, ScheduleSolution, StaticParams,
                                 Task, VesselSpec, build_day_ahead, build_real_time, day_ahead_solution,
                                 evaluate_cost, load_fixture, real_time_solution, validate_schedule)
from portdfcl.scheduler import solve_fixed, solve_logistics


def _prices(T, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(T)
    pi = 50 + 20 * np.sin(2 * np.pi * t / 24) + rng.uniform(0, 5, T)
    p = 20 + 5 * np.cos(2 * np.pi * t / 24) + rng.uniform(0, 1, T)
    return pi, p


def _empty_task(T=4, **kw):
    return Task(0, StaticParams(T=T, **kw), ())


def _empty_assignment(T):
    return DiscreteAssignment(np.zeros(0), np.zeros(0, int), np.zeros(0, int), np.zeros((0, T), int))


def _one_vessel(T=8):
    st = StaticParams(T=T, n_cranes=3, berth_length=200.0)
    return Task(1, st, (VesselSpec(1, 7, 140.0, 1, 2, 2.0, 3.0, 1.5, 150.0, 2),))


class TestFixtures:
    def test_task1_first_row(self):
        v = load_fixture(1).vessels[0]
        assert (v.arrival_time, v.max_leave_time, v.cargo_volume) == (0, 14, 2866)
        assert (v.min_quay_crane, v.max_quay_crane, v.base_power_load) == (1, 3, 4)
        assert (v.charge_power_demand, v.charge_power_max, v.length, v.max_waiting_time) == (7, 1.59, 148, 5)

    def test_vessel_counts(self):
        assert [load_fixture(k).J for k in range(1, 7)] == [9, 9, 9, 11, 9, 9]

    def test_task5_has_no_charging(self):
        assert all(v.charge_power_demand == 0 for v in load_fixture(5).vessels)

    def test_unknown_id(self):
        with pytest.raises(KeyError):
            load_fixture(7)

    def test_json_roundtrip(self):
        task = load_fixture(3)
        assert Task.from_json(task.to_json()) == task

    def test_deadline_clamped(self, caplog):
        st = StaticParams(T=8)
        task = Task(0, st, (VesselSpec(0, 12, 100.0, 1, 2, 1.0, 0.0, 0.0, 50.0, 2),))
        assert task.vessels[0].max_leave_time == 8
        assert "clamped" in caplog.text

    def test_length_exceeds_berth(self):
        with pytest.raises(InfeasibleInstance):
            Task(0, StaticParams(), (VesselSpec(0, 10, 100.0, 1, 2, 1.0, 0.0, 0.0, 900.0, 2),))

    def test_static_param_invariants(self):
        with pytest.raises(ValueError):
            StaticParams(rho_plus=0.5)
        with pytest.raises(ValueError):
            StaticParams(e_init=20.0)
        with pytest.raises(ValueError):
            StaticParams(eta_ch=0.0)


class TestEvaluateCost:
    def test_no_deviation(self):
        assert evaluate_cost([1.0, 2.0], [1.0, 2.0], [10.0, 3.0]) == 16.0

    def test_over_consumption(self):
        assert evaluate_cost([1.0], [2.0], [10.0]) == pytest.approx(28.0, abs=1e-12)

    def test_under_consumption(self):
        assert evaluate_cost([2.0], [1.0], [10.0]) == pytest.approx(15.0, abs=1e-12)


class TestDayAhead:
    def test_empty_system(self):
        task = _empty_task()
        prog = build_day_ahead(task, np.zeros(4), np.zeros(4), fix=(np.zeros(4), np.zeros((0, 4))))
        pt = qp.solve(prog)
        assert abs(pt.objective) < 1e-9
        # the idle point (all powers zero, storage held at its initial level) is optimal
        x = np.zeros(prog.n)
        x[prog.var_blocks["E"]] = task.static.e_init
        _, A, b = prog.data()
        slack = b - A @ x
        eq = prog.cones == 0
        np.testing.assert_allclose(slack[eq], 0.0, atol=1e-12)
        assert np.all(slack[~eq] >= 0)
        assert prog.objective(x) == 0.0

    def test_task1_fix_from_own_solution_is_feasible(self):
        task = load_fixture(1)
        pi, p = _prices(task.T)
        sol = solve_logistics(task, pi, p)
        a = sol.discrete
        prog = build_day_ahead(task, pi, p, fix=(a.qc_power(task.static), a.V))
        pt = qp.solve(prog)
        assert pt.status == qp.OPTIMAL
        assert validate_schedule(task, sol) == []
        assert int(a.V.any(axis=1).sum()) == 9

    def test_one_vessel_rows_by_hand(self):
        task = _one_vessel()
        T = task.T
        pi, p = _prices(T, 1)
        V = np.zeros((1, T))
        V[0, 2:5] = 1.0
        P_QC = 0.32 * V[0] * 2
        prog = build_day_ahead(task, pi, p, fix=(P_QC, V))
        q, A, b = prog.data()
        A = A.toarray()
        vb, rb = prog.var_blocks, prog.row_blocks
        # window 1..6, charging admissible in all six slots
        assert vb["P_chg"].stop - vb["P_chg"].start == 6
        expected_sizes = {"imbalance_split": T, "power_balance": T, "charge_lower": 6, "charge_upper": 6,
                          "charge_demand": 1, "ess_initial": 1, "ess_dynamics": T, "ess_energy.lo": T,
                          "ess_energy.hi": T, "ess_terminal": 1, "ess_charge.lo": T, "ess_charge.hi": T,
                          "ess_discharge.lo": T, "ess_discharge.hi": T, "imbalance_plus.lo": T,
                          "imbalance_plus.hi": T, "imbalance_minus.lo": T, "imbalance_minus.hi": T,
                          "grid_limit.lo": T, "grid_limit.hi": T}
        assert {k: s.stop - s.start for k, s in rb.items()} == expected_sizes
        assert prog.m == sum(expected_sizes.values())
        chg = np.arange(vb["P_chg"].start, vb["P_chg"].stop)
        for t in range(T):
            row = A[rb["power_balance"].start + t]
            assert row[vb["P_b_prime"].start + t] == 1
            assert row[vb["P_ch"].start + t] == -1
            assert row[vb["P_dch"].start + t] == 1
            # shore charging enters with -V_t in berthed slots only
            want = np.zeros(6)
            if 2 <= t <= 4:
                want[t - 1] = -1.0
            np.testing.assert_array_equal(row[chg], want)
            base = 2.0 if 2 <= t <= 4 else 0.0
            assert b[rb["power_balance"].start + t] == pytest.approx(p[t] + P_QC[t] + base)
            dyn = A[rb["ess_dynamics"].start + t]
            assert dyn[vb["E"].start + t + 1] == 1 and dyn[vb["E"].start + t] == -1
            assert dyn[vb["P_ch"].start + t] == -0.9
            assert dyn[vb["P_dch"].start + t] == pytest.approx(1 / 0.9)
        np.testing.assert_allclose(b[rb["charge_upper"]], 1.5 * np.array([0, 1, 1, 1, 0, 0]))
        assert b[rb["charge_demand"]][0] == -3.0
        np.testing.assert_array_equal(A[rb["charge_demand"].start, chg], -np.ones(6))
        np.testing.assert_allclose(q[vb["P_b"]], pi)
        np.testing.assert_allclose(q[vb["dP_plus"]], 1.8 * pi)
        np.testing.assert_allclose(q[vb["dP_minus"]], -0.5 * pi)

    def test_forecast_length_checked(self):
        with pytest.raises(ValueError):
            build_day_ahead(_empty_task(), np.zeros(3), np.zeros(4), fix=(np.zeros(4), np.zeros((0, 4))))

    def test_fractional_v_out_of_range(self):
        task = _one_vessel()
        with pytest.raises(ValueError):
            build_day_ahead(task, np.zeros(8), np.zeros(8), fix=(np.zeros(8), np.full((1, 8), 1.5)))

    def test_forced_crane_overload_reported(self):
        st = StaticParams(T=8, n_cranes=2)
        v = VesselSpec(0, 4, 280.0, 2, 2, 1.0, 0.0, 0.0, 100.0, 0)
        task = Task(0, st, (v, v))
        with pytest.raises(InfeasibleInstance):
            build_day_ahead(task, np.zeros(8), np.zeros(8))

    def test_no_simultaneous_imbalance_directions(self):
        task = load_fixture(2)
        pi, p = _prices(task.T, 3)
        sol = solve_logistics(task, pi, p)
        d = sol.P_b_prime - sol.P_b
        assert np.all(np.abs(d) < 1e-6)
        rt = real_time_solution(task, sol, *_rt(task, sol, pi, p + 0.5))
        dp, dm = np.maximum(rt.P_b_prime - rt.P_b, 0), np.maximum(rt.P_b - rt.P_b_prime, 0)
        assert np.all(dp * dm == 0)

    def test_accepted_solution_cost_matches_objective(self):
        task = load_fixture(4)
        pi, p = _prices(task.T, 4)
        sol = solve_logistics(task, pi, p)
        assert validate_schedule(task, sol) == []
        cost = evaluate_cost(sol.P_b, sol.P_b_prime, pi)
        assert abs(cost - sol.objective) <= 1e-6 * max(1.0, abs(cost))

    def test_mixed_integer_encoding_consistent(self):
        task = load_fixture(1)
        pi, p = _prices(task.T, 5)
        sol = solve_logistics(task, pi, p)
        mip = build_day_ahead(task, pi, p)
        x = mip.encode(task, sol)
        assert mip.violations(x) == []
        assert mip.c @ x == pytest.approx(sol.objective, rel=1e-9)

    def test_relaxing_v_keeps_charging_feasible(self):
        task = _one_vessel()
        T = task.T
        pi, p = _prices(T, 6)
        rng = np.random.default_rng(0)
        V = np.zeros((1, T))
        V[0, 2:5] = 1.0
        prog = build_day_ahead(task, pi, p, fix=(np.zeros(T), V))
        x = qp.solve(prog).x
        rows = np.concatenate([np.arange(prog.row_blocks[k].start, prog.row_blocks[k].stop)
                               for k in ("charge_lower", "charge_upper", "charge_demand")])
        for _ in range(20):
            Vh = task.adm_to_v(np.clip(task.v_to_adm(V) + rng.uniform(0, 1, len(task.admissible)), 0, 1))
            relaxed = build_day_ahead(task, pi, p, fix=(np.zeros(T), Vh))
            _, A, b = relaxed.data()
            assert np.all((b - A @ x)[rows] >= -1e-9)


def _rt(task, da, pi, p):
    prog = build_real_time(task, da, pi, p)
    return prog, qp.solve(prog).x


class TestRealTime:
    def test_perfect_forecast_reproduces_day_ahead(self):
        task = load_fixture(1)
        pi, p = _prices(task.T, 7)
        da = solve_logistics(task, pi, p)
        rt = real_time_solution(task, da, *_rt(task, da, pi, p))
        np.testing.assert_allclose(rt.P_b_prime, da.P_b_prime, atol=1e-6)
        assert rt.objective == pytest.approx(da.objective, rel=1e-9)
        assert validate_schedule(task, rt) == []

    def test_extra_load_settles_at_rho_plus(self):
        task = _empty_task(T=4)
        pi = np.array([10.0, 20.0, 30.0, 40.0])
        p_hat = np.ones(4)
        da = solve_fixed(task, pi, p_hat, _empty_assignment(4))
        p = p_hat.copy()
        p[2] += 1.0
        rt = real_time_solution(task, da, *_rt(task, da, pi, p))
        d = rt.P_b_prime - rt.P_b
        np.testing.assert_allclose(d, [0, 0, 1, 0], atol=1e-7)
        assert rt.objective - da.objective == pytest.approx(1.8 * 30.0, abs=1e-6)

    def test_one_vessel_against_grid_search(self):
        task = _one_vessel()
        T = task.T
        pi, p_hat = _prices(T, 8)
        a = DiscreteAssignment(np.zeros(1), np.array([2]), np.array([4]), np.array([[0, 0, 1, 1, 1, 0, 0, 0]]))
        da = solve_fixed(task, pi, p_hat, a)
        p = p_hat + np.array([0.5, -0.3, 1.2, -2.0, 0.8, 0.1, -0.4, 0.0])
        prog, x = _rt(task, da, pi, p)
        rt = real_time_solution(task, da, prog, x)
        best = np.inf
        grid = np.round(np.arange(0, 1.5 + 1e-9, 0.1), 10)
        base = da.P_QC + da.P_ch - da.P_dch + p
        for c in itertools.product(grid, repeat=3):
            if sum(c) < 3.0 - 1e-9:
                continue
            load = base.copy()
            load[2:5] += 2.0 + np.array(c)
            best = min(best, evaluate_cost(da.P_b, load, pi))
        assert rt.objective <= best + 1e-6
        assert abs(rt.objective - best) <= 0.01 * abs(best)

    def test_charging_capacity_shortfall(self):
        task = _one_vessel()
        T = task.T
        pi, p = _prices(T, 9)
        a = DiscreteAssignment(np.zeros(1), np.array([2]), np.array([2]), np.array([[0, 0, 1, 0, 0, 0, 0, 0]]))
        sol = ScheduleSolution(np.zeros(T), np.zeros(T), np.zeros(T), np.zeros(T), np.zeros(T), np.zeros(T),
                               np.zeros((1, T)), np.full(T + 1, 7.5), a, 0.0, p, pi)
        with pytest.raises(InfeasibleInstance):
            build_real_time(task, sol, pi, p)


def _hand_solution(T=4, E=None, ch=None, dch=None):
    p = np.ones(T)
    ch = np.zeros(T) if ch is None else ch
    dch = np.zeros(T) if dch is None else dch
    Pbp = p + ch - dch
    E = np.full(T + 1, 7.5) if E is None else E
    return ScheduleSolution(Pbp.copy(), Pbp, ch, dch, np.zeros(T), np.zeros(T), np.zeros((0, T)), E,
                            _empty_assignment(T), 0.0, p, np.ones(T))


class TestValidator:
    def test_ess_arithmetic(self):
        task = _empty_task(T=4)
        ch = np.array([1.0, 0, 0, 0])
        dch = np.array([0, 0.9 * 0.9, 0, 0])
        E = np.array([7.5, 8.4, 7.5, 7.5, 7.5])
        assert validate_schedule(task, _hand_solution(E=E, ch=ch, dch=dch)) == []
        # discharging 1 MW removes 1/0.9 MWh
        dch = np.array([0, 1.0, 0, 0])
        E = np.array([7.5, 8.4, 8.4 - 1 / 0.9, 8.4 - 1 / 0.9, 8.4 - 1 / 0.9])
        names = [v.constraint for v in validate_schedule(task, _hand_solution(E=E, ch=ch, dch=dch))]
        assert names == ["ess_terminal"]

    def test_single_energy_violation(self):
        task = _empty_task(T=4, e_max=8.0, e_init=7.5)
        ch = np.array([1.0, 0, 0, 0])
        dch = np.array([0, 0.81, 0, 0])
        E = np.array([7.5, 8.4, 7.5, 7.5, 7.5])
        out = validate_schedule(task, _hand_solution(E=E, ch=ch, dch=dch))
        assert len(out) == 1
        assert out[0].constraint == "ess_energy_max" and out[0].row == 1
        assert out[0].magnitude == pytest.approx(0.4)

    def test_berth_overlap(self):
        st = StaticParams(T=8, n_cranes=4, berth_length=300.0)
        v = VesselSpec(0, 8, 140.0, 1, 2, 1.0, 0.0, 0.0, 150.0, 3)
        task = Task(0, st, (v, v))
        pi, p = _prices(8, 10)
        cranes = np.zeros((2, 8), int)
        cranes[:, 1:3] = 1
        a = DiscreteAssignment(np.array([0.0, 100.0]), np.array([1, 1]), np.array([2, 2]), cranes)
        sol = solve_fixed(task, pi, p, a)
        out = validate_schedule(task, sol)
        assert [x.constraint for x in out] == ["berth_overlap"]
        assert out[0].magnitude == pytest.approx(50.0)
        a.berth = np.array([0.0, 150.0])
        assert validate_schedule(task, solve_fixed(task, pi, p, a)) == []

    def test_crane_count_violation(self):
        st = StaticParams(T=8, n_cranes=4)
        task = Task(0, st, (VesselSpec(0, 8, 280.0, 2, 2, 1.0, 0.0, 0.0, 150.0, 3),))
        cranes = np.zeros((1, 8), int)
        cranes[0, 1] = 2
        cranes[0, 2] = 1
        a = DiscreteAssignment(np.zeros(1), np.array([1]), np.array([2]), cranes)
        out = validate_schedule(task, solve_fixed(task, *_prices(8), a))
        assert [x.constraint for x in out] == ["crane_count_min"]


def test_solution_dict_roundtrip():
    task = load_fixture(6)
    pi, p = _prices(task.T, 11)
    sol = solve_logistics(task, pi, p)
    back = ScheduleSolution.from_dict(json.loads(json.dumps(sol.to_dict())), K=task.static.n_cranes)
    np.testing.assert_array_equal(back.P_b, sol.P_b)
    np.testing.assert_array_equal(back.discrete.V, sol.discrete.V)
    assert back.objective == sol.objective
    assert validate_schedule(task, back) == []
