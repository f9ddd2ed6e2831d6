"""Unit tests for radial-network feasibility and constrained selection."""
import itertools

import numpy as np
import pytest

from drbandit.network import (
    Bus,
    Line,
    RadialNetwork,
    check_network,
    solve_budget_network,
)
from drbandit.ocs import FEAS_TOL, CustomerEvent, Selection, solve_budget


def make_events(d, r):
    return [
        CustomerEvent(customer_id=i, d=float(d[i]), r=float(r[i]))
        for i in range(len(d))
    ]


def two_bus(s_cap=1.0, u_min=0.8, u_max=1.2):
    return RadialNetwork(
        buses=[Bus(0, u_min, u_max), Bus(1, u_min, u_max)],
        lines=[Line(0, 1, r=0.01, x=0.01, s_cap=s_cap)],
        root=0,
        customer_bus={0: 1},
        eta={0: 0.5},
    )


def random_tree(rng, n_buses, events, wide=True):
    """Random radial network over ``n_buses`` with customers spread around."""
    lines = []
    for k in range(1, n_buses):
        parent = int(rng.integers(0, k))
        lines.append(
            Line(parent, k, r=float(rng.uniform(0.001, 0.02)),
                 x=float(rng.uniform(0.001, 0.02)),
                 s_cap=float(rng.uniform(2.0, 5.0)) if wide else
                 float(rng.uniform(0.3, 1.2)))
        )
    span = (0.0, 2.0) if wide else (0.9, 1.1)
    buses = [Bus(k, span[0], span[1], p_in=float(rng.uniform(0, 0.1)))
             for k in range(n_buses)]
    return RadialNetwork(
        buses=buses,
        lines=lines,
        root=0,
        customer_bus={e.customer_id: int(rng.integers(0, n_buses))
                      for e in events},
        eta={e.customer_id: float(rng.uniform(0.0, 0.8)) for e in events},
    )


class TestValidation:
    def test_bus_bounds(self):
        with pytest.raises(ValueError):
            Bus(0, 1.2, 0.8)

    def test_line_cap(self):
        with pytest.raises(ValueError):
            Line(0, 1, 0.01, 0.01, 0.0)

    def test_cycle_rejected(self):
        with pytest.raises(ValueError):
            RadialNetwork(
                buses=[Bus(0, 0.8, 1.2), Bus(1, 0.8, 1.2)],
                lines=[Line(0, 1, 0.01, 0.01, 1.0), Line(1, 0, 0.01, 0.01, 1.0)],
                root=0, customer_bus={}, eta={},
            )

    def test_disconnected_rejected(self):
        with pytest.raises(ValueError):
            RadialNetwork(
                buses=[Bus(0, 0.8, 1.2), Bus(1, 0.8, 1.2), Bus(2, 0.8, 1.2)],
                lines=[Line(1, 2, 0.01, 0.01, 1.0), Line(2, 1, 0.01, 0.01, 1.0)],
                root=0, customer_bus={}, eta={},
            )

    def test_unknown_customer_bus(self):
        with pytest.raises(ValueError):
            RadialNetwork(
                buses=[Bus(0, 0.8, 1.2)], lines=[], root=0,
                customer_bus={0: 9}, eta={0: 0.5},
            )


class TestCheckNetwork:
    def test_empty_selection_zero_base(self):
        net = two_bus()
        report = check_network(Selection(()), make_events([0.5], [0.1]), net)
        assert report.feasible
        assert report.flows_p[0] == 0.0
        assert report.flows_q[0] == 0.0
        assert report.voltages[1] == pytest.approx(net.u_root)

    def test_worked_two_bus_feasible(self):
        net = two_bus(s_cap=1.0)
        report = check_network(Selection((0,)), make_events([0.5], [0.1]), net)
        assert report.flows_p[0] == pytest.approx(0.5)
        assert report.flows_q[0] == pytest.approx(0.25)
        assert report.feasible
        # U drop 2 (0.01*0.5 + 0.01*0.25) = 0.015
        assert report.voltages[1] == pytest.approx(1.0 - 0.015)

    def test_worked_two_bus_thermal_violation(self):
        net = two_bus(s_cap=0.5)
        report = check_network(Selection((0,)), make_events([0.5], [0.1]), net)
        assert not report.feasible
        (line_idx, slack), = report.thermal_violations
        assert line_idx == 0
        assert slack == pytest.approx(np.hypot(0.5, 0.25) - 0.5, abs=1e-6)
        assert slack == pytest.approx(0.059, abs=1e-3)

    def test_voltage_violation_reported(self):
        net = two_bus(u_min=0.999)
        report = check_network(Selection((0,)), make_events([0.5], [0.1]), net)
        assert not report.feasible
        (bus_id, slack), = report.voltage_violations
        assert bus_id == 1
        assert slack == pytest.approx(0.999 - 0.985, abs=1e-9)

    def test_flow_conservation_random_trees(self):
        rng = np.random.default_rng(47)
        for _ in range(20):
            n = int(rng.integers(3, 9))
            events = make_events(rng.uniform(0.1, 1.0, 5), rng.uniform(0, 1, 5))
            net = random_tree(rng, n, events)
            sel = Selection(tuple(
                int(i) for i in np.where(rng.random(5) < 0.5)[0]
            ))
            report = check_network(sel, events, net)
            # Conservation at each non-root bus: parent inflow equals bus
            # demand plus child outflows.
            demand = {b.id: b.p_in for b in net.buses}
            for i in sel.chosen:
                demand[net.customer_bus[events[i].customer_id]] += events[i].d
            for node in net._order:
                if node == net.root:
                    continue
                inflow = report.flows_p[net._parent_line[node]]
                children = [c for c, li in net._parent_line.items()
                            if c != node and
                            (net.lines[li].src == node or net.lines[li].dst == node)]
                out = sum(report.flows_p[net._parent_line[c]] for c in children)
                assert inflow == pytest.approx(demand[node] + out, rel=1e-12, abs=1e-12)


class TestSolveBudgetNetwork:
    def test_unconstrained_matches_plain_knapsack(self):
        rng = np.random.default_rng(53)
        d = rng.uniform(0.1, 1.0, 10)
        r = rng.uniform(0.0, 1.0, 10)
        p = rng.uniform(0.0, 1.0, 10)
        events = make_events(d, r)
        net = random_tree(rng, 5, events, wide=True)
        # Replace the limits with values no selection can reach.
        net = RadialNetwork(
            buses=[Bus(b.id, -100.0, 100.0, b.p_in, b.q_in) for b in net.buses],
            lines=[Line(l.src, l.dst, l.r, l.x, 1000.0) for l in net.lines],
            root=net.root, customer_bus=net.customer_bus, eta=net.eta,
        )
        budget = float(0.4 * r.sum())
        res_net = solve_budget_network(events, p, budget, net)
        res_plain = solve_budget(events, p, budget)
        assert res_net.selection.chosen == res_plain.selection.chosen
        assert res_net.objective == pytest.approx(res_plain.objective)

    def test_two_bus_infeasible_customer(self):
        net = two_bus(s_cap=0.5)
        res = solve_budget_network(make_events([0.5], [0.1]), [0.9], 1.0, net)
        assert res.selection.chosen == ()
        assert res.feasible  # empty selection is feasible

    def test_infeasible_even_empty(self):
        net = RadialNetwork(
            buses=[Bus(0, 0.8, 1.2), Bus(1, 0.8, 1.2, p_in=2.0)],
            lines=[Line(0, 1, 0.01, 0.01, s_cap=1.0)],
            root=0, customer_bus={0: 1}, eta={0: 0.5},
        )
        res = solve_budget_network(make_events([0.5], [0.1]), [0.9], 1.0, net)
        assert not res.feasible
        assert res.selection.chosen == ()

    def test_matches_brute_force(self):
        rng = np.random.default_rng(59)
        for _ in range(25):
            n = int(rng.integers(2, 9))
            d = rng.uniform(0.1, 1.0, n)
            r = rng.uniform(0.0, 1.0, n)
            p = rng.uniform(0.0, 1.0, n)
            events = make_events(d, r)
            net = random_tree(rng, int(rng.integers(2, 6)), events, wide=False)
            budget = float(rng.uniform(0.1, 0.8) * r.sum())
            res = solve_budget_network(events, p, budget, net)
            cap = budget + FEAS_TOL * max(1.0, budget)
            best = (-1.0, float("inf"), None)
            for k in range(n + 1):
                for combo in itertools.combinations(range(n), k):
                    cost = float(r[list(combo)].sum())
                    if cost > cap:
                        continue
                    if not check_network(Selection(combo), events, net).feasible:
                        continue
                    value = float((d[list(combo)] * p[list(combo)]).sum())
                    if value > best[0] + 1e-12 or (
                        abs(value - best[0]) <= 1e-12
                        and (cost < best[1] - 1e-12
                             or (abs(cost - best[1]) <= 1e-12
                                 and combo < best[2]))
                    ):
                        best = (value, cost, combo)
            if best[2] is None:
                assert not res.feasible
            else:
                assert res.objective == pytest.approx(best[0], abs=1e-9)
                assert res.selection.chosen == best[2]

    def test_returned_selection_always_feasible(self):
        rng = np.random.default_rng(61)
        for _ in range(10):
            n = int(rng.integers(2, 10))
            events = make_events(rng.uniform(0.1, 1.0, n), rng.uniform(0, 1, n))
            net = random_tree(rng, 4, events, wide=False)
            res = solve_budget_network(
                events, rng.uniform(0, 1, n), 2.0, net
            )
            if res.feasible:
                assert check_network(res.selection, events, net).feasible


class TestSerialization:
    def test_roundtrip(self):
        net = two_bus()
        back = RadialNetwork.from_dict(net.to_dict())
        assert back.root == net.root
        assert back.customer_bus == net.customer_bus
        assert back.eta == net.eta
        assert back.lines[0].s_cap == net.lines[0].s_cap
        assert back.buses[1].u_max == net.buses[1].u_max
