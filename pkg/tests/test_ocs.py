"""Unit tests for the per-event selection solvers."""
import itertools
import json

import numpy as np
import pytest

from drbandit.ocs import (
    FEAS_TOL,
    CustomerEvent,
    Selection,
    dump_instance,
    expected_reduction,
    knapsack_max,
    load_instance,
    shortfall_objective,
    solve_budget,
    solve_target,
    solve_target_one_sided,
)


def make_events(d, r, participates=None):
    n = len(d)
    if participates is None:
        participates = [True] * n
    return [
        CustomerEvent(customer_id=i, d=float(d[i]), r=float(r[i]),
                      participates=bool(participates[i]))
        for i in range(n)
    ]


def brute_budget(events, probs, budget):
    """Reference optimum: enumerate all subsets with the solver's cap rule."""
    cap = budget + FEAS_TOL * max(1.0, budget)
    n = len(events)
    best = (-1.0, float("inf"), ())
    for k in range(n + 1):
        for combo in itertools.combinations(range(n), k):
            cost = sum(events[i].r for i in combo)
            if cost > cap:
                continue
            value = sum(
                events[i].d * probs[i] for i in combo if events[i].participates
            )
            cand = (value, cost, combo)
            if value > best[0] + 1e-12 or (
                abs(value - best[0]) <= 1e-12
                and (cost < best[1] - 1e-12
                     or (abs(cost - best[1]) <= 1e-12 and combo < best[2]))
            ):
                best = cand
    return best


class TestCustomerEvent:
    def test_nonpositive_d_rejected(self):
        with pytest.raises(ValueError):
            CustomerEvent(customer_id=0, d=0.0, r=0.1)

    def test_negative_r_rejected(self):
        with pytest.raises(ValueError):
            CustomerEvent(customer_id=0, d=1.0, r=-0.1)


class TestSelection:
    def test_sorted_and_distinct(self):
        sel = Selection((3, 1, 2))
        assert sel.chosen == (1, 2, 3)
        assert 2 in sel and 5 not in sel
        assert len(sel) == 3

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            Selection((1, 1))


class TestExpectedReduction:
    def test_empty_is_zero(self):
        events = make_events([1.0], [0.5])
        assert expected_reduction(Selection(()), events, [0.4]) == 0.0

    def test_single_term(self):
        events = make_events([0.5], [0.1])
        got = expected_reduction(Selection((0,)), events, [0.4])
        assert got == pytest.approx(0.2)

    def test_sum(self):
        events = make_events([0.5, 1.0], [0.1, 0.1])
        got = expected_reduction(Selection((0, 1)), events, [0.4, 0.9])
        assert got == pytest.approx(1.1)

    def test_out_of_range_index(self):
        events = make_events([1.0], [0.5])
        with pytest.raises(IndexError):
            expected_reduction(Selection((3,)), events, [0.4])

    def test_misaligned_probs_rejected(self):
        events = make_events([1.0], [0.5])
        with pytest.raises(ValueError):
            expected_reduction(Selection(()), events, [0.4, 0.5])


class TestSolveBudget:
    def test_zero_budget_positive_prices(self):
        events = make_events([1.0, 1.0], [0.5, 0.5])
        res = solve_budget(events, [0.9, 0.9], 0.0)
        assert res.selection.chosen == ()
        assert res.objective == 0.0

    def test_worked_example(self):
        # profits dp = (0.6, 0.5, 0.4), prices (0.5, 0.4, 0.2), budget 0.6.
        events = make_events([0.6, 0.5, 0.4], [0.5, 0.4, 0.2])
        res = solve_budget(events, [1.0, 1.0, 1.0], 0.6)
        assert res.selection.chosen == (1, 2)
        assert res.objective == pytest.approx(0.9)

    def test_everything_fits(self):
        events = make_events([0.2, 0.3, 0.4], [0.1, 0.1, 0.1])
        res = solve_budget(events, [0.5, 0.5, 0.5], 10.0)
        assert res.selection.chosen == (0, 1, 2)

    def test_zero_price_positive_profit_always_selected(self):
        events = make_events([1.0, 1.0], [0.0, 5.0])
        res = solve_budget(events, [0.5, 0.5], 0.0)
        assert res.selection.chosen == (0,)

    def test_float_tight_budget(self):
        # 0.4 + 0.2 exceeds 0.6 by one ulp; the feasibility slack keeps it.
        events = make_events([0.6, 0.5, 0.4], [0.5, 0.4, 0.2])
        res = solve_budget(events, [1.0, 1.0, 1.0], 0.4 + 0.2)
        assert res.selection.chosen == (1, 2)

    def test_participation_flag_excludes(self):
        events = make_events([1.0, 1.0], [0.1, 0.1], participates=[False, True])
        res = solve_budget(events, [0.9, 0.5], 1.0)
        assert 0 not in res.selection.chosen

    def test_negative_budget_rejected(self):
        events = make_events([1.0], [0.1])
        with pytest.raises(ValueError):
            solve_budget(events, [0.5], -1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(23)
        for _ in range(200):
            n = int(rng.integers(1, 11))
            d = rng.uniform(0.05, 1.0, n)
            r = rng.uniform(0.0, 1.0, n)
            p = rng.uniform(0.0, 1.0, n)
            events = make_events(d, r)
            budget = float(rng.uniform(0.0, 0.6 * r.sum() + 0.1))
            res = solve_budget(events, p, budget)
            value, cost, combo = brute_budget(events, p, budget)
            assert res.objective == pytest.approx(value, abs=1e-9)
            assert res.selection.chosen == combo

    def test_budget_monotonicity(self):
        rng = np.random.default_rng(29)
        d = rng.uniform(0.1, 1.0, 12)
        r = rng.uniform(0.0, 1.0, 12)
        p = rng.uniform(0.0, 1.0, 12)
        events = make_events(d, r)
        prev = -1.0
        for budget in np.linspace(0.0, r.sum(), 15):
            value = solve_budget(events, p, float(budget)).objective
            assert value >= prev - 1e-12
            prev = value

    def test_knapsack_rejects_negative_weight(self):
        with pytest.raises(ValueError):
            knapsack_max([1.0], [-0.1], 1.0)


def brute_target(events, probs, target, max_count):
    a = np.array([e.d * p if e.participates else 0.0 for e, p in zip(events, probs)])
    v = np.array(
        [e.d**2 * p * (1 - p) if e.participates else 0.0 for e, p in zip(events, probs)]
    )
    idx = [i for i, e in enumerate(events) if e.participates]
    best = (float("inf"), 0, ())
    for k in range(min(max_count, len(idx)) + 1):
        for combo in itertools.combinations(idx, k):
            obj = (sum(a[list(combo)]) - target) ** 2 + sum(v[list(combo)])
            if obj < best[0] - 1e-12 or (
                abs(obj - best[0]) <= 1e-12 and (len(combo), combo) < best[1:]
            ):
                best = (obj, len(combo), combo)
    return best


class TestSolveTarget:
    def test_zero_target_empty(self):
        events = make_events([1.0, 2.0], [0.1, 0.1])
        res = solve_target(events, [0.5, 0.5], 0.0, 2)
        assert res.selection.chosen == ()
        assert res.objective == 0.0

    def test_deterministic_exact_match(self):
        events = make_events([1.0] * 4, [0.1] * 4)
        res = solve_target(events, [1.0] * 4, 2.0, 4)
        assert len(res.selection) == 2
        assert res.objective == pytest.approx(0.0, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(31)
        for _ in range(60):
            n = int(rng.integers(2, 11))
            d = rng.uniform(0.05, 1.0, n)
            p = rng.uniform(0.0, 1.0, n)
            events = make_events(d, np.zeros(n))
            target = float(rng.uniform(0.0, d.sum()))
            b = int(rng.integers(1, n + 1))
            res = solve_target(events, p, target, b)
            obj, _, combo = brute_target(events, p, target, b)
            assert res.objective == pytest.approx(obj, abs=1e-9)
            assert res.selection.chosen == combo

    def test_heuristic_flagged_and_near_exhaustive(self):
        rng = np.random.default_rng(37)
        d = rng.uniform(0.05, 1.0, 30)
        p = rng.uniform(0.0, 1.0, 30)
        events = make_events(d, np.zeros(30))
        res = solve_target(events, p, float(0.4 * d.sum()), 30, n_exact=10)
        assert not res.exact
        # Local optimum: no single removal or addition improves.
        a = d * p
        v = d**2 * p * (1 - p)
        mask = np.zeros(30, dtype=bool)
        mask[list(res.selection.chosen)] = True
        target = 0.4 * d.sum()
        A, V = a[mask].sum(), v[mask].sum()
        for i in range(30):
            if mask[i]:
                alt = (A - a[i] - target) ** 2 + V - v[i]
            else:
                alt = (A + a[i] - target) ** 2 + V + v[i]
            assert alt >= res.objective - 1e-9


class TestSolveTargetOneSided:
    def test_zero_target_empty(self):
        events = make_events([1.0], [0.1])
        res = solve_target_one_sided(events, [0.5], 0.0, 1)
        assert res.selection.chosen == ()
        assert res.objective == 0.0

    def test_single_customer(self):
        events = make_events([1.0], [0.1])
        res = solve_target_one_sided(events, [0.5], 1.0, 1)
        assert res.selection.chosen == (0,)
        assert res.objective == pytest.approx(0.5)

    def test_matches_outcome_enumeration(self):
        rng = np.random.default_rng(41)
        for _ in range(30):
            n = int(rng.integers(2, 9))
            d = rng.uniform(0.05, 1.0, n)
            p = rng.uniform(0.0, 1.0, n)
            events = make_events(d, np.zeros(n))
            target = float(rng.uniform(0.0, d.sum()))
            b = int(rng.integers(1, n + 1))
            res = solve_target_one_sided(events, p, target, b)
            # Independent oracle: enumerate subsets and Bernoulli outcomes.
            best = (float("inf"), 0, ())
            for k in range(b + 1):
                for combo in itertools.combinations(range(n), k):
                    obj = 0.0
                    for bits in itertools.product((0, 1), repeat=len(combo)):
                        w = 1.0
                        red = 0.0
                        for i, bit in zip(combo, bits):
                            w *= p[i] if bit else 1 - p[i]
                            red += d[i] * bit
                        obj += w * max(target - red, 0.0)
                    if obj < best[0] - 1e-12 or (
                        abs(obj - best[0]) <= 1e-12
                        and (len(combo), combo) < best[1:]
                    ):
                        best = (obj, len(combo), combo)
            assert res.objective == pytest.approx(best[0], abs=1e-9)
            assert res.selection.chosen == best[2]

    def test_monte_carlo_path_deterministic(self):
        rng_data = np.random.default_rng(43)
        d = rng_data.uniform(0.05, 1.0, 25)
        p = rng_data.uniform(0.0, 1.0, 25)
        events = make_events(d, np.zeros(25))
        a = solve_target_one_sided(
            events, p, 5.0, 25, rng=np.random.default_rng(7)
        )
        b = solve_target_one_sided(
            events, p, 5.0, 25, rng=np.random.default_rng(7)
        )
        assert not a.exact
        assert a.selection.chosen == b.selection.chosen
        assert a.objective == b.objective

    def test_shortfall_objective_enumeration_limit(self):
        events = make_events([1.0] * 21, [0.0] * 21)
        with pytest.raises(ValueError):
            shortfall_objective(range(21), events, [0.5] * 21, 1.0)


class TestInstanceFiles:
    def test_roundtrip(self, tmp_path):
        events = make_events([0.5, 1.0], [0.2, 0.3], participates=[True, False])
        doc = dump_instance(events, budget=0.7, target=1.5)
        path = tmp_path / "instance.json"
        path.write_text(json.dumps(doc))
        back = load_instance(str(path))
        assert back["budget"] == 0.7
        assert back["target"] == 1.5
        assert [e.customer_id for e in back["events"]] == [0, 1]
        assert back["events"][1].participates is False
        assert "network" not in back

    def test_load_from_dict(self):
        doc = {"customers": [{"id": 0, "d": 1.0, "r": 0.5}], "budget": 1.0}
        back = load_instance(doc)
        assert back["events"][0].d == 1.0
        assert back["events"][0].participates is True
