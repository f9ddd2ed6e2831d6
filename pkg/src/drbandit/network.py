"""Radial-network feasibility via the linearized DistFlow model.

The grid is a tree rooted at the substation bus.  Given a selection, the
flow on each line is uniquely determined by accumulating bus demands
leaf-to-root, and squared voltage magnitudes follow root-to-leaf from
U_parent − U_child = 2 (R·P + X·Q).  Feasibility then reduces to line
thermal caps P² + Q² ≤ S̄² and voltage bounds, each checked exactly.

Sign convention: bus demands (``p_in``, ``q_in`` and the selected
customers' d, ηd terms) are consumption-positive, so the flow on a line
equals the net demand of the subtree below it.
"""
from __future__ import annotations

import bisect
import sys
from dataclasses import dataclass

import numpy as np

from .ocs import (
    FEAS_TOL,
    Selection,
    SolveResult,
    VALUE_TOL,
    _check_alignment,
    _tie_better,
)

__all__ = [
    "Bus",
    "Line",
    "RadialNetwork",
    "NetworkReport",
    "check_network",
    "solve_budget_network",
]


@dataclass(frozen=True)
class Bus:
    id: int
    u_min: float  # lower bound on squared voltage magnitude
    u_max: float
    p_in: float = 0.0  # base active demand (consumption-positive)
    q_in: float = 0.0

    def __post_init__(self):
        if not self.u_min < self.u_max:
            raise ValueError(f"bus {self.id}: u_min must be < u_max")


@dataclass(frozen=True)
class Line:
    src: int
    dst: int
    r: float
    x: float
    s_cap: float  # apparent power capacity

    def __post_init__(self):
        if not self.s_cap > 0:
            raise ValueError(f"line {self.src}-{self.dst}: s_cap must be > 0")


@dataclass
class RadialNetwork:
    """Tree-structured distribution grid with a customer-to-bus map."""

    buses: list[Bus]
    lines: list[Line]
    root: int
    customer_bus: dict[int, int]  # customer index -> bus id
    eta: dict[int, float]  # customer index -> power factor constant
    u_root: float = 1.0

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate bus ids")
        self._bus_by_id = {b.id: b for b in self.buses}
        if self.root not in self._bus_by_id:
            raise ValueError("root bus not present")
        if len(self.lines) != len(self.buses) - 1:
            raise ValueError("edge set does not form a tree")
        adj: dict[int, list[tuple[int, int]]] = {i: [] for i in ids}
        for li, ln in enumerate(self.lines):
            if ln.src not in self._bus_by_id or ln.dst not in self._bus_by_id:
                raise ValueError("line references unknown bus")
            adj[ln.src].append((ln.dst, li))
            adj[ln.dst].append((ln.src, li))
        # BFS from the root; orientation parent -> child.
        parent_line: dict[int, int] = {}
        order = [self.root]
        seen = {self.root}
        for node in order:
            for nb, li in adj[node]:
                if nb not in seen:
                    seen.add(nb)
                    parent_line[nb] = li
                    order.append(nb)
        if len(seen) != len(ids):
            raise ValueError("edge set does not form a tree (disconnected)")
        self._order = order  # root-first BFS order
        self._parent_line = parent_line
        for cust, bus in self.customer_bus.items():
            if bus not in self._bus_by_id:
                raise ValueError(f"customer {cust} mapped to unknown bus {bus}")

    def bus(self, bus_id: int) -> Bus:
        return self._bus_by_id[bus_id]

    @classmethod
    def from_dict(cls, doc: dict) -> "RadialNetwork":
        """Parse the instance-file sub-schema (see ocs.load_instance)."""
        buses = [
            Bus(
                id=int(b["id"]),
                u_min=float(b["u_min"]),
                u_max=float(b["u_max"]),
                p_in=float(b.get("p_in", 0.0)),
                q_in=float(b.get("q_in", 0.0)),
            )
            for b in doc["buses"]
        ]
        lines = [
            Line(
                src=int(l["from"]),
                dst=int(l["to"]),
                r=float(l["r"]),
                x=float(l["x"]),
                s_cap=float(l["s_cap"]),
            )
            for l in doc["lines"]
        ]
        eta = doc["eta"]
        if isinstance(eta, dict):
            eta = {int(k): float(v) for k, v in eta.items()}
        else:
            eta = {i: float(v) for i, v in enumerate(eta)}
        return cls(
            buses=buses,
            lines=lines,
            root=int(doc["root"]),
            customer_bus={int(k): int(v) for k, v in doc["customer_bus"].items()},
            eta=eta,
            u_root=float(doc.get("u_root", 1.0)),
        )

    def to_dict(self) -> dict:
        return {
            "buses": [
                {
                    "id": b.id,
                    "u_min": b.u_min,
                    "u_max": b.u_max,
                    "p_in": b.p_in,
                    "q_in": b.q_in,
                }
                for b in self.buses
            ],
            "lines": [
                {"from": l.src, "to": l.dst, "r": l.r, "x": l.x, "s_cap": l.s_cap}
                for l in self.lines
            ],
            "root": self.root,
            "customer_bus": {str(k): v for k, v in self.customer_bus.items()},
            "eta": {str(k): v for k, v in self.eta.items()},
            "u_root": self.u_root,
        }


@dataclass(frozen=True)
class NetworkReport:
    """DistFlow solution plus the list of violated limits with slacks."""

    feasible: bool
    flows_p: dict[int, float]  # line index -> active flow (toward child)
    flows_q: dict[int, float]
    voltages: dict[int, float]  # bus id -> squared voltage magnitude
    thermal_violations: list[tuple[int, float]]  # (line index, slack)
    voltage_violations: list[tuple[int, float]]  # (bus id, slack)


def check_network(sel: Selection, events, net: RadialNetwork) -> NetworkReport:
    """Solve the linearized DistFlow for one selection and check limits."""
    p_dem = {b.id: b.p_in for b in net.buses}
    q_dem = {b.id: b.q_in for b in net.buses}
    for i in sel.chosen:
        bus = net.customer_bus.get(events[i].customer_id)
        if bus is None:
            raise ValueError(f"customer {events[i].customer_id} not mapped to a bus")
        d = events[i].d
        p_dem[bus] += d
        q_dem[bus] += net.eta.get(events[i].customer_id, 0.0) * d

    # Leaf-to-root accumulation of subtree demand -> line flows.
    sub_p = dict(p_dem)
    sub_q = dict(q_dem)
    flows_p: dict[int, float] = {}
    flows_q: dict[int, float] = {}
    for node in reversed(net._order):
        if node == net.root:
            continue
        li = net._parent_line[node]
        ln = net.lines[li]
        parent = ln.src if ln.dst == node else ln.dst
        flows_p[li] = sub_p[node]
        flows_q[li] = sub_q[node]
        sub_p[parent] += sub_p[node]
        sub_q[parent] += sub_q[node]

    # Root-to-leaf voltage propagation.
    voltages = {net.root: net.u_root}
    for node in net._order:
        if node == net.root:
            continue
        li = net._parent_line[node]
        ln = net.lines[li]
        parent = ln.src if ln.dst == node else ln.dst
        voltages[node] = voltages[parent] - 2.0 * (
            ln.r * flows_p[li] + ln.x * flows_q[li]
        )

    thermal = []
    for li, ln in enumerate(net.lines):
        s = float(np.hypot(flows_p[li], flows_q[li]))
        if s > ln.s_cap:
            thermal.append((li, s - ln.s_cap))
    voltage = []
    for b in net.buses:
        u = voltages[b.id]
        if u < b.u_min:
            voltage.append((b.id, b.u_min - u))
        elif u > b.u_max:
            voltage.append((b.id, u - b.u_max))
    return NetworkReport(
        feasible=not thermal and not voltage,
        flows_p=flows_p,
        flows_q=flows_q,
        voltages=voltages,
        thermal_violations=thermal,
        voltage_violations=voltage,
    )


def solve_budget_network(
    events,
    probs,
    budget: float,
    net: RadialNetwork,
    node_limit: int = 200_000,
) -> SolveResult:
    """Budget knapsack restricted to network-feasible selections.

    Branch and bound over inclusion decisions in profit-density order with
    the fractional-knapsack upper bound, checking DistFlow feasibility at
    complete nodes.  When all base demands, power factors and loads are
    non-negative, adding customers only increases flows and voltage
    drops, so an infeasible partial selection prunes its supersets.
    Exact for populations up to 25 (and beyond, until ``node_limit``
    nodes have been explored; past that the best found is returned with
    ``exact=False``).  ``feasible=False`` signals that no selection, even
    the empty one, satisfies the network limits.
    """
    probs = _check_alignment(events, probs)
    if budget < 0:
        raise ValueError("budget must be >= 0")
    d = np.array([e.d for e in events])
    r = np.array([e.r for e in events])
    part = np.array([e.participates for e in events])
    profits = np.where(part, d * probs, 0.0)

    monotone = all(b.p_in >= 0 and b.q_in >= 0 for b in net.buses) and all(
        v >= 0 for v in net.eta.values()
    )
    cap = budget + FEAS_TOL * max(1.0, budget)

    cand = [i for i in range(len(events)) if part[i] and profits[i] > 0]
    order = sorted(
        cand,
        key=lambda i: (-(profits[i] / r[i]) if r[i] > 0 else -np.inf, i),
    )
    p = profits[order]
    w = r[order]
    n = len(order)
    pref_w = np.concatenate(([0.0], np.cumsum(w)))
    pref_p = np.concatenate(([0.0], np.cumsum(p)))

    def fractional_bound(level, value, weight):
        room = cap - weight
        j = bisect.bisect_right(pref_w, pref_w[level] + room) - 1
        j = max(j, level)
        bound = value + pref_p[j] - pref_p[level]
        if j < n and w[j] > 0:
            rem = room - (pref_w[j] - pref_w[level])
            bound += rem * p[j] / w[j]
        return bound

    best = [-np.inf, np.inf, None]  # value, cost, chosen tuple (None = none yet)
    counters = {"nodes": 0}
    choice = np.zeros(n, dtype=bool)

    def feas(chosen) -> bool:
        return check_network(Selection(chosen), events, net).feasible

    def record(chosen):
        value = float(sum(profits[i] for i in chosen))
        cost = float(sum(r[i] for i in chosen))
        if best[2] is None or _tie_better(value, cost, chosen, best):
            best[0], best[1], best[2] = value, cost, chosen

    def rec(level, value, weight):
        counters["nodes"] += 1
        if counters["nodes"] > node_limit:
            return
        if best[2] is not None and fractional_bound(level, value, weight) < (
            best[0] - VALUE_TOL
        ):
            return
        if level == n:
            chosen = tuple(sorted(order[i] for i in range(n) if choice[i]))
            if feas(chosen):
                record(chosen)
            return
        if weight + w[level] <= cap:
            choice[level] = True
            partial = tuple(
                sorted(order[i] for i in range(level + 1) if choice[i])
            )
            # Monotone case: an infeasible prefix cannot become feasible.
            if not monotone or feas(partial):
                rec(level + 1, value + p[level], weight + w[level])
            choice[level] = False
        rec(level + 1, value, weight)

    old_limit = sys.getrecursionlimit()
    if n + 100 > old_limit:
        sys.setrecursionlimit(n + 200)
    try:
        rec(0, 0.0, 0.0)
    finally:
        sys.setrecursionlimit(old_limit)

    exact = counters["nodes"] <= node_limit
    if best[2] is None:
        return SolveResult(Selection(()), 0.0, exact=exact, feasible=False)
    return SolveResult(Selection(best[2]), best[0], exact=exact)
