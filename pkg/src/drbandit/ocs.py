"""Offline customer-selection oracles.

Three per-event selection problems over a population of customers with
reducible load ``d``, offered revenue ``r`` and stay-in probability ``p``:

* ``solve_budget`` — maximize expected reduction Σ dᵢpᵢ under a revenue
  budget Σ rᵢ ≤ b (an exact 0/1 knapsack with continuous weights).
* ``solve_target`` — track a reduction target D by minimizing
  (Σ dᵢpᵢ − D)² + Σ dᵢ²pᵢ(1−pᵢ) under a cardinality cap.
* ``solve_target_one_sided`` — minimize the expected shortfall
  E[max(D − Σ dᵢzᵢ, 0)] under the same cap.

All solvers are deterministic: value ties are broken toward lower total
cost, then the lexicographically smallest index set.
"""
from __future__ import annotations

import bisect
import itertools
import json
import sys
from dataclasses import dataclass

import numpy as np

from .belief import Context

__all__ = [
    "CustomerEvent",
    "Selection",
    "SolveResult",
    "expected_reduction",
    "solve_budget",
    "solve_target",
    "solve_target_one_sided",
    "knapsack_max",
    "target_objective",
    "shortfall_objective",
    "load_instance",
    "dump_instance",
]

# Value comparisons treat differences below this as ties.
VALUE_TOL = 1e-12
# Budget feasibility slack so exactly-tight subsets survive float rounding.
FEAS_TOL = 1e-9


@dataclass(frozen=True)
class CustomerEvent:
    """Per-event observables reported by one customer."""

    customer_id: int
    d: float  # reducible load (per-unit kW)
    r: float  # offered revenue
    ctx: Context | None = None
    participates: bool = True

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError(f"customer {self.customer_id}: d must be > 0")
        if self.r < 0:
            raise ValueError(f"customer {self.customer_id}: r must be >= 0")


@dataclass(frozen=True)
class Selection:
    """Subset of customer indices chosen for one event."""

    chosen: tuple[int, ...]

    def __post_init__(self):
        c = tuple(sorted(self.chosen))
        if len(set(c)) != len(c):
            raise ValueError("selection indices must be distinct")
        object.__setattr__(self, "chosen", c)

    def __contains__(self, i: int) -> bool:
        return i in self.chosen

    def __len__(self) -> int:
        return len(self.chosen)


@dataclass(frozen=True)
class SolveResult:
    """Solver output: the selection, its objective, and solution status."""

    selection: Selection
    objective: float
    exact: bool = True
    feasible: bool = True


def _check_alignment(events, probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (len(events),):
        raise ValueError("probs must align with events")
    if np.any((probs < 0) | (probs > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return probs


def expected_reduction(sel: Selection, events, probs) -> float:
    """Expected load reduction Σ_{i in sel} dᵢ pᵢ."""
    probs = _check_alignment(events, probs)
    total = 0.0
    for i in sel.chosen:
        if i < 0 or i >= len(events):
            raise IndexError(f"selection index {i} out of range")
        total += events[i].d * probs[i]
    return total


# ---------------------------------------------------------------------------
# Budgeted knapsack
# ---------------------------------------------------------------------------


def _tie_better(value, cost, chosen, best) -> bool:
    """Candidate ordering: higher value, then lower cost, then lex set."""
    bv, bc, bch = best
    if value > bv + VALUE_TOL:
        return True
    if value < bv - VALUE_TOL:
        return False
    if cost < bc - VALUE_TOL:
        return True
    if cost > bc + VALUE_TOL:
        return False
    return chosen < bch


def knapsack_max(profits, weights, capacity) -> tuple[tuple[int, ...], float]:
    """Exact 0/1 knapsack with continuous weights.

    Branch and bound in profit-density order with the fractional
    relaxation bound.  Items with non-positive profit are never taken;
    zero-weight items with positive profit are always taken.  Returns the
    chosen index tuple (sorted) and its profit recomputed in index order.
    """
    profits = np.asarray(profits, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if capacity < 0:
        raise ValueError("budget must be >= 0")
    if np.any(weights < 0):
        raise ValueError("weights must be >= 0")

    cap = capacity + FEAS_TOL * max(1.0, capacity)
    free = [i for i in range(len(profits)) if profits[i] > 0 and weights[i] == 0]
    cand = [i for i in range(len(profits)) if profits[i] > 0 and weights[i] > 0]
    order = sorted(cand, key=lambda i: (-profits[i] / weights[i], i))
    p = profits[order]
    w = weights[order]
    n = len(order)

    # Uniform weights defeat the fractional bound (near-tie branches never
    # prune), but the optimum is then simply the top-k items by profit.
    if n > 0 and w[0] == w[-1] and np.all(w == w[0]):
        k = min(n, int(cap // w[0]))
        chosen = tuple(sorted(free + order[:k]))
        value = float(sum(profits[i] for i in chosen))
        return chosen, value

    pref_w = np.concatenate(([0.0], np.cumsum(w)))
    pref_p = np.concatenate(([0.0], np.cumsum(p)))

    def fractional_bound(level: int, value: float, weight: float) -> float:
        room = cap - weight
        # Largest j >= level with pref_w[j] - pref_w[level] <= room.
        j = bisect.bisect_right(pref_w, pref_w[level] + room) - 1
        j = max(j, level)
        bound = value + pref_p[j] - pref_p[level]
        if j < n:
            rem = room - (pref_w[j] - pref_w[level])
            bound += rem * p[j] / w[j]
        return bound

    best = [-np.inf, np.inf, ()]  # value, cost, sorted chosen tuple
    choice = np.zeros(n, dtype=bool)

    def record(weight: float):
        chosen = tuple(sorted(free + [order[i] for i in range(n) if choice[i]]))
        value = float(sum(profits[i] for i in chosen))
        cost = float(sum(weights[i] for i in chosen))
        if _tie_better(value, cost, chosen, best):
            best[0], best[1], best[2] = value, cost, chosen

    def rec(level: int, value: float, weight: float):
        if fractional_bound(level, value, weight) < best[0] - VALUE_TOL:
            return
        if level == n:
            record(weight)
            return
        # If everything left fits, take it all (all profits positive).
        if pref_w[n] - pref_w[level] <= cap - weight:
            choice[level:] = True
            record(weight + pref_w[n] - pref_w[level])
            choice[level:] = False
            return
        if weight + w[level] <= cap:
            choice[level] = True
            rec(level + 1, value + p[level], weight + w[level])
            choice[level] = False
        rec(level + 1, value, weight)

    old_limit = sys.getrecursionlimit()
    if n + 100 > old_limit:
        sys.setrecursionlimit(n + 200)
    try:
        rec(0, float(np.sum(profits[free])), 0.0)
    finally:
        sys.setrecursionlimit(old_limit)
    return best[2], best[0]


def solve_budget(events, probs, budget: float) -> SolveResult:
    """Maximize Σ dᵢpᵢyᵢ subject to Σ rᵢyᵢ ≤ budget, exactly."""
    probs = _check_alignment(events, probs)
    if budget < 0:
        raise ValueError("budget must be >= 0")
    d = np.array([e.d for e in events])
    r = np.array([e.r for e in events])
    part = np.array([e.participates for e in events])
    profits = np.where(part, d * probs, 0.0)
    chosen, value = knapsack_max(profits, r, budget)
    return SolveResult(Selection(chosen), value)


# ---------------------------------------------------------------------------
# Target tracking
# ---------------------------------------------------------------------------


def target_objective(sel_mask, a, v, target) -> float:
    """(Σ dᵢpᵢ − D)² + Σ dᵢ²pᵢ(1−pᵢ) for the masked subset."""
    A = float(np.sum(a[sel_mask]))
    V = float(np.sum(v[sel_mask]))
    return (A - target) ** 2 + V


def _greedy_swap_search(n, b, init_obj, eval_add, eval_remove, eval_swap, max_moves):
    """Deterministic best-improvement local search over add/remove/swap.

    The three ``eval_*`` callbacks return (best_delta_obj, move) for the
    current mask.  Starts from the empty set (greedy insertion emerges
    from repeated best adds).
    """
    mask = np.zeros(n, dtype=bool)
    obj = init_obj
    for _ in range(max_moves):
        moves = []
        if int(mask.sum()) < b:
            moves.append(eval_add(mask, obj))
        if mask.any():
            moves.append(eval_remove(mask, obj))
            if int(mask.sum()) >= 1 and (~mask).any():
                moves.append(eval_swap(mask, obj))
        moves = [m for m in moves if m is not None]
        if not moves:
            break
        delta, apply = min(moves, key=lambda m: m[0])
        if delta >= -VALUE_TOL:
            break
        obj += delta
        apply(mask)
    return mask, obj


def solve_target(
    events, probs, target: float, max_count: int, n_exact: int = 20
) -> SolveResult:
    """Track a reduction target with at most ``max_count`` customers.

    Exhaustive (exact) for populations up to ``n_exact``; otherwise a
    greedy-insertion plus pairwise-swap local search, flagged inexact.
    """
    probs = _check_alignment(events, probs)
    if target < 0:
        raise ValueError("target must be >= 0")
    if max_count < 0:
        raise ValueError("max_count must be >= 0")
    d = np.array([e.d for e in events])
    part = np.array([e.participates for e in events])
    a = np.where(part, d * probs, 0.0)
    v = np.where(part, d**2 * probs * (1 - probs), 0.0)
    idx = [i for i in range(len(events)) if part[i]]
    n = len(events)

    if len(idx) <= n_exact:
        best = (float("inf"), 0, ())
        for k in range(0, min(max_count, len(idx)) + 1):
            for combo in itertools.combinations(idx, k):
                A = float(sum(a[list(combo)])) if combo else 0.0
                V = float(sum(v[list(combo)])) if combo else 0.0
                obj = (A - target) ** 2 + V
                cand = (obj, len(combo), combo)
                if (
                    obj < best[0] - VALUE_TOL
                    or (abs(obj - best[0]) <= VALUE_TOL and cand[1:] < best[1:])
                ):
                    best = cand
        return SolveResult(Selection(best[2]), best[0], exact=True)

    # Local search on running sums; O(1) candidate evaluation.
    allowed = part.copy()
    A = {"A": 0.0, "V": 0.0}

    def current(mask):
        return (A["A"] - target) ** 2 + A["V"]

    def eval_add(mask, obj):
        cand = allowed & ~mask
        if not cand.any():
            return None
        ii = np.where(cand)[0]
        new = (A["A"] + a[ii] - target) ** 2 + A["V"] + v[ii]
        j = int(np.argmin(new))
        pick = int(ii[j])

        def apply(m):
            m[pick] = True
            A["A"] += a[pick]
            A["V"] += v[pick]

        return float(new[j]) - obj, apply

    def eval_remove(mask, obj):
        ii = np.where(mask)[0]
        new = (A["A"] - a[ii] - target) ** 2 + A["V"] - v[ii]
        j = int(np.argmin(new))
        pick = int(ii[j])

        def apply(m):
            m[pick] = False
            A["A"] -= a[pick]
            A["V"] -= v[pick]

        return float(new[j]) - obj, apply

    def eval_swap(mask, obj):
        ins = np.where(mask)[0]
        outs = np.where(allowed & ~mask)[0]
        if len(ins) == 0 or len(outs) == 0:
            return None
        dA = -a[ins][:, None] + a[outs][None, :]
        dV = -v[ins][:, None] + v[outs][None, :]
        new = (A["A"] + dA - target) ** 2 + A["V"] + dV
        flat = int(np.argmin(new))
        i_out = int(ins[flat // len(outs)])
        i_in = int(outs[flat % len(outs)])

        def apply(m):
            m[i_out] = False
            m[i_in] = True
            A["A"] += a[i_in] - a[i_out]
            A["V"] += v[i_in] - v[i_out]

        return float(new.flat[flat]) - obj, apply

    mask, obj = _greedy_swap_search(
        n, max_count, target**2, eval_add, eval_remove, eval_swap, 4 * n
    )
    chosen = tuple(int(i) for i in np.where(mask)[0])
    return SolveResult(Selection(chosen), obj, exact=False)


# ---------------------------------------------------------------------------
# One-sided target tracking (expected shortfall)
# ---------------------------------------------------------------------------


def shortfall_objective(chosen, events, probs, target) -> float:
    """E[max(D − Σ dᵢzᵢ, 0)] by exact outcome enumeration (|chosen| ≤ 20)."""
    chosen = list(chosen)
    if len(chosen) > 20:
        raise ValueError("exact enumeration limited to 20 customers")
    d = np.array([events[i].d for i in chosen])
    p = np.clip(np.array([probs[i] for i in chosen]), 0.0, 1.0)
    if not chosen:
        return float(target)
    k = len(chosen)
    bits = ((np.arange(2**k)[:, None] >> np.arange(k)) & 1).astype(float)
    red = bits @ d
    with np.errstate(divide="ignore"):
        logp = np.where(p > 0, np.log(np.maximum(p, 1e-300)), -np.inf)
        log1p = np.where(p < 1, np.log(np.maximum(1 - p, 1e-300)), -np.inf)
    logw = bits @ np.where(np.isneginf(logp), -1e30, logp) + (1 - bits) @ np.where(
        np.isneginf(log1p), -1e30, log1p
    )
    wts = np.exp(np.maximum(logw, -700))
    wts /= wts.sum()
    return float(np.sum(wts * np.maximum(target - red, 0.0)))


def solve_target_one_sided(
    events,
    probs,
    target: float,
    max_count: int,
    mc_samples: int = 500,
    n_exact: int = 12,
    rng: np.random.Generator | None = None,
) -> SolveResult:
    """Minimize the expected shortfall below the target.

    Exhaustive with exact outcome enumeration for populations up to
    ``n_exact``; otherwise the greedy + swap search with a common-random-
    numbers Monte Carlo objective (same draws for every candidate set).
    """
    probs = _check_alignment(events, probs)
    if target < 0:
        raise ValueError("target must be >= 0")
    d = np.array([e.d for e in events])
    part = np.array([e.participates for e in events])
    idx = [i for i in range(len(events)) if part[i]]
    n = len(events)

    if len(idx) <= n_exact:
        best = (float("inf"), 0, ())
        for k in range(0, min(max_count, len(idx)) + 1):
            for combo in itertools.combinations(idx, k):
                obj = shortfall_objective(combo, events, probs, target)
                cand = (obj, len(combo), combo)
                if (
                    obj < best[0] - VALUE_TOL
                    or (abs(obj - best[0]) <= VALUE_TOL and cand[1:] < best[1:])
                ):
                    best = cand
        return SolveResult(Selection(best[2]), best[0], exact=True)

    if rng is None:
        rng = np.random.default_rng(0)
    # Common random numbers: one Bernoulli panel reused for every subset.
    Z = (rng.random((mc_samples, n)) < probs[None, :]).astype(float)
    dz = Z * d[None, :]
    allowed = part.copy()
    state = {"red": np.zeros(mc_samples)}

    def mean_shortfall(red):
        return float(np.mean(np.maximum(target - red, 0.0)))

    def eval_add(mask, obj):
        cand = allowed & ~mask
        if not cand.any():
            return None
        ii = np.where(cand)[0]
        new = np.mean(
            np.maximum(target - (state["red"][:, None] + dz[:, ii]), 0.0), axis=0
        )
        j = int(np.argmin(new))
        pick = int(ii[j])

        def apply(m):
            m[pick] = True
            state["red"] = state["red"] + dz[:, pick]

        return float(new[j]) - obj, apply

    def eval_remove(mask, obj):
        ii = np.where(mask)[0]
        new = np.mean(
            np.maximum(target - (state["red"][:, None] - dz[:, ii]), 0.0), axis=0
        )
        j = int(np.argmin(new))
        pick = int(ii[j])

        def apply(m):
            m[pick] = False
            state["red"] = state["red"] - dz[:, pick]

        return float(new[j]) - obj, apply

    def eval_swap(mask, obj):
        ins = np.where(mask)[0]
        outs = np.where(allowed & ~mask)[0]
        if len(ins) == 0 or len(outs) == 0:
            return None
        best_val, best_pair = float("inf"), None
        for i_out in ins:
            base = state["red"] - dz[:, i_out]
            new = np.mean(
                np.maximum(target - (base[:, None] + dz[:, outs]), 0.0), axis=0
            )
            j = int(np.argmin(new))
            if new[j] < best_val:
                best_val, best_pair = float(new[j]), (int(i_out), int(outs[j]))

        i_out, i_in = best_pair

        def apply(m):
            m[i_out] = False
            m[i_in] = True
            state["red"] = state["red"] - dz[:, i_out] + dz[:, i_in]

        return best_val - obj, apply

    mask, obj = _greedy_swap_search(
        n, max_count, float(target), eval_add, eval_remove, eval_swap, 4 * n
    )
    chosen = tuple(int(i) for i in np.where(mask)[0])
    return SolveResult(Selection(chosen), obj, exact=False)


# ---------------------------------------------------------------------------
# Instance files
# ---------------------------------------------------------------------------


def load_instance(source) -> dict:
    """Load a selection instance from a JSON path, file object, or dict.

    Schema: {customers: [{id, d, r, participates}], budget, target?,
    network?}; all quantities per-unit.  Returns a dict with ``events``
    (list of CustomerEvent), ``budget``, optional ``target`` and the raw
    ``network`` sub-document (parsed by :mod:`drbandit.network`).
    """
    if isinstance(source, dict):
        doc = source
    elif hasattr(source, "read"):
        doc = json.load(source)
    else:
        with open(source) as fh:
            doc = json.load(fh)
    events = [
        CustomerEvent(
            customer_id=int(c["id"]),
            d=float(c["d"]),
            r=float(c["r"]),
            participates=bool(c.get("participates", True)),
        )
        for c in doc["customers"]
    ]
    out = {"events": events, "budget": float(doc["budget"])}
    if "target" in doc and doc["target"] is not None:
        out["target"] = float(doc["target"])
    if "network" in doc and doc["network"] is not None:
        out["network"] = doc["network"]
    return out


def dump_instance(events, budget, target=None, network=None) -> dict:
    """Inverse of :func:`load_instance` for the customer/budget fields."""
    doc = {
        "customers": [
            {
                "id": e.customer_id,
                "d": e.d,
                "r": e.r,
                "participates": e.participates,
            }
            for e in events
        ],
        "budget": budget,
    }
    if target is not None:
        doc["target"] = target
    if network is not None:
        doc["network"] = network
    return doc
