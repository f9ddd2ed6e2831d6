"""Synthetic environment and experiment engine.

Reproduces the paper-style testbed: a fixed population with per-customer
logistic ground truth, per-event shared (or per-customer) contexts, and
three policies — Thompson sampling over variational Bayesian logistic
beliefs (OLS), a UCB index baseline, and a random-fill control — measured
against the clairvoyant oracle for per-step and cumulative regret.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .belief import BeliefBank, _sigmoid
from .ocs import (
    CustomerEvent,
    Selection,
    SolveResult,
    knapsack_max,
    solve_target,
    solve_target_one_sided,
)

__all__ = [
    "SimConfig",
    "GroundTruth",
    "Population",
    "ExperimentTrace",
    "UcbState",
    "generate_population",
    "make_priors",
    "step_environment",
    "oracle_select",
    "run_ols",
    "run_ucb",
    "run_random",
    "run_policy",
    "bayes_regret",
    "TRACE_HEADER",
]

TRACE_HEADER = [
    "t",
    "policy",
    "seed",
    "n_selected",
    "spend",
    "reward",
    "expected_reward",
    "oracle_value",
    "step_regret",
    "cum_regret",
]

OBJECTIVES = ("budget", "target", "target_one_sided")


def _check_range(name, rng_pair):
    lo, hi = rng_pair
    if lo > hi:
        raise ValueError(f"{name}: lo must be <= hi")
    return (float(lo), float(hi))


@dataclass
class SimConfig:
    """Experiment configuration; defaults are the scaled-down testbed."""

    n_customers: int = 200
    horizon: int = 2000
    n_features: int = 9
    d_range: tuple[float, float] = (0.0, 1.0)
    r_range: tuple[float, float] = (0.0, 1.0)
    budget_range: tuple[float, float] = (60.0, 80.0)
    context_range: tuple[float, float] = (0.0, 2.0)
    theta_range: tuple[float, float] = (-0.4, 0.6)
    target_range: tuple[float, float] = (40.0, 60.0)
    delta: float = 0.3  # prior mean error level
    sigma: float = 0.3  # prior standard deviation
    seed: int = 0
    shared_context: bool = True
    objective: str = "budget"
    max_count: int | None = None  # cardinality cap for target objectives
    mc_samples: int = 500
    fixed_r: float | None = None  # overrides r_range with a constant
    fatigue_feature: bool = False  # last feature = recent-selection rate
    fatigue_window: int = 50
    theta_bound: float | None = None  # sup-norm bound on ground truth

    def __post_init__(self):
        if self.n_customers < 1 or self.horizon < 0 or self.n_features < 1:
            raise ValueError("n_customers, n_features >= 1 and horizon >= 0")
        for name in (
            "d_range",
            "r_range",
            "budget_range",
            "context_range",
            "theta_range",
            "target_range",
        ):
            setattr(self, name, _check_range(name, getattr(self, name)))
        if self.d_range[0] < 0:
            raise ValueError("d must be positive; raise d_range")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.fatigue_feature and self.shared_context:
            raise ValueError("fatigue feature requires per-customer contexts")

    @property
    def dim(self) -> int:
        return self.n_features + 1


@dataclass
class GroundTruth:
    """True per-customer coefficients θ*, shape (n_customers, m+1)."""

    thetas: np.ndarray
    config: SimConfig | None = None

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=float)
        if self.config is not None and self.config.theta_bound is not None:
            if np.max(np.abs(self.thetas)) > self.config.theta_bound:
                raise ValueError("ground truth exceeds configured sup-norm bound")


@dataclass
class Population:
    """Static per-customer quantities drawn once per experiment."""

    d: np.ndarray
    r: np.ndarray


def generate_population(
    cfg: SimConfig, rng: np.random.Generator
) -> tuple[GroundTruth, Population]:
    """Draw ground-truth coefficients and the fixed (d, r) profiles."""
    thetas = rng.uniform(*cfg.theta_range, size=(cfg.n_customers, cfg.dim))
    # d must stay strictly positive for the knapsack profit model.
    d = np.maximum(rng.uniform(*cfg.d_range, size=cfg.n_customers), 1e-12)
    if cfg.fixed_r is not None:
        r = np.full(cfg.n_customers, float(cfg.fixed_r))
    else:
        r = rng.uniform(*cfg.r_range, size=cfg.n_customers)
    return GroundTruth(thetas, cfg), Population(d=d, r=r)


def make_priors(
    truth: GroundTruth, delta: float, sigma: float, rng: np.random.Generator
) -> BeliefBank:
    """Gaussian priors N(θ* + δu, σ²I) with u ~ Unif[−1, 1] per entry."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    n, m = truth.thetas.shape
    u = rng.uniform(-1.0, 1.0, size=(n, m))
    means = truth.thetas + delta * u
    covs = np.broadcast_to(sigma**2 * np.eye(m), (n, m, m)).copy()
    return BeliefBank(means, covs)


def _true_probs(truth: GroundTruth, contexts: np.ndarray) -> np.ndarray:
    """p_i = phi(x̂ᵢᵀθᵢ*) for all customers; contexts is (n, m̂) augmented."""
    return _sigmoid(np.einsum("ni,ni->n", contexts, truth.thetas))


def step_environment(
    selection: Selection,
    truth: GroundTruth,
    contexts: np.ndarray,
    rng: np.random.Generator,
) -> dict[int, int]:
    """Realize Bernoulli stay-in outcomes for the selected customers only."""
    probs = _true_probs(truth, contexts)
    return {
        int(i): int(rng.random() < probs[i]) for i in selection.chosen
    }


def _solve(
    objective, d, r, probs, budget, target, max_count, mc_samples, mc_rng, net=None
):
    """Dispatch to the per-event selection solver; returns a SolveResult."""
    if objective == "budget" and net is None:
        chosen, value = knapsack_max(d * probs, r, budget)
        return SolveResult(Selection(chosen), value)
    events = [
        CustomerEvent(customer_id=i, d=float(d[i]), r=float(r[i]))
        for i in range(len(d))
    ]
    if objective == "budget":
        from .network import solve_budget_network

        return solve_budget_network(events, probs, budget, net)
    b = max_count if max_count is not None else len(d)
    if objective == "target":
        return solve_target(events, probs, target, b)
    return solve_target_one_sided(
        events, probs, target, b, mc_samples=mc_samples, rng=mc_rng
    )


def oracle_select(
    truth: GroundTruth, events, budget: float, contexts: np.ndarray | None = None
) -> SolveResult:
    """Clairvoyant budget selection using the true probabilities."""
    if contexts is None:
        raise ValueError("contexts required to evaluate true probabilities")
    probs = _true_probs(truth, contexts)
    d = np.array([e.d for e in events])
    r = np.array([e.r for e in events])
    chosen, value = knapsack_max(d * probs, r, budget)
    return SolveResult(Selection(chosen), value)


@dataclass
class ExperimentTrace:
    """Per-step records of one experiment run."""

    policy: str
    seed: int
    selections: list = field(default_factory=list)
    sampled_probs: list = field(default_factory=list)
    true_probs: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)
    n_selected: list = field(default_factory=list)
    spend: list = field(default_factory=list)
    reward: list = field(default_factory=list)
    expected_reward: list = field(default_factory=list)
    oracle_value: list = field(default_factory=list)
    step_regret: list = field(default_factory=list)
    cum_regret: list = field(default_factory=list)
    solver_time_s: float = 0.0
    learn_time_s: float = 0.0
    wall_time_s: float = 0.0

    def __len__(self) -> int:
        return len(self.step_regret)

    @property
    def final_cum_regret(self) -> float:
        return self.cum_regret[-1] if self.cum_regret else 0.0

    def rows(self):
        for t in range(len(self)):
            yield [
                t + 1,
                self.policy,
                self.seed,
                self.n_selected[t],
                repr(self.spend[t]),
                repr(self.reward[t]),
                repr(self.expected_reward[t]),
                repr(self.oracle_value[t]),
                repr(self.step_regret[t]),
                repr(self.cum_regret[t]),
            ]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_HEADER)
            writer.writerows(self.rows())


class UcbState:
    """Sample means and selection counts for the UCB baseline."""

    def __init__(self, n: int):
        self.mean = np.zeros(n)
        self.count = np.zeros(n, dtype=int)

    def indices(self, t: int) -> np.ndarray:
        """p̄ + sqrt(3 log t / (2 T_i)); +inf for untried customers."""
        with np.errstate(divide="ignore", invalid="ignore"):
            bonus = np.sqrt(3.0 * math.log(max(t, 1)) / (2.0 * self.count))
        idx = np.where(self.count > 0, self.mean + bonus, np.inf)
        return idx

    def update(self, selected: np.ndarray, z: np.ndarray) -> None:
        self.count[selected] += 1
        self.mean[selected] += (z - self.mean[selected]) / self.count[selected]


def run_policy(
    cfg: SimConfig,
    truth: GroundTruth,
    pop: Population,
    policy: str,
    priors: BeliefBank | None = None,
    seed: int | None = None,
    n_iter: int = 3,
    record_probs: bool = True,
    network=None,
) -> ExperimentTrace:
    """Run one policy for ``cfg.horizon`` steps and record the full trace.

    The oracle solves the same per-event instance with the true
    probabilities, so per-step regret is non-negative whenever the
    per-event solver is exact (the budget objective).
    """
    if policy not in ("ols", "ucb", "random", "oracle"):
        raise ValueError(f"unknown policy {policy!r}")
    if policy == "ols" and priors is None:
        raise ValueError("ols policy requires priors")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n, m = cfg.n_customers, cfg.n_features
    d, r = pop.d, pop.r
    d_total = float(np.sum(d))
    trace = ExperimentTrace(policy=policy, seed=cfg.seed if seed is None else seed)
    # Work on a copy so the caller's priors survive repeated runs.
    bank = (
        BeliefBank(priors.means.copy(), priors.covs.copy())
        if priors is not None
        else None
    )
    ucb = UcbState(n) if policy == "ucb" else None
    recent = np.zeros((n,), dtype=float) if cfg.fatigue_feature else None
    sel_history: list[np.ndarray] = []
    t_start = time.perf_counter()

    for t in range(1, cfg.horizon + 1):
        budget = float(rng.uniform(*cfg.budget_range))
        target = float(rng.uniform(*cfg.target_range))
        if cfg.shared_context:
            x = rng.uniform(*cfg.context_range, size=m)
            contexts = np.concatenate(([1.0], x))[None, :].repeat(n, axis=0)
        else:
            x = rng.uniform(*cfg.context_range, size=(n, m))
            if cfg.fatigue_feature:
                x[:, -1] = recent / cfg.fatigue_window
            contexts = np.concatenate((np.ones((n, 1)), x), axis=1)
        p_true = _true_probs(truth, contexts)

        # Policy probability estimates.
        if policy == "ols":
            theta_hat = bank.sample(rng)
            p_hat = _sigmoid(np.einsum("ni,ni->n", contexts, theta_hat))
        elif policy == "ucb":
            p_hat = np.clip(ucb.indices(t), 0.0, 1.0)
        elif policy == "oracle":
            p_hat = p_true
        else:
            p_hat = None

        mc_rng = np.random.default_rng((trace.seed, t))
        t0 = time.perf_counter()
        if policy == "random":
            perm = rng.permutation(n)
            chosen = []
            if cfg.objective == "budget":
                spend_cap = budget
                acc = 0.0
                for i in perm:
                    if acc + r[i] <= spend_cap:
                        chosen.append(int(i))
                        acc += r[i]
            else:
                cap = cfg.max_count if cfg.max_count is not None else n
                chosen = [int(i) for i in perm[:cap]]
            result = SolveResult(Selection(tuple(chosen)), 0.0)
        else:
            result = _solve(
                cfg.objective, d, r, p_hat, budget, target,
                cfg.max_count, cfg.mc_samples, mc_rng, net=network,
            )
        oracle_res = _solve(
            cfg.objective, d, r, p_true, budget, target,
            cfg.max_count, cfg.mc_samples,
            np.random.default_rng((trace.seed, t)), net=network,
        )
        trace.solver_time_s += time.perf_counter() - t0

        sel = np.array(result.selection.chosen, dtype=int)
        z = (rng.random(sel.size) < p_true[sel]).astype(int)
        reward = float(np.sum(d[sel] * z))
        spend = float(np.sum(r[sel]))

        if cfg.objective == "budget":
            f_sel = float(np.sum(d[sel] * p_true[sel]))
            f_star = oracle_res.objective
            step_regret = f_star - f_sel
            assert f_star <= d_total + 1e-9
        else:
            # Minimization objectives: regret is the objective gap.
            mask = np.zeros(n, dtype=bool)
            mask[sel] = True
            if cfg.objective == "target":
                A = float(np.sum(d[sel] * p_true[sel]))
                V = float(np.sum(d[sel] ** 2 * p_true[sel] * (1 - p_true[sel])))
                f_sel = (A - target) ** 2 + V
            else:
                Zp = (
                    np.random.default_rng((trace.seed, t, 1)).random(
                        (cfg.mc_samples, n)
                    )
                    < p_true[None, :]
                )
                red = (Zp[:, sel] * d[sel][None, :]).sum(axis=1)
                f_sel = float(np.mean(np.maximum(target - red, 0.0)))
            f_star = oracle_res.objective
            step_regret = f_sel - f_star

        t1 = time.perf_counter()
        if policy == "ols" and sel.size:
            bank.observe_batch(sel, contexts[sel], z, n_iter=n_iter)
        elif policy == "ucb" and sel.size:
            ucb.update(sel, z)
        trace.learn_time_s += time.perf_counter() - t1

        if cfg.fatigue_feature:
            sel_history.append(sel)
            recent[sel] += 1
            if len(sel_history) > cfg.fatigue_window:
                old = sel_history.pop(0)
                recent[old] -= 1

        trace.selections.append(sel)
        if record_probs:
            trace.sampled_probs.append(
                p_hat.copy() if p_hat is not None else None
            )
            trace.true_probs.append(p_true)
        trace.outcomes.append(z)
        trace.n_selected.append(int(sel.size))
        trace.spend.append(spend)
        trace.reward.append(reward)
        trace.expected_reward.append(
            float(np.sum(d[sel] * p_true[sel]))
        )
        trace.oracle_value.append(float(oracle_res.objective))
        trace.step_regret.append(float(step_regret))
        trace.cum_regret.append(
            (trace.cum_regret[-1] if trace.cum_regret else 0.0) + float(step_regret)
        )

    trace.wall_time_s = time.perf_counter() - t_start
    return trace


def run_ols(
    cfg: SimConfig,
    truth: GroundTruth,
    pop: Population,
    priors: BeliefBank,
    seed: int | None = None,
    **kwargs,
) -> ExperimentTrace:
    """Thompson sampling over the variational Bayesian logistic beliefs."""
    return run_policy(cfg, truth, pop, "ols", priors=priors, seed=seed, **kwargs)


def run_ucb(
    cfg: SimConfig,
    truth: GroundTruth,
    pop: Population,
    seed: int | None = None,
    **kwargs,
) -> ExperimentTrace:
    """Context-free UCB index baseline."""
    return run_policy(cfg, truth, pop, "ucb", seed=seed, **kwargs)


def run_random(
    cfg: SimConfig,
    truth: GroundTruth,
    pop: Population,
    seed: int | None = None,
    **kwargs,
) -> ExperimentTrace:
    """Uniformly random feasible fill; control baseline."""
    return run_policy(cfg, truth, pop, "random", seed=seed, **kwargs)


def bayes_regret(
    cfg: SimConfig, n_realizations: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Average cumulative regret over ground truths drawn from the prior.

    Each realization builds the prior from a fresh base population, draws
    the truth from that prior, and runs the Thompson-sampling policy.
    Returns (mean, standard error) over realizations.
    """
    if n_realizations < 2:
        raise ValueError("n_realizations must be >= 2 for a standard error")
    finals = []
    for k in range(n_realizations):
        sub = np.random.default_rng(rng.integers(2**63))
        base, pop = generate_population(cfg, sub)
        priors = make_priors(base, cfg.delta, cfg.sigma, sub)
        sampled = priors.sample(sub)
        truth = GroundTruth(sampled)
        trace = run_ols(cfg, truth, pop, priors, seed=int(sub.integers(2**31)))
        finals.append(trace.final_cum_regret)
    finals = np.asarray(finals)
    mean = float(np.mean(finals))
    se = float(np.std(finals, ddof=1) / math.sqrt(n_realizations))
    return mean, se
