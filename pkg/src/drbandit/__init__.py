"""Budgeted customer-selection bandit: Bayesian logistic arm learning,
exact combinatorial selection oracles, and a reproducible simulation
harness with regret measurement."""

from .belief import (
    BeliefBank,
    Context,
    GaussianBelief,
    Theta,
    ell,
    logistic_prob,
    observe,
    posterior_update,
    sample_theta,
    variational_likelihood,
    xi_update,
)
from .ocs import (
    CustomerEvent,
    Selection,
    SolveResult,
    expected_reduction,
    load_instance,
    solve_budget,
    solve_target,
    solve_target_one_sided,
)
from .network import (
    Bus,
    Line,
    NetworkReport,
    RadialNetwork,
    check_network,
    solve_budget_network,
)
from .sim import (
    ExperimentTrace,
    GroundTruth,
    Population,
    SimConfig,
    bayes_regret,
    generate_population,
    make_priors,
    oracle_select,
    run_ols,
    run_random,
    run_ucb,
    step_environment,
)

__version__ = "0.1.0"
