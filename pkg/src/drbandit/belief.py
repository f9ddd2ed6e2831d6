"""Bayesian logistic arm models with variational posterior updates.

Each customer's opt-out behavior is a logistic model over an augmented
context vector; the belief over the unknown coefficients is Gaussian and
is updated in closed form through a quadratic lower bound on the logistic
likelihood.  The bound is controlled by a scalar variational parameter
``xi`` that is refined by alternating between the posterior update and
its own closed-form update.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GaussianBelief",
    "Theta",
    "Context",
    "BeliefBank",
    "logistic_prob",
    "sample_theta",
    "ell",
    "variational_likelihood",
    "posterior_update",
    "xi_update",
    "observe",
    "variational_objective",
    "belief_to_dict",
    "belief_from_dict",
    "save_beliefs",
    "load_beliefs",
]

# Jitter added once when a covariance fails its Cholesky factorization.
PD_JITTER = 1e-9
# Below this magnitude ell(xi) switches to its analytic limit -1/8.
XI_EPS = 1e-8


def _sigmoid(x):
    """Numerically stable logistic function, scalar or array."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Theta:
    """Logistic coefficients: intercept followed by feature weights."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 1:
            raise ValueError("theta must be a non-empty 1-d vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("theta entries must be finite")
        object.__setattr__(self, "values", v)

    @property
    def intercept(self) -> float:
        return float(self.values[0])

    @property
    def weights(self) -> np.ndarray:
        return self.values[1:]


@dataclass(frozen=True)
class Context:
    """Feature vector of environmental factors for one customer/event.

    ``augmented`` prepends a constant 1 for the intercept term.  Contexts
    with sup-norm above ``x_max`` are accepted (the synthetic experiments
    use features in [0, 2]); the bound exists for validation only.
    """

    raw: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.raw, dtype=float)
        if r.ndim != 1:
            raise ValueError("context must be a 1-d vector")
        if not np.all(np.isfinite(r)):
            raise ValueError("context entries must be finite")
        object.__setattr__(self, "raw", r)

    @property
    def augmented(self) -> np.ndarray:
        return np.concatenate(([1.0], self.raw))

    def within_bound(self, x_max: float = 1.0) -> bool:
        return bool(np.max(np.abs(self.augmented)) <= x_max)


@dataclass
class GaussianBelief:
    """Gaussian belief N(mean, covariance) over a customer's coefficients."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float)
        c = np.asarray(self.covariance, dtype=float)
        if m.ndim != 1:
            raise ValueError("mean must be a 1-d vector")
        if c.shape != (m.size, m.size):
            raise ValueError(
                f"covariance shape {c.shape} does not match mean length {m.size}"
            )
        if not np.allclose(c, c.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")
        self.mean = m
        self.covariance = (c + c.T) / 2.0

    @property
    def dim(self) -> int:
        return self.mean.size

    def cholesky(self) -> np.ndarray:
        """Lower Cholesky factor, retrying once with jitter.

        Raises ValueError if the covariance is not positive definite even
        after the jitter attempt.
        """
        try:
            return np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError:
            pass
        try:
            return np.linalg.cholesky(
                self.covariance + PD_JITTER * np.eye(self.dim)
            )
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None


def logistic_prob(theta: Theta, ctx: Context) -> float:
    """Opt-in probability phi(x̂ᵀθ) of the logistic arm model."""
    xh = ctx.augmented
    if theta.values.size != xh.size:
        raise ValueError(
            f"theta dimension {theta.values.size} does not match "
            f"augmented context dimension {xh.size}"
        )
    return float(_sigmoid(float(xh @ theta.values)))


def sample_theta(belief: GaussianBelief, rng: np.random.Generator) -> Theta:
    """Draw θ ~ N(mean, covariance) via the Cholesky factor."""
    L = belief.cholesky()
    w = rng.standard_normal(belief.dim)
    return Theta(belief.mean + L @ w)


def ell(xi: float) -> float:
    """Curvature coefficient (1/2 - phi(xi)) / (2 xi) of the quadratic bound.

    Even in xi, always negative, bounded below by -1/8; the removable
    singularity at xi = 0 is replaced by its limit -1/8.
    """
    if not math.isfinite(xi):
        raise ValueError("xi must be finite")
    if abs(xi) <= XI_EPS:
        return -0.125
    return (0.5 - _sigmoid(xi)) / (2.0 * xi)


def variational_likelihood(z: int, theta: Theta, ctx: Context, xi: float) -> float:
    """Quadratic lower bound on the logistic likelihood P(z | θ, x̂).

    Equals the exact likelihood phi(s) when xi = ±s, where
    s = (2z - 1) x̂ᵀθ; otherwise strictly below it.
    """
    if z not in (0, 1):
        raise ValueError("z must be 0 or 1")
    s = (2 * z - 1) * float(ctx.augmented @ theta.values)
    return float(
        _sigmoid(xi) * math.exp((s - xi) / 2.0 + ell(xi) * (s * s - xi * xi))
    )


def posterior_update(
    belief: GaussianBelief, ctx: Context, z: int, xi: float
) -> GaussianBelief:
    """Closed-form Gaussian posterior after one observation at fixed xi.

    Precision gains the rank-one term 2|ell(xi)| x̂x̂ᵀ and the mean shifts
    by (z - 1/2) along the posterior-smoothed context.  Implemented via
    the Sherman-Morrison identity, so no explicit inverse is formed.
    """
    if z not in (0, 1):
        raise ValueError("z must be 0 or 1")
    xh = ctx.augmented
    if xh.size != belief.dim:
        raise ValueError("context dimension does not match belief")
    # Validate positive definiteness up front (jitter once, else error).
    belief.cholesky()

    cov = belief.covariance
    mu = belief.mean
    c = 2.0 * abs(ell(xi))
    cov_x = cov @ xh
    a = float(xh @ cov_x)
    denom = 1.0 + c * a
    k = c / denom
    cov_hat = cov - k * np.outer(cov_x, cov_x)
    cov_hat = (cov_hat + cov_hat.T) / 2.0
    # Σ̂ Σ⁻¹ μ = μ - k (x̂ᵀμ) Σx̂  and  Σ̂ x̂ = Σx̂ / (1 + c a).
    mu_hat = mu - k * float(xh @ mu) * cov_x + ((z - 0.5) / denom) * cov_x
    return GaussianBelief(mu_hat, cov_hat)


def xi_update(belief: GaussianBelief, ctx: Context) -> float:
    """Optimal variational parameter sqrt(x̂ᵀΣx̂ + (x̂ᵀμ)²)."""
    xh = ctx.augmented
    if xh.size != belief.dim:
        raise ValueError("context dimension does not match belief")
    quad = float(xh @ belief.covariance @ xh)
    lin = float(xh @ belief.mean)
    return math.sqrt(max(quad + lin * lin, 0.0))


def observe(
    belief: GaussianBelief, ctx: Context, z: int, n_iter: int = 3
) -> GaussianBelief:
    """Absorb one binary outcome through the variational alternation.

    xi is initialized from the prior, then each of the ``n_iter``
    iterations recomputes the posterior from the original prior with the
    current xi and refreshes xi from that posterior.  Only the final
    posterior is returned (committed).
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    xi = xi_update(belief, ctx)
    post = belief
    for _ in range(n_iter):
        post = posterior_update(belief, ctx, z, xi)
        xi = xi_update(post, ctx)
    return post


def variational_objective(
    prior: GaussianBelief,
    posterior: GaussianBelief,
    ctx: Context,
    z: int,
    xi: float,
) -> float:
    """Variational objective E_q[log P(θ) P(z|θ,x̂,xi)] + H(q).

    q is the Gaussian ``posterior``; the expectation of the complete
    log-likelihood plus the posterior entropy is the quantity the
    alternation in :func:`observe` monotonically increases.
    """
    xh = ctx.augmented
    m = prior.dim
    mu, cov = prior.mean, prior.covariance
    muh, covh = posterior.mean, posterior.covariance
    L = prior.cholesky()
    logdet_prior = 2.0 * float(np.sum(np.log(np.diag(L))))
    sol_d = np.linalg.solve(cov, muh - mu)
    sol_S = np.linalg.solve(cov, covh)
    e_log_prior = -0.5 * (
        m * math.log(2 * math.pi)
        + logdet_prior
        + float(np.trace(sol_S))
        + float((muh - mu) @ sol_d)
    )
    e_s = (2 * z - 1) * float(xh @ muh)
    e_s2 = float(xh @ covh @ xh) + float(xh @ muh) ** 2
    e_log_like = (
        math.log(_sigmoid(xi)) + (e_s - xi) / 2.0 + ell(xi) * (e_s2 - xi * xi)
    )
    logdet_post = 2.0 * float(
        np.sum(np.log(np.diag(posterior.cholesky())))
    )
    entropy = 0.5 * (m * (1.0 + math.log(2 * math.pi)) + logdet_post)
    return e_log_prior + e_log_like + entropy


# ---------------------------------------------------------------------------
# Batched beliefs for the simulation engine
# ---------------------------------------------------------------------------


@dataclass
class BeliefBank:
    """Stacked Gaussian beliefs for a population of customers.

    Semantically a list of :class:`GaussianBelief`, stored as arrays so
    the per-step sampling and update loops vectorize.  ``observe_batch``
    applies exactly the same alternation as :func:`observe` to each
    selected customer (customers are independent).
    """

    means: np.ndarray  # (n, m̂)
    covs: np.ndarray  # (n, m̂, m̂)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.covs = np.asarray(self.covs, dtype=float)
        n, m = self.means.shape
        if self.covs.shape != (n, m, m):
            raise ValueError("covariance stack shape mismatch")

    @classmethod
    def from_beliefs(cls, beliefs) -> "BeliefBank":
        return cls(
            np.stack([b.mean for b in beliefs]),
            np.stack([b.covariance for b in beliefs]),
        )

    def belief(self, i: int) -> GaussianBelief:
        return GaussianBelief(self.means[i].copy(), self.covs[i].copy())

    def __len__(self) -> int:
        return self.means.shape[0]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Draw one θ per customer; returns an (n, m̂) array."""
        try:
            L = np.linalg.cholesky(self.covs)
        except np.linalg.LinAlgError:
            L = np.linalg.cholesky(
                self.covs + PD_JITTER * np.eye(self.means.shape[1])
            )
        w = rng.standard_normal(self.means.shape)
        return self.means + np.einsum("nij,nj->ni", L, w)

    def observe_batch(
        self,
        idx: np.ndarray,
        contexts: np.ndarray,
        z: np.ndarray,
        n_iter: int = 3,
    ) -> None:
        """Update beliefs for customers ``idx`` given augmented contexts.

        ``contexts`` has shape (k, m̂) (already augmented), ``z`` shape (k,).
        Mirrors :func:`observe`: each iteration restarts from the prior,
        so only xi varies across iterations.
        """
        idx = np.asarray(idx, dtype=int)
        if idx.size == 0:
            return
        xh = np.asarray(contexts, dtype=float)
        z = np.asarray(z, dtype=float)
        cov = self.covs[idx]
        mu = self.means[idx]
        cov_x = np.einsum("kij,kj->ki", cov, xh)
        a = np.einsum("ki,ki->k", xh, cov_x)
        xmu = np.einsum("ki,ki->k", xh, mu)
        xi = np.sqrt(np.maximum(a + xmu**2, 0.0))
        for _ in range(n_iter):
            c = 2.0 * np.abs(_ell_vec(xi))
            denom = 1.0 + c * a
            k = c / denom
            mu_hat = (
                mu
                - (k * xmu)[:, None] * cov_x
                + ((z - 0.5) / denom)[:, None] * cov_x
            )
            # x̂ᵀΣ̂x̂ = a / denom without forming Σ̂.
            quad = a / denom
            xmu_hat = np.einsum("ki,ki->k", xh, mu_hat)
            xi = np.sqrt(np.maximum(quad + xmu_hat**2, 0.0))
        cov_hat = cov - k[:, None, None] * np.einsum(
            "ki,kj->kij", cov_x, cov_x
        )
        cov_hat = (cov_hat + np.swapaxes(cov_hat, 1, 2)) / 2.0
        self.covs[idx] = cov_hat
        self.means[idx] = mu_hat


def _ell_vec(xi: np.ndarray) -> np.ndarray:
    out = np.full_like(xi, -0.125)
    big = np.abs(xi) > XI_EPS
    out[big] = (0.5 - _sigmoid(xi[big])) / (2.0 * xi[big])
    return out


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------


def belief_to_dict(customer_id: int, belief: GaussianBelief) -> dict:
    """Schema: {customer_id, mean: [...], covariance: [[...]]}."""
    return {
        "customer_id": int(customer_id),
        "mean": belief.mean.tolist(),
        "covariance": belief.covariance.tolist(),
    }


def belief_from_dict(d: dict) -> tuple[int, GaussianBelief]:
    return int(d["customer_id"]), GaussianBelief(
        np.asarray(d["mean"], dtype=float),
        np.asarray(d["covariance"], dtype=float),
    )


def save_beliefs(path, beliefs: dict[int, GaussianBelief]) -> None:
    records = [belief_to_dict(i, b) for i, b in sorted(beliefs.items())]
    with open(path, "w") as fh:
        json.dump(records, fh)


def load_beliefs(path) -> dict[int, GaussianBelief]:
    with open(path) as fh:
        records = json.load(fh)
    return dict(belief_from_dict(d) for d in records)
