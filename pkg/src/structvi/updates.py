"""Parameter-update rules.

Four families of update live here:

* natural-gradient steps on the conjugate posterior over mixture parameters
  (a convex combination in natural coordinates, which at step size one and
  full-batch statistics IS the exact conjugate posterior);
* plain and adagrad ascent steps for network and inference-net parameters;
* the variational optimizer that maintains a Gaussian search distribution
  whose variance contracts as curvature accumulates;
* Gaussian coordinate-wise posteriors over network weights.

Sign conventions: sgd/adagrad ascend (callers pass bound gradients), van_step
descends (callers pass gradients of a loss), and bayes_nn_step follows the
natural-parameter convex combination, so zero likelihood gradients pull the
posterior to its prior.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import expfam, linalg
from .errors import ContractError, InvalidParameterError

NG_MAX_HALVINGS = 10


@dataclass(frozen=True)
class PgmPosterior:
    """Dirichlet block over weights plus one Normal-Wishart block per component."""

    weights: expfam.NaturalParamVector
    components: list

    @property
    def n_components(self):
        return self.weights.dim

    @property
    def dim(self):
        return self.components[0].dim

    def flat_values(self):
        return np.concatenate(
            [self.weights.values] + [c.values for c in self.components]
        )

    def with_flat_values(self, flat):
        k, d = self.n_components, self.dim
        block = d * d + d + 2
        weights = self.weights.replace_values(flat[:k])
        comps = [
            self.components[j].replace_values(flat[k + j * block : k + (j + 1) * block])
            for j in range(k)
        ]
        return PgmPosterior(weights=weights, components=comps)

    def in_domain(self):
        return expfam.in_natural_domain(self.weights) and all(
            expfam.in_natural_domain(c) for c in self.components
        )


def default_gmm_prior(k, d, alpha0=1.0, kappa0=0.1, m0=None, w0=None, nu0=None):
    """Weakly informative conjugate prior used everywhere by default."""
    m0 = np.zeros(d) if m0 is None else np.asarray(m0, dtype=float)
    w0 = np.eye(d) if w0 is None else np.asarray(w0, dtype=float)
    nu0 = float(d + 2) if nu0 is None else float(nu0)
    weights = expfam.to_natural_vector(expfam.DirichletParam(alpha=np.full(k, alpha0)))
    comp = expfam.to_natural_vector(
        expfam.NormalWishartParam(mean=m0, kappa=kappa0, scale=w0, dof=nu0)
    )
    return PgmPosterior(weights=weights, components=[comp] * k)


def responsibilities_matrix(z, k, n):
    """Hard labels or row-normalized responsibilities -> (n, k) matrix."""
    z = np.asarray(z)
    if z.ndim == 1:
        if z.size != n:
            raise ContractError("label vector length mismatch")
        zi = z.astype(int)
        if np.any(zi < 0) or np.any(zi >= k):
            raise ContractError("labels must lie in [0, K)")
        return np.eye(k)[zi]
    if z.shape != (n, k):
        raise ContractError("responsibility matrix shape mismatch")
    return np.asarray(z, dtype=float)


def conjugate_gmm_message(prior, x_star, z_star, n_total):
    """Prior naturals plus minibatch-scaled sufficient statistics.

    The statistics are counts, responsibility-weighted sums, and
    responsibility-weighted scatter matrices, scaled by n_total / batch.
    """
    x = np.atleast_2d(np.asarray(x_star, dtype=float))
    n, d = x.shape
    k = prior.n_components
    resp = responsibilities_matrix(z_star, k, n)
    scale = float(n_total) / n

    counts = scale * resp.sum(axis=0)
    sums = scale * (resp.T @ x)
    scatters = scale * np.einsum("nj,ni,nl->jil", resp, x, x)

    weights = prior.weights.replace_values(prior.weights.values + counts)
    comps = []
    for j in range(k):
        stats = expfam.pack_normal_wishart(
            sums[j], counts[j], scatters[j], counts[j]
        )
        comps.append(prior.components[j].replace_values(prior.components[j].values + stats))
    return PgmPosterior(weights=weights, components=comps)


def natural_gradient_step(q, message, beta1):
    """lambda <- (1 - beta1) lambda + beta1 message, with domain guarding.

    A candidate that leaves the natural domain triggers step halving, up to
    ten times, before raising.
    """
    if not 0.0 <= beta1 <= 1.0:
        raise ContractError("beta1 must lie in [0, 1]")
    if message.n_components != q.n_components or message.dim != q.dim:
        raise ContractError("message layout mismatch")
    beta = beta1
    for _ in range(NG_MAX_HALVINGS + 1):
        flat = (1.0 - beta) * q.flat_values() + beta * message.flat_values()
        cand = q.with_flat_values(flat)
        if cand.in_domain():
            return cand
        beta *= 0.5
    raise InvalidParameterError(
        "natural-gradient step left the natural domain after halvings"
    )


def posterior_mean_params(q):
    """Plug-in point parameters: E[pi], E[mu_k], and E[Lam_k]^-1."""
    alpha = expfam.to_standard(q.weights).alpha
    weights = alpha / alpha.sum()
    means, covs = [], []
    for c in q.components:
        p = expfam.to_standard(c)
        means.append(p.mean)
        covs.append(np.linalg.inv(p.dof * p.scale))
    return weights, np.array(means), np.array(covs)


def sample_gmm_params(q, rng):
    """Draw (pi, means, covariances) from the posterior.

    The precision draws use the Bartlett construction batched across
    components; each marginal matches ``expfam.sample`` exactly.
    """
    pi = expfam.sample(q.weights, rng)
    k = len(q.components)
    d = q.components[0].dim
    kappa = np.empty(k)
    dof = np.empty(k)
    mean = np.empty((k, d))
    scale = np.empty((k, d, d))
    for j, c in enumerate(q.components):
        p = expfam.to_standard(c)
        kappa[j], dof[j], mean[j], scale[j] = p.kappa, p.dof, p.mean, p.scale
    chol_w = linalg.cholesky_spd(scale, "wishart scale")
    bart = np.zeros((k, d, d))
    idx = np.arange(d)
    bart[:, idx, idx] = np.sqrt(rng.chisquare(dof[:, None] - idx[None, :]))
    if d > 1:
        rr, cc = np.tril_indices(d, -1)
        bart[:, rr, cc] = rng.standard_normal((k, rr.size))
    factor = chol_w @ bart  # lam = factor factor^T
    lam = factor @ np.swapaxes(factor, -1, -2)
    z = rng.standard_normal((k, d))
    shift = np.linalg.solve(np.swapaxes(factor, -1, -2), z[..., None])[..., 0]
    means = mean + shift / np.sqrt(kappa)[:, None]
    return pi, means, np.linalg.inv(lam)


def kl_to_prior(q, prior):
    return expfam.kl_divergence(q.weights, prior.weights) + sum(
        expfam.kl_divergence(c, p) for c, p in zip(q.components, prior.components)
    )


# ---------------------------------------------------------------------------
# Euclidean steps

def _finite_or_warn(grad, what):
    if not np.all(np.isfinite(grad)):
        warnings.warn(f"non-finite gradient in {what}; step skipped", RuntimeWarning)
        return False
    return True


def sgd_step(params, grad, beta):
    """Ascent step params + beta * grad."""
    if beta <= 0:
        raise ContractError("beta must be positive")
    grad = np.asarray(grad, dtype=float)
    if not _finite_or_warn(grad, "sgd_step"):
        return np.asarray(params, dtype=float)
    return np.asarray(params, dtype=float) + beta * grad


@dataclass(frozen=True)
class AdagradState:
    accum: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(accum=np.zeros(n))


def adagrad_step(params, grad, state, beta):
    """Ascent with per-coordinate scaling by sqrt of accumulated squares."""
    if beta <= 0:
        raise ContractError("beta must be positive")
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if not _finite_or_warn(grad, "adagrad_step"):
        return params, state
    accum = state.accum + grad**2
    step = beta * grad / (np.sqrt(accum) + 1e-8)
    return params + step, AdagradState(accum=accum)


# ---------------------------------------------------------------------------
# variational optimizer over deterministic parameters

@dataclass(frozen=True)
class VanState:
    """Gaussian search distribution, diagonal covariance."""

    mu: np.ndarray
    sigma2: np.ndarray

    @classmethod
    def init(cls, mu, sigma2):
        mu = np.asarray(mu, dtype=float)
        return cls(mu=mu, sigma2=np.full_like(mu, float(sigma2)))


def van_step(state, grad_fn, hess_diag_fn, beta, rng):
    """One step of the second-order search-distribution update.

    Draws phi* = mu + sigma * eps, accumulates curvature into the precision,
    then moves the mean against the gradient scaled by the updated variance.
    Minimizes the caller's objective.  Negative curvature is floored at zero,
    so the precision never decreases.
    """
    if beta <= 0:
        raise ContractError("beta must be positive")
    eps = rng.standard_normal(state.mu.shape)
    phi_star = state.mu + np.sqrt(state.sigma2) * eps
    grad = np.asarray(grad_fn(phi_star), dtype=float)
    curv = np.maximum(np.asarray(hess_diag_fn(phi_star), dtype=float), 0.0)
    if not (_finite_or_warn(grad, "van_step") and _finite_or_warn(curv, "van_step")):
        return state
    prec = 1.0 / state.sigma2 + 2.0 * beta * curv
    sigma2 = 1.0 / prec
    mu = state.mu - beta * sigma2 * grad
    return VanState(mu=mu, sigma2=sigma2)


# ---------------------------------------------------------------------------
# Gaussian posteriors over network weights

@dataclass(frozen=True)
class BayesNnPosterior:
    mu: np.ndarray
    sigma2: np.ndarray
    mu0: float
    sigma0_sq: float


def bayes_nn_step(post, grad_mu, grad_sigma2, beta):
    """Natural-parameter convex combination toward prior-plus-likelihood.

    grad_mu is dE[log lik]/d mu and grad_sigma2 is dE[log lik]/d sigma2; the
    second derivative identity E[f''] = 2 dE/d sigma2 converts the latter into
    curvature.  Zero likelihood gradients contract the posterior onto its
    prior; the 1-d conjugate case converges to the exact posterior.
    """
    if not 0.0 <= beta < 1.0 + 1e-12:
        raise ContractError("beta must lie in [0, 1)")
    if beta == 0.0:
        return post
    grad_mu = np.asarray(grad_mu, dtype=float)
    curv = 2.0 * np.asarray(grad_sigma2, dtype=float)  # E[f'']
    if not (_finite_or_warn(grad_mu, "bayes_nn_step") and _finite_or_warn(curv, "bayes_nn_step")):
        return post
    prior_prec = 1.0 / post.sigma0_sq
    prec = 1.0 / post.sigma2
    lin = post.mu * prec  # first natural parameter

    prec_new = (1.0 - beta) * prec + beta * (prior_prec - curv)
    bad = prec_new <= 0
    if np.any(bad):
        warnings.warn(
            "bayes_nn_step precision went nonpositive; floored", RuntimeWarning
        )
        prec_new = np.where(bad, 1e-3 * prior_prec, prec_new)
    lin_new = (1.0 - beta) * lin + beta * (
        post.mu0 * prior_prec + grad_mu - post.mu * curv
    )
    sigma2_new = 1.0 / prec_new
    return BayesNnPosterior(
        mu=lin_new * sigma2_new,
        sigma2=sigma2_new,
        mu0=post.mu0,
        sigma0_sq=post.sigma0_sq,
    )
