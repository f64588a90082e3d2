"""Classical baselines fit directly to the observations.

Two reference models live here: batch variational-Bayes EM for a conjugate
Gaussian mixture, built on the same exponential-family machinery as the
structured model, and maximum-likelihood EM for a linear dynamical system
with its own Kalman smoother.  Both exist to be compared against, so each
exposes an honest held-out score: the mixture reports its exact posterior
predictive density, the dynamical system its filtered multi-step forecasts.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from . import expfam, linalg, models, updates
from .errors import ContractError

LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Variational-Bayes mixture


@dataclass(frozen=True)
class VbGmmResult:
    posterior: updates.PgmPosterior
    responsibilities: np.ndarray
    elbos: np.ndarray


def expected_component_loglik(q, y):
    """(n, k) matrix of E_q[log N(y_n | mu_k, Lam_k)].

    The expectation is an inner product between the per-datum sufficient
    statistics and the posterior's mean coordinates.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n, d = y.shape
    out = np.empty((n, q.n_components))
    for j, comp in enumerate(q.components):
        m1, m2, m3, m4 = expfam.split_normal_wishart(expfam.to_mean(comp).values, d)
        out[:, j] = y @ m1 + m2[0] + np.einsum("ni,il,nl->n", y, m3, y) + m4[0]
    return out - 0.5 * d * LOG_2PI


def vb_gmm_responsibilities(q, y):
    log_rho = expected_component_loglik(q, y) + expfam.to_mean(q.weights).values
    return np.exp(log_rho - logsumexp(log_rho, axis=1, keepdims=True))


def vb_gmm_elbo(q, prior, y, resp):
    val, _ = models.expected_log_prior(q, y, resp)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(resp > 0, resp * np.log(resp), 0.0))
    return float(val + ent - updates.kl_to_prior(q, prior))


def _init_resp(y, k, rng):
    """Hard assignment to k data rows drawn as provisional centers."""
    n = y.shape[0]
    centers = y[rng.choice(n, size=k, replace=False)]
    d2 = ((y[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.eye(k)[d2.argmin(axis=1)]


def vb_gmm_fit(y, k, n_iter=100, prior=None, seed=0):
    """Batch VB-EM; the recorded bound is nondecreasing by construction."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n, d = y.shape
    if k < 1 or n < k:
        raise ContractError("need at least one datum per component")
    if prior is None:
        prior = updates.default_gmm_prior(k, d)
    rng = np.random.default_rng(seed)
    resp = _init_resp(y, k, rng)
    elbos = []
    q = prior
    for _ in range(n_iter):
        message = updates.conjugate_gmm_message(prior, y, resp, n_total=n)
        q = updates.natural_gradient_step(q, message, beta1=1.0)
        resp = vb_gmm_responsibilities(q, y)
        elbos.append(vb_gmm_elbo(q, prior, y, resp))
    return VbGmmResult(posterior=q, responsibilities=resp, elbos=np.asarray(elbos))


def _student_logpdf(y, mean, prec, dof):
    """Multivariate t with a precision-form scale matrix."""
    d = mean.size
    chol = np.linalg.cholesky(linalg.symmetrize(np.linalg.inv(prec)))
    sol = np.linalg.solve(chol, (y - mean).T).T
    delta = np.sum(sol**2, axis=1)
    logdet_prec = -2.0 * np.sum(np.log(np.diag(chol)))
    return (
        gammaln(0.5 * (dof + d))
        - gammaln(0.5 * dof)
        - 0.5 * d * np.log(dof * np.pi)
        + 0.5 * logdet_prec
        - 0.5 * (dof + d) * np.log1p(delta / dof)
    )


def vb_gmm_predictive_logpdf(q, y):
    """Exact per-datum log posterior-predictive density, a Student mixture."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    d = y.shape[1]
    alpha = expfam.to_standard(q.weights).alpha
    log_w = np.log(alpha) - np.log(alpha.sum())
    cols = []
    for j, comp in enumerate(q.components):
        p = expfam.to_standard(comp)
        dof = p.dof + 1.0 - d
        if dof <= 0:
            raise ContractError("posterior dof too small for a proper predictive")
        prec = (dof * p.kappa / (1.0 + p.kappa)) * p.scale
        cols.append(log_w[j] + _student_logpdf(y, p.mean, prec, dof))
    return logsumexp(np.stack(cols, axis=1), axis=1)


# ---------------------------------------------------------------------------
# Linear dynamical system EM


@dataclass(frozen=True)
class LdsEmParams:
    trans: np.ndarray  # (d, d)
    trans_cov: np.ndarray  # (d, d)
    emit: np.ndarray  # (D, d)
    emit_cov: np.ndarray  # (D, D)
    init_mean: np.ndarray  # (d,)
    init_cov: np.ndarray  # (d, d)


@dataclass(frozen=True)
class SmoothedMoments:
    """Posterior moments for one sequence; cross[t] is Cov(x_{t+2}, x_{t+1})."""

    mean: np.ndarray  # (T, d)
    cov: np.ndarray  # (T, d, d)
    cross: np.ndarray  # (T - 1, d, d)
    loglik: float


def lds_em_init(seqs, d, seed=0):
    """Principal-direction emission, mild dynamics, observation-scale noise."""
    seqs = np.asarray(seqs, dtype=float)
    flat = seqs.reshape(-1, seqs.shape[-1])
    obs_dim = flat.shape[1]
    if d > obs_dim:
        raise ContractError("latent dimension exceeds observation dimension")
    centered = flat - flat.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    scales = svals[:d] / np.sqrt(max(flat.shape[0] - 1, 1))
    emit = vt[:d].T * scales
    resid = centered - (centered @ vt[:d].T) @ vt[:d]
    emit_var = max(float(resid.var()), 1e-3)
    return LdsEmParams(
        trans=0.9 * np.eye(d),
        trans_cov=0.1 * np.eye(d),
        emit=emit,
        emit_cov=emit_var * np.eye(obs_dim),
        init_mean=np.zeros(d),
        init_cov=np.eye(d),
    )


def lds_em_filter(params, y):
    """Kalman filter for one sequence; returns means, covs, and predictions."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    t_len, obs_dim = y.shape
    d = params.trans.shape[0]
    a, c = params.trans, params.emit
    xf = np.empty((t_len, d))
    pf = np.empty((t_len, d, d))
    xp = np.empty((t_len, d))
    pp = np.empty((t_len, d, d))
    loglik = 0.0
    for t in range(t_len):
        if t == 0:
            xp[t] = params.init_mean
            pp[t] = params.init_cov
        else:
            xp[t] = a @ xf[t - 1]
            pp[t] = a @ pf[t - 1] @ a.T + params.trans_cov
        s = c @ pp[t] @ c.T + params.emit_cov
        chol = linalg.cholesky_spd(linalg.symmetrize(s))
        e = y[t] - c @ xp[t]
        sol = np.linalg.solve(chol, e)
        loglik += -0.5 * (
            obs_dim * LOG_2PI + linalg.logdet_from_chol(chol) + sol @ sol
        )
        gain = pp[t] @ c.T @ linalg.inv_from_chol(chol)
        xf[t] = xp[t] + gain @ e
        pf[t] = linalg.symmetrize((np.eye(d) - gain @ c) @ pp[t])
    return xf, pf, xp, pp, float(loglik)


def lds_em_smooth(params, y):
    """Rauch-Tung-Striebel pass with the lag-one covariances EM needs."""
    xf, pf, xp, pp, loglik = lds_em_filter(params, y)
    t_len, d = xf.shape
    a = params.trans
    xs = np.empty_like(xf)
    ps = np.empty_like(pf)
    cross = np.empty((t_len - 1, d, d))
    xs[-1] = xf[-1]
    ps[-1] = pf[-1]
    for t in range(t_len - 2, -1, -1):
        j = pf[t] @ a.T @ np.linalg.inv(pp[t + 1])
        xs[t] = xf[t] + j @ (xs[t + 1] - xp[t + 1])
        ps[t] = linalg.symmetrize(pf[t] + j @ (ps[t + 1] - pp[t + 1]) @ j.T)
        cross[t] = ps[t + 1] @ j.T
    return SmoothedMoments(mean=xs, cov=ps, cross=cross, loglik=loglik)


def lds_em_fit(seqs, d, n_iter=50, init=None):
    """Batch EM over whole sequences; marginal likelihood is nondecreasing."""
    seqs = np.asarray(seqs, dtype=float)
    if seqs.ndim != 3 or seqs.shape[1] < 2:
        raise ContractError("need (n_seq, T >= 2, obs_dim) sequences")
    n_seq, t_len, obs_dim = seqs.shape
    params = lds_em_init(seqs, d) if init is None else init
    logliks = []
    for _ in range(n_iter):
        s11 = np.zeros((d, d))
        s10 = np.zeros((d, d))
        s00 = np.zeros((d, d))
        sxx = np.zeros((d, d))
        syx = np.zeros((obs_dim, d))
        syy = np.zeros((obs_dim, obs_dim))
        first_mean = np.zeros(d)
        first_sq = np.zeros((d, d))
        total = 0.0
        for y in seqs:
            sm = lds_em_smooth(params, y)
            total += sm.loglik
            second = sm.cov + np.einsum("ti,tj->tij", sm.mean, sm.mean)
            s11 += second[1:].sum(axis=0)
            s00 += second[:-1].sum(axis=0)
            s10 += (sm.cross + np.einsum("ti,tj->tij", sm.mean[1:], sm.mean[:-1])).sum(
                axis=0
            )
            sxx += second.sum(axis=0)
            syx += y.T @ sm.mean
            syy += y.T @ y
            first_mean += sm.mean[0]
            first_sq += second[0]
        logliks.append(total)

        trans = s10 @ np.linalg.inv(s00)
        trans_cov = linalg.symmetrize(
            (s11 - trans @ s10.T) / (n_seq * (t_len - 1))
        )
        emit = syx @ np.linalg.inv(sxx)
        emit_cov = linalg.symmetrize((syy - emit @ syx.T) / (n_seq * t_len))
        init_mean = first_mean / n_seq
        init_cov = linalg.symmetrize(
            first_sq / n_seq - np.outer(init_mean, init_mean)
        )
        params = LdsEmParams(
            trans=trans,
            trans_cov=trans_cov,
            emit=emit,
            emit_cov=emit_cov,
            init_mean=init_mean,
            init_cov=init_cov,
        )
    return params, np.asarray(logliks)


def lds_em_loglik(params, seqs):
    seqs = np.asarray(seqs, dtype=float)
    return float(sum(lds_em_filter(params, y)[4] for y in seqs))


def lds_em_tau_mae(params, seqs, tau):
    """Forecast MAE: filter to t, roll the mean tau steps, emit, compare.

    The average runs over sequences, the T - tau valid origins, and every
    observed coordinate; tau = 0 degenerates to filtered reconstruction.
    """
    seqs = np.asarray(seqs, dtype=float)
    if seqs.ndim != 3:
        raise ContractError("need (n_seq, T, obs_dim) sequences")
    t_len = seqs.shape[1]
    if not 0 <= tau < t_len:
        raise ContractError("tau must lie in [0, T)")
    total = 0.0
    count = 0
    for y in seqs:
        xf, _, _, _, _ = lds_em_filter(params, y)
        pred = xf[: t_len - tau]
        for _ in range(tau):
            pred = pred @ params.trans.T
        err = np.abs(y[tau:] - pred @ params.emit.T)
        total += err.sum()
        count += err.size
    return total / count
