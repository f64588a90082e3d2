"""Posterior networks built as a product of two factors.

A recognition MLP maps each observation to a diagonal Gaussian factor
N(x_n | m_n, diag(v_n)); a structured factor couples the latents, either a
Gaussian mixture over independent rows or linear dynamics over a sequence.
The product is renormalized, so each network exposes

  * the log normalizer of the product (closed form for the mixture, a
    forward filter for the dynamics),
  * exact reparameterized joint samples with a recorded noise vector, and
  * hand-written reverse-mode gradients of both the log normalizer and the
    sampling map with respect to every parameter.

Parameter vectors are laid out as [encoder parameters, structured-factor
parameters], the factor part ordered as in the underlying ``models`` class.

Gradient convention: discrete mixture indicators are drawn but never
differentiated; pathwise derivatives flow only through the Gaussian
conditional at fixed indicators.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import linalg, models, nnet
from .errors import ContractError, InvalidParameterError, NumericalError
from .linalg import logsumexp

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmInferenceNet:
    mixture: models.GaussianMixture
    encoder: nnet.Mlp

    @property
    def latent_dim(self):
        return self.mixture.dim

    @property
    def n_encoder_params(self):
        return nnet.num_params(self.encoder)

    def phi_vector(self):
        return np.concatenate(
            [nnet.param_vector(self.encoder), self.mixture.param_vector()]
        )

    def with_phi_vector(self, vec):
        n = self.n_encoder_params
        return GmmInferenceNet(
            mixture=self.mixture.with_param_vector(vec[n:]),
            encoder=nnet.set_param_vector(self.encoder, vec[:n]),
        )


@dataclass
class LdsInferenceNet:
    dynamics: models.LinearDynamics
    encoder: nnet.Mlp

    @property
    def latent_dim(self):
        return self.dynamics.dim

    @property
    def n_encoder_params(self):
        return nnet.num_params(self.encoder)

    def phi_vector(self):
        return np.concatenate(
            [nnet.param_vector(self.encoder), self.dynamics.param_vector()]
        )

    def with_phi_vector(self, vec):
        n = self.n_encoder_params
        return LdsInferenceNet(
            dynamics=self.dynamics.with_param_vector(vec[n:]),
            encoder=nnet.set_param_vector(self.encoder, vec[:n]),
        )


@dataclass
class PosteriorSample:
    """One reparameterized joint draw plus everything needed to replay it."""

    x_star: np.ndarray
    z_star: Optional[np.ndarray]
    eps: np.ndarray
    log_z: float


def init_gmm_net(k, d, data_dim, hidden=(), rng=None, activation="tanh"):
    """Mixture factor at spread-out means with unit covariances."""
    rng = np.random.default_rng() if rng is None else rng
    mixture = models.GaussianMixture(
        logits=np.zeros(k),
        means=2.0 * rng.standard_normal((k, d)),
        chol_raw=np.zeros((k, linalg.tril_size(d))),
    )
    encoder = nnet.init_mlp(
        [data_dim, *hidden, 2 * d], [activation] * len(hidden), rng
    )
    return GmmInferenceNet(mixture=mixture, encoder=encoder)


def init_lds_net(d, data_dim, hidden=(), rng=None, activation="tanh"):
    """Mildly contractive dynamics with small process noise."""
    rng = np.random.default_rng() if rng is None else rng
    dynamics = models.LinearDynamics(
        trans=0.9 * np.eye(d),
        noise_raw=linalg.raw_from_spd(0.1 * np.eye(d)),
        init_mean=np.zeros(d),
        init_raw=np.zeros(linalg.tril_size(d)),
    )
    encoder = nnet.init_mlp(
        [data_dim, *hidden, 2 * d], [activation] * len(hidden), rng
    )
    return LdsInferenceNet(dynamics=dynamics, encoder=encoder)


def encode(net, y):
    """Recognition-net factor parameters (m, v) for each observation row."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    mean, var, _ = nnet.forward(net.encoder, y)
    if mean.shape[1] != net.latent_dim:
        raise ContractError(
            f"encoder emits dim {mean.shape[1]}, structured factor has dim "
            f"{net.latent_dim}"
        )
    return mean, var


def _encode_taped(net, y):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    mean, var, tape = nnet.forward(net.encoder, y)
    if mean.shape[1] != net.latent_dim:
        raise ContractError(
            f"encoder emits dim {mean.shape[1]}, structured factor has dim "
            f"{net.latent_dim}"
        )
    return mean, var, tape


def _guarded_chol(mats, what):
    if not np.all(np.isfinite(mats)):
        raise InvalidParameterError(f"{what} contains non-finite entries")
    try:
        return linalg.cholesky_spd(mats, what)
    except NumericalError as exc:
        raise InvalidParameterError(str(exc)) from None


# ---------------------------------------------------------------------------
# Mixture-structured factor


def gmm_scores(mixture, m, v):
    """(n, k) log of [weight_k x N(m_n | mu_k, diag(v_n) + Sigma_k)]."""
    n, d = m.shape
    k = mixture.n_components
    s = np.broadcast_to(mixture.covs, (n, k, d, d)).copy()
    idx = np.arange(d)
    s[:, :, idx, idx] += v[:, None, :]
    chol = _guarded_chol(s, "combined mixture covariance")
    u = m[:, None, :] - mixture.means[None, :, :]
    sol = np.linalg.solve(chol, u[..., None])[..., 0]
    quad = np.sum(sol**2, axis=-1)
    logdet = linalg.logdet_from_chol(chol)
    return mixture.log_weights()[None, :] - 0.5 * (quad + logdet + d * LOG_2PI)


def aggregate_scores(scores):
    """(total log normalizer, per-datum log normalizers, responsibilities)."""
    per_datum = logsumexp(scores, axis=1)
    resp = np.exp(scores - per_datum[:, None])
    return float(per_datum.sum()), per_datum, resp


def gmm_log_z_parts(mixture, m, v):
    return aggregate_scores(gmm_scores(mixture, m, v))


def gmm_log_z(net, y):
    """Log normalizer of the product posterior and the indicator marginals."""
    m, v = encode(net, y)
    log_z, _, resp = gmm_log_z_parts(net.mixture, m, v)
    return log_z, resp


def _mixture_precisions(mixture):
    covs = mixture.covs
    if not np.all(np.isfinite(covs)):
        raise InvalidParameterError("mixture covariance contains non-finite entries")
    return np.linalg.inv(covs)


def gmm_conditional(mixture, m, v, z):
    """Mean and covariance of x_n given indicator z_n, vectorized over rows."""
    prec_mix = _mixture_precisions(mixture)[np.asarray(z, dtype=int)]
    idx = np.arange(m.shape[1])
    prec = prec_mix.copy()
    prec[:, idx, idx] += 1.0 / v
    cov = np.linalg.inv(prec)
    b = m / v + np.einsum("nij,nj->ni", prec_mix, mixture.means[z])
    mean = np.einsum("nij,nj->ni", cov, b)
    return mean, cov


def gmm_reconstruct(mixture, m, v, z, eps):
    """Deterministic sample given indicators and noise; the pathwise map."""
    mean, cov = gmm_conditional(mixture, m, v, z)
    chol = np.linalg.cholesky(cov)
    return mean + np.einsum("nij,nj->ni", chol, eps)


def _sample_indicators(resp, rng):
    cum = np.cumsum(resp, axis=1)
    u = rng.random((resp.shape[0], 1))
    return np.minimum((u > cum).sum(axis=1), resp.shape[1] - 1)


def gmm_sample(net, y, rng):
    """Joint draw: indicators from their marginals, then the Gaussian given z.

    RNG order is one uniform block for z, then one normal block for eps.
    """
    m, v = encode(net, y)
    log_z, _, resp = gmm_log_z_parts(net.mixture, m, v)
    z = _sample_indicators(resp, rng)
    eps = rng.standard_normal(m.shape)
    x = gmm_reconstruct(net.mixture, m, v, z, eps)
    return PosteriorSample(x_star=x, z_star=z, eps=eps, log_z=log_z)


def gmm_log_z_factor_grads(mixture, m, v):
    """Gradients of the log normalizer with respect to (m, v) and the factor."""
    n, d = m.shape
    k = mixture.n_components
    scores = gmm_scores(mixture, m, v)
    _, _, resp = aggregate_scores(scores)

    s = np.broadcast_to(mixture.covs, (n, k, d, d)).copy()
    idx = np.arange(d)
    s[:, :, idx, idx] += v[:, None, :]
    chol = _guarded_chol(s, "combined mixture covariance")
    u = m[:, None, :] - mixture.means[None, :, :]
    su = linalg.chol_solve(chol, u[..., None])[..., 0]
    sinv = linalg.inv_from_chol(chol)
    d_m = -np.einsum("nk,nkd->nd", resp, su)
    d_means = np.einsum("nk,nkd->kd", resp, su)
    g = 0.5 * (
        np.einsum("nk,nki,nkl->nkil", resp, su, su)
        - resp[:, :, None, None] * sinv
    )
    d_v = np.sum(g[:, :, idx, idx], axis=1)
    d_raw = linalg.tril_raw_vjp(mixture.chol_raw, d, g.sum(axis=0))
    d_logits = resp.sum(axis=0) - n * mixture.weights
    d_factor = np.concatenate([d_logits, d_means.ravel(), d_raw.ravel()])
    return d_m, d_v, d_factor


def gmm_pathwise_factor_vjp(mixture, m, v, z, eps, grad_x):
    """Adjoint of the sampling map at fixed (z, eps), batched over rows.

    Indicators carry no gradient, so the weight-logit block is zero.
    """
    n, d = m.shape
    k = mixture.n_components
    z = np.asarray(z, dtype=int)
    idx = np.arange(d)

    pk = _mixture_precisions(mixture)[z]
    mu = mixture.means[z]
    prec = pk.copy()
    prec[:, idx, idx] += 1.0 / v
    cov = np.linalg.inv(prec)
    b = m / v + np.einsum("nij,nj->ni", pk, mu)
    chol = np.linalg.cholesky(cov)

    g = grad_x
    cov_b = linalg.cholesky_vjp(chol, g[:, :, None] * eps[:, None, :])
    cov_b += g[:, :, None] * b[:, None, :]
    b_b = np.einsum("nij,nj->ni", cov, g)
    prec_b = -np.einsum("nij,njl,nlm->nim", cov, cov_b, cov)
    d_v = -np.diagonal(prec_b, axis1=-2, axis2=-1) / v**2 - b_b * m / v**2
    d_m = b_b / v
    pk_b = prec_b + b_b[:, :, None] * mu[:, None, :]
    d_means = np.zeros((k, d))
    np.add.at(d_means, z, np.einsum("nij,nj->ni", pk, b_b))
    g_cov = np.zeros((k, d, d))
    np.add.at(g_cov, z, -np.einsum("nij,njl,nlm->nim", pk, pk_b, pk))
    d_raw = np.stack(
        [
            linalg.tril_raw_vjp(mixture.chol_raw[j], d, g_cov[j])
            for j in range(k)
        ]
    )
    d_factor = np.concatenate([np.zeros(k), d_means.ravel(), d_raw.ravel()])
    return d_m, d_v, d_factor


# ---------------------------------------------------------------------------
# Dynamics-structured factor


@dataclass
class FilterRecord:
    """Forward filter pass over pseudo-observations (m_t, diag(v_t)).

    Per-step arrays are indexed 0..T-1 for step t = index + 1; filtered
    moments carry an extra leading row for the initial state.
    """

    m: np.ndarray          # (T, d) pseudo-observation means
    v: np.ndarray          # (T, d) pseudo-observation variances
    mu_pred: np.ndarray    # (T, d)
    p_pred: np.ndarray     # (T, d, d)
    chol_s: np.ndarray     # (T, d, d) innovation covariance factors
    resid: np.ndarray      # (T, d)
    gain: np.ndarray       # (T, d, d)
    mu_filt: np.ndarray    # (T+1, d)
    p_filt: np.ndarray     # (T+1, d, d)
    log_z: float


def lds_filter(dyn, m, v):
    """Kalman forward pass; the log normalizer accumulates per-step
    prediction-error terms."""
    t_len, d = m.shape
    a = dyn.trans
    q = dyn.noise_cov
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(dyn.init_cov))):
        raise InvalidParameterError("dynamics covariances contain non-finite entries")
    mu_pred = np.zeros((t_len, d))
    p_pred = np.zeros((t_len, d, d))
    chol_s = np.zeros((t_len, d, d))
    resid = np.zeros((t_len, d))
    gain = np.zeros((t_len, d, d))
    mu_filt = np.zeros((t_len + 1, d))
    p_filt = np.zeros((t_len + 1, d, d))
    mu_filt[0] = dyn.init_mean
    p_filt[0] = dyn.init_cov
    log_z = 0.0
    for t in range(t_len):
        mu_pred[t] = a @ mu_filt[t]
        p_pred[t] = a @ p_filt[t] @ a.T + q
        s = p_pred[t] + np.diag(v[t])
        chol_s[t] = _guarded_chol(s, "innovation covariance")
        resid[t] = m[t] - mu_pred[t]
        sol = np.linalg.solve(chol_s[t], resid[t])
        log_z += -0.5 * (
            d * LOG_2PI + linalg.logdet_from_chol(chol_s[t]) + sol @ sol
        )
        gain[t] = p_pred[t] @ linalg.inv_from_chol(chol_s[t])
        mu_filt[t + 1] = mu_pred[t] + gain[t] @ resid[t]
        p_filt[t + 1] = p_pred[t] - gain[t] @ p_pred[t]
    return FilterRecord(
        m=m, v=v, mu_pred=mu_pred, p_pred=p_pred, chol_s=chol_s, resid=resid,
        gain=gain, mu_filt=mu_filt, p_filt=p_filt, log_z=float(log_z),
    )


def lds_log_z(net, y):
    """Log normalizer of the sequence posterior plus the recorded filter."""
    m, v = encode(net, y)
    record = lds_filter(net.dynamics, m, v)
    return record.log_z, record


def lds_reconstruct(dyn, record, eps):
    """Backward-sampling pass as a deterministic map of the noise block.

    ``eps`` has shape (..., T+1, d); row t is consumed for x_t.  Returns
    latents with the initial state in row 0.
    """
    t_len, d = record.m.shape
    a = dyn.trans
    x = np.zeros(eps.shape)
    chol_t = linalg.cholesky_spd(record.p_filt[t_len], "filtered covariance")
    x[..., t_len, :] = record.mu_filt[t_len] + eps[..., t_len, :] @ chol_t.T
    for t in range(t_len - 1, -1, -1):
        pp1 = record.p_pred[t]
        pp1_inv = np.linalg.inv(pp1)
        j = record.p_filt[t] @ a.T @ pp1_inv
        c = record.mu_filt[t] + (x[..., t + 1, :] - record.mu_pred[t]) @ j.T
        cov = record.p_filt[t] - j @ pp1 @ j.T
        chol = linalg.cholesky_spd(cov, "conditional covariance")
        x[..., t, :] = c + eps[..., t, :] @ chol.T
    return x


def lds_sample(net, y, rng):
    """Exact joint draw via backward sampling; one (T+1, d) noise block."""
    m, v = encode(net, y)
    record = lds_filter(net.dynamics, m, v)
    eps = rng.standard_normal((m.shape[0] + 1, m.shape[1]))
    x = lds_reconstruct(net.dynamics, record, eps)
    return PosteriorSample(x_star=x, z_star=None, eps=eps, log_z=record.log_z)


def _filter_reverse(dyn, record, ext_mf, ext_pf, ext_mp, ext_pp, ext_s, ext_e):
    """Reverse sweep of the forward filter with externally injected adjoints.

    Returns gradients for (m, v) and the dynamics parameter vector.
    """
    t_len, d = record.m.shape
    a = dyn.trans
    d_m = np.zeros_like(record.m)
    d_v = np.zeros_like(record.v)
    a_b = np.zeros_like(a)
    q_b = np.zeros((d, d))
    mf_c = ext_mf[t_len].copy()
    pf_c = ext_pf[t_len].copy()
    for t in range(t_len - 1, -1, -1):
        s_inv = linalg.inv_from_chol(record.chol_s[t])
        pp = record.p_pred[t]
        k_gain = record.gain[t]
        e_b = ext_e[t].copy()
        s_b = ext_s[t].copy()
        mp_b = ext_mp[t].copy()
        pp_b = ext_pp[t].copy()
        # mu_filt = mu_pred + K e
        mp_b += mf_c
        k_b = np.outer(mf_c, record.resid[t])
        e_b += k_gain.T @ mf_c
        # p_filt = p_pred - K p_pred
        pp_b += pf_c - k_gain.T @ pf_c
        k_b += -pf_c @ pp.T
        # K = p_pred s_inv
        pp_b += k_b @ s_inv
        s_b += -s_inv @ pp.T @ k_b @ s_inv
        # s = p_pred + diag(v)
        pp_b += s_b
        d_v[t] += np.diagonal(s_b)
        # e = m - mu_pred
        d_m[t] += e_b
        mp_b += -e_b
        # mu_pred = A mu_filt[t], p_pred = A p_filt[t] A^T + Q
        prev_mf = record.mu_filt[t]
        prev_pf = record.p_filt[t]
        a_b += np.outer(mp_b, prev_mf)
        a_b += pp_b @ a @ prev_pf.T + pp_b.T @ a @ prev_pf
        q_b += pp_b
        mf_c = a.T @ mp_b + ext_mf[t]
        pf_c = a.T @ pp_b @ a + ext_pf[t]
    d_dyn = np.concatenate(
        [
            a_b.ravel(),
            linalg.tril_raw_vjp(dyn.noise_raw, d, q_b),
            mf_c,
            linalg.tril_raw_vjp(dyn.init_raw, d, pf_c),
        ]
    )
    return d_m, d_v, d_dyn


def _zero_ext(t_len, d):
    return (
        np.zeros((t_len + 1, d)),
        np.zeros((t_len + 1, d, d)),
        np.zeros((t_len, d)),
        np.zeros((t_len, d, d)),
        np.zeros((t_len, d, d)),
        np.zeros((t_len, d)),
    )


def lds_log_z_factor_grads(dyn, record):
    """Gradients of the filter's log normalizer wrt (m, v) and the dynamics."""
    t_len, d = record.m.shape
    ext_mf, ext_pf, ext_mp, ext_pp, ext_s, ext_e = _zero_ext(t_len, d)
    for t in range(t_len):
        s_inv = linalg.inv_from_chol(record.chol_s[t])
        se = s_inv @ record.resid[t]
        ext_s[t] = -0.5 * (s_inv - np.outer(se, se))
        ext_e[t] = -se
    return _filter_reverse(dyn, record, ext_mf, ext_pf, ext_mp, ext_pp, ext_s, ext_e)


def lds_pathwise_factor_vjp(dyn, record, eps, grad_x):
    """Adjoint of the backward-sampling map at fixed noise.

    Replays the sampling recursion, reverses it in execution-reverse order,
    then pushes the accumulated filtered/predicted adjoints through the
    filter reverse sweep.
    """
    t_len, d = record.m.shape
    a = dyn.trans
    # replay forward sampling, keeping per-step intermediates
    x = lds_reconstruct(dyn, record, eps)
    ext_mf, ext_pf, ext_mp, ext_pp, ext_s, ext_e = _zero_ext(t_len, d)
    x_bar = np.array(grad_x, dtype=float, copy=True)
    a_b = np.zeros_like(a)
    for t in range(t_len):
        pp1 = record.p_pred[t]
        pp1_inv = np.linalg.inv(pp1)
        j = record.p_filt[t] @ a.T @ pp1_inv
        cov = record.p_filt[t] - j @ pp1 @ j.T
        chol = linalg.cholesky_spd(cov, "conditional covariance")

        xb = x_bar[t]
        cov_b = linalg.cholesky_vjp(chol, np.outer(xb, eps[t]))
        # cov = p_filt - J pp1 J^T
        ext_pf[t] += cov_b
        j_b = -(cov_b + cov_b.T) @ j @ pp1
        pp1_b = -j.T @ cov_b @ j
        # c = mu_filt + J (x[t+1] - mu_pred)
        ext_mf[t] += xb
        back = j.T @ xb
        x_bar[t + 1] += back
        ext_mp[t] += -back
        j_b += np.outer(xb, x[t + 1] - record.mu_pred[t])
        # J = p_filt A^T pp1_inv
        ext_pf[t] += j_b @ pp1_inv.T @ a
        a_b += pp1_inv @ j_b.T @ record.p_filt[t]
        pp1_inv_b = a @ record.p_filt[t] @ j_b
        pp1_b += -pp1_inv @ pp1_inv_b @ pp1_inv
        ext_pp[t] += pp1_b
    # terminal draw x_T = mu_filt[T] + chol(p_filt[T]) eps[T]
    chol_t = linalg.cholesky_spd(record.p_filt[t_len], "filtered covariance")
    ext_mf[t_len] += x_bar[t_len]
    ext_pf[t_len] += linalg.cholesky_vjp(chol_t, np.outer(x_bar[t_len], eps[t_len]))
    d_m, d_v, d_dyn = _filter_reverse(
        dyn, record, ext_mf, ext_pf, ext_mp, ext_pp, ext_s, ext_e
    )
    d_dyn[: d * d] += a_b.ravel()
    return d_m, d_v, d_dyn


# ---------------------------------------------------------------------------
# Whole-network gradients


def _with_encoder_grad(net, y, d_m, d_v, d_factor):
    _, _, tape = _encode_taped(net, y)
    enc_grad, _ = nnet.backward(net.encoder, tape, d_m, d_v)
    return np.concatenate([enc_grad, d_factor])


def grad_log_z(net, y):
    """Gradient of the log normalizer in the network's phi layout."""
    m, v = encode(net, y)
    if isinstance(net, GmmInferenceNet):
        d_m, d_v, d_factor = gmm_log_z_factor_grads(net.mixture, m, v)
    else:
        record = lds_filter(net.dynamics, m, v)
        d_m, d_v, d_factor = lds_log_z_factor_grads(net.dynamics, record)
    return _with_encoder_grad(net, y, d_m, d_v, d_factor)


def gmm_pathwise_grad(net, y, z, eps, grad_x):
    """Phi-layout adjoint of x*(phi) at fixed indicators and noise."""
    m, v = encode(net, y)
    d_m, d_v, d_factor = gmm_pathwise_factor_vjp(net.mixture, m, v, z, eps, grad_x)
    return _with_encoder_grad(net, y, d_m, d_v, d_factor)


def lds_pathwise_grad(net, y, eps, grad_x):
    """Phi-layout adjoint of the sequence draw at fixed noise."""
    m, v = encode(net, y)
    record = lds_filter(net.dynamics, m, v)
    d_m, d_v, d_dyn = lds_pathwise_factor_vjp(net.dynamics, record, eps, grad_x)
    return _with_encoder_grad(net, y, d_m, d_v, d_dyn)


def encoder_grad(net, y, d_m, d_v):
    """Phi-layout vector for adjoints that touch the encoder outputs alone."""
    n_factor = net.phi_vector().size - net.n_encoder_params
    return _with_encoder_grad(net, y, d_m, d_v, np.zeros(n_factor))
