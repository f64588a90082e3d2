"""Exponential-family conversions, log-partitions, KL, and sampling.

Oracles used here are independent of the implementation: Monte Carlo moments
drawn with scipy.stats, central finite differences of the log-partition, and
closed-form textbook expressions rederived inline.
"""

import numpy as np
import pytest
from scipy import special, stats

from structvi import expfam
from structvi.errors import InvalidParameterError


def random_dirichlet(rng, k):
    return expfam.DirichletParam(alpha=rng.uniform(0.5, 5.0, size=k))


def random_normal_wishart(rng, d):
    a = rng.standard_normal((d, d))
    scale = a @ a.T + d * np.eye(d)
    return expfam.NormalWishartParam(
        mean=rng.standard_normal(d),
        kappa=rng.uniform(0.5, 4.0),
        scale=scale,
        dof=d + rng.uniform(1.0, 5.0),
    )


def random_gaussian(rng, d, diag):
    if diag:
        cov = rng.uniform(0.2, 3.0, size=d)
    else:
        a = rng.standard_normal((d, d))
        cov = a @ a.T + d * np.eye(d)
    return expfam.GaussianParam(mean=rng.standard_normal(d), cov=cov)


def all_random_params(seed):
    rng = np.random.default_rng(seed)
    return [
        random_dirichlet(rng, 3),
        random_dirichlet(rng, 5),
        random_gaussian(rng, 1, diag=True),
        random_gaussian(rng, 3, diag=True),
        random_gaussian(rng, 2, diag=False),
        random_gaussian(rng, 3, diag=False),
        random_normal_wishart(rng, 1),
        random_normal_wishart(rng, 2),
        random_normal_wishart(rng, 3),
    ]


class TestLogPartition:
    def test_dirichlet_uniform_is_zero(self):
        """log B(1,1) = 0 exactly."""
        nat = expfam.to_natural_vector(expfam.DirichletParam(alpha=np.ones(2)))
        assert expfam.log_partition(nat) == pytest.approx(0.0, abs=1e-14)

    def test_standard_normal_1d(self):
        """A = 0.5 log(2 pi) for mean 0, variance 1."""
        nat = expfam.to_natural_vector(
            expfam.GaussianParam(mean=np.zeros(1), cov=np.ones(1))
        )
        assert expfam.log_partition(nat) == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_dirichlet_matches_log_beta(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            alpha = rng.uniform(0.3, 6.0, size=4)
            nat = expfam.to_natural_vector(expfam.DirichletParam(alpha=alpha))
            expect = np.sum(special.gammaln(alpha)) - special.gammaln(alpha.sum())
            assert expfam.log_partition(nat) == pytest.approx(expect, rel=1e-12)

    def test_normal_wishart_d1_matches_normal_gamma(self):
        """In one dimension the family is Normal-Gamma with shape nu/2, rate 1/(2 W).

        A_NG = lgamma(a) - a log b + 0.5 log(2 pi / kappa).
        """
        rng = np.random.default_rng(7)
        for _ in range(8):
            p = random_normal_wishart(rng, 1)
            a = p.dof / 2.0
            b = 1.0 / (2.0 * p.scale[0, 0])
            expect = special.gammaln(a) - a * np.log(b) + 0.5 * np.log(2 * np.pi / p.kappa)
            got = expfam.log_partition(expfam.to_natural_vector(p))
            assert got == pytest.approx(expect, rel=1e-12)

    def test_normal_wishart_normalizes_by_quadrature_d1(self):
        """exp(-A) integrates the unnormalized density to one (d = 1)."""
        p = expfam.NormalWishartParam(
            mean=np.array([0.4]), kappa=1.3, scale=np.array([[0.8]]), dof=3.5
        )
        nat = expfam.to_natural_vector(p)
        log_a = expfam.log_partition(nat)
        mus = np.linspace(-12, 12, 1201)
        lams = np.linspace(1e-6, 60, 3001)
        mm, ll = np.meshgrid(mus, lams, indexing="ij")
        # density in (mu, lam): exp(<eta, T>) with T = (lam mu, -lam mu^2/2, -lam/2, log(lam)/2)
        e1, e2, e3, e4 = nat.values[0], nat.values[1], nat.values[2], nat.values[3]
        logf = e1 * ll * mm - 0.5 * e2 * ll * mm**2 - 0.5 * e3 * ll + 0.5 * e4 * np.log(ll)
        total = np.trapezoid(np.trapezoid(np.exp(logf - log_a), lams, axis=1), mus)
        assert total == pytest.approx(1.0, abs=5e-4)


class TestMeanCoordinates:
    def test_dirichlet_uniform(self):
        """E[log pi] = (psi(1) - psi(2)) = -1 for alpha = (1, 1)."""
        nat = expfam.to_natural_vector(expfam.DirichletParam(alpha=np.ones(2)))
        mean = expfam.to_mean(nat)
        np.testing.assert_allclose(mean.values, [-1.0, -1.0], atol=1e-12)

    def test_gradient_of_log_partition(self):
        """Central differences of A recover the mean coordinates, every family."""
        for nat_src in all_random_params(5):
            nat = expfam.to_natural_vector(nat_src)
            mean = expfam.to_mean(nat)
            h = 1e-6
            for i in range(nat.values.size):
                up = nat.values.copy()
                dn = nat.values.copy()
                up[i] += h
                dn[i] -= h
                fd = (
                    expfam.log_partition(nat.replace_values(up))
                    - expfam.log_partition(nat.replace_values(dn))
                ) / (2 * h)
                assert fd == pytest.approx(mean.values[i], rel=2e-5, abs=2e-6), (
                    nat.family,
                    i,
                )

    def test_normal_wishart_moments_monte_carlo(self):
        """Mean coordinates match scipy-drawn Monte Carlo moments within 4 sigma."""
        rng = np.random.default_rng(21)
        p = expfam.NormalWishartParam(
            mean=np.array([0.5, -1.0]),
            kappa=2.0,
            scale=np.array([[1.0, 0.3], [0.3, 0.7]]),
            dof=5.0,
        )
        nat = expfam.to_natural_vector(p)
        mean = expfam.to_mean(nat)
        n = 200_000
        lam = stats.wishart.rvs(df=p.dof, scale=p.scale, size=n, random_state=rng)
        z = rng.standard_normal((n, 2))
        # mu | lam ~ N(m, inv(kappa lam)); draw via cholesky of the covariance
        cov = np.linalg.inv(p.kappa * lam)
        chol = np.linalg.cholesky(cov)
        mu = p.mean + np.einsum("nij,nj->ni", chol, z)
        t1 = np.einsum("nij,nj->ni", lam, mu)
        t2 = -0.5 * np.einsum("ni,nij,nj->n", mu, lam, mu)
        t3 = -0.5 * lam
        _, ld = np.linalg.slogdet(lam)
        t4 = 0.5 * ld
        d = 2
        got1, got2, got3, got4 = expfam.split_normal_wishart(mean.values, d)
        for est, got in [
            (t1.mean(0), got1),
            (np.array([t2.mean()]), got2),
            (t3.mean(0).ravel(), np.asarray(got3).ravel()),
            (np.array([t4.mean()]), got4),
        ]:
            se = 4.0 / np.sqrt(n)
            scalefree = np.maximum(1.0, np.abs(got))
            np.testing.assert_allclose(est, got, atol=float(np.max(scalefree)) * se * 4)


class TestRoundTrip:
    def test_natural_mean_natural(self):
        """from_mean(to_mean(eta)) = eta to 1e-10 relative on interior points."""
        for src in all_random_params(9):
            nat = expfam.to_natural_vector(src)
            back = expfam.from_mean(expfam.to_mean(nat))
            np.testing.assert_allclose(back.values, nat.values, rtol=1e-8, atol=1e-9)

    def test_standard_natural_standard(self):
        rng = np.random.default_rng(3)
        p = random_normal_wishart(rng, 2)
        q = expfam.to_standard(expfam.to_natural_vector(p))
        np.testing.assert_allclose(q.mean, p.mean, rtol=1e-12)
        np.testing.assert_allclose(q.kappa, p.kappa, rtol=1e-12)
        np.testing.assert_allclose(q.scale, p.scale, rtol=1e-10)
        np.testing.assert_allclose(q.dof, p.dof, rtol=1e-12)


class TestKl:
    def test_self_kl_zero(self):
        for src in all_random_params(13):
            nat = expfam.to_natural_vector(src)
            assert expfam.kl_divergence(nat, nat) == pytest.approx(0.0, abs=1e-10)

    def test_nonnegative(self):
        rng = np.random.default_rng(17)
        for d in (1, 2, 3):
            q = expfam.to_natural_vector(random_normal_wishart(rng, d))
            p = expfam.to_natural_vector(random_normal_wishart(rng, d))
            assert expfam.kl_divergence(q, p) > -1e-12

    def test_gaussian_closed_form(self):
        """Matches the textbook dense-Gaussian KL."""
        rng = np.random.default_rng(29)
        for _ in range(5):
            q = random_gaussian(rng, 3, diag=False)
            p = random_gaussian(rng, 3, diag=False)
            qn = expfam.to_natural_vector(q)
            pn = expfam.to_natural_vector(p)
            pi = np.linalg.inv(p.cov)
            diff = p.mean - q.mean
            expect = 0.5 * (
                np.trace(pi @ q.cov)
                + diff @ pi @ diff
                - 3
                + np.linalg.slogdet(p.cov)[1]
                - np.linalg.slogdet(q.cov)[1]
            )
            assert expfam.kl_divergence(qn, pn) == pytest.approx(expect, rel=1e-10)

    def test_dirichlet_closed_form(self):
        rng = np.random.default_rng(31)
        a = rng.uniform(0.5, 4.0, size=4)
        b = rng.uniform(0.5, 4.0, size=4)
        qn = expfam.to_natural_vector(expfam.DirichletParam(alpha=a))
        pn = expfam.to_natural_vector(expfam.DirichletParam(alpha=b))
        a0, b0 = a.sum(), b.sum()
        expect = (
            special.gammaln(a0)
            - np.sum(special.gammaln(a))
            - special.gammaln(b0)
            + np.sum(special.gammaln(b))
            + np.sum((a - b) * (special.digamma(a) - special.digamma(a0)))
        )
        assert expfam.kl_divergence(qn, pn) == pytest.approx(expect, rel=1e-10)


class TestSampling:
    def test_gaussian_tiny_variance_sticks_to_mean(self):
        rng = np.random.default_rng(41)
        p = expfam.GaussianParam(mean=np.array([2.0, -3.0]), cov=np.full(2, 1e-12))
        draw = expfam.sample(expfam.to_natural_vector(p), rng)
        assert np.max(np.abs(draw - p.mean)) < 1e-5

    def test_dirichlet_moments(self):
        rng = np.random.default_rng(43)
        alpha = np.array([2.0, 1.0, 4.0])
        nat = expfam.to_natural_vector(expfam.DirichletParam(alpha=alpha))
        draws = np.stack([expfam.sample(nat, rng) for _ in range(20000)])
        np.testing.assert_allclose(draws.mean(0), alpha / alpha.sum(), atol=0.01)
        assert np.all(draws > 0)
        np.testing.assert_allclose(draws.sum(1), 1.0, atol=1e-12)

    def test_normal_wishart_moments(self):
        """Sampled E[lam] ~ nu W and E[mu] ~ m within Monte Carlo error."""
        rng = np.random.default_rng(47)
        p = expfam.NormalWishartParam(
            mean=np.array([1.0, 2.0]),
            kappa=3.0,
            scale=np.array([[0.5, 0.1], [0.1, 0.4]]),
            dof=6.0,
        )
        nat = expfam.to_natural_vector(p)
        mus, lams = [], []
        for _ in range(20000):
            mu, lam = expfam.sample(nat, rng)
            mus.append(mu)
            lams.append(lam)
        np.testing.assert_allclose(np.mean(mus, axis=0), p.mean, atol=0.02)
        np.testing.assert_allclose(np.mean(lams, axis=0), p.dof * p.scale, rtol=0.03)


class TestConjugacy:
    def test_gaussian_obs_update_is_natural_addition(self):
        """Adding (sum x, n, sum xx^T, n) to the naturals gives the exact posterior."""
        rng = np.random.default_rng(53)
        d = 2
        prior = expfam.NormalWishartParam(
            mean=np.zeros(d), kappa=0.1, scale=np.eye(d), dof=d + 2.0
        )
        x = rng.standard_normal((40, d)) + np.array([1.0, -2.0])
        n = float(len(x))
        nat = expfam.to_natural_vector(prior)
        stats_vec = expfam.pack_normal_wishart(
            x.sum(0), np.array([n]), x.T @ x, np.array([n])
        )
        post = expfam.to_standard(nat.replace_values(nat.values + stats_vec))

        xbar = x.mean(0)
        kappa_n = prior.kappa + n
        m_n = (prior.kappa * prior.mean + n * xbar) / kappa_n
        nu_n = prior.dof + n
        s = (x - xbar).T @ (x - xbar)
        winv_n = (
            np.linalg.inv(prior.scale)
            + s
            + (prior.kappa * n / kappa_n) * np.outer(xbar - prior.mean, xbar - prior.mean)
        )
        np.testing.assert_allclose(post.kappa, kappa_n, rtol=1e-12)
        np.testing.assert_allclose(post.mean, m_n, rtol=1e-10)
        np.testing.assert_allclose(post.dof, nu_n, rtol=1e-12)
        np.testing.assert_allclose(np.linalg.inv(post.scale), winv_n, rtol=1e-9)


class TestDomainChecks:
    def test_dirichlet_rejects_nonpositive_alpha(self):
        with pytest.raises(InvalidParameterError):
            expfam.to_natural_vector(expfam.DirichletParam(alpha=np.array([1.0, 0.0])))

    def test_gaussian_rejects_non_spd(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(InvalidParameterError):
            expfam.to_natural_vector(expfam.GaussianParam(mean=np.zeros(2), cov=bad))

    def test_natural_domain_validation(self):
        nat = expfam.to_natural_vector(expfam.DirichletParam(alpha=np.array([2.0, 3.0])))
        bad = nat.replace_values(np.array([-1.5, 1.0]))
        assert not expfam.in_natural_domain(bad)
        assert expfam.in_natural_domain(nat)


class TestSpecialFunctions:
    """The gamma-family special functions the module leans on."""

    def test_digamma_recurrence(self):
        x = np.geomspace(1e-3, 1e6, 400)
        lhs = special.digamma(x + 1.0)
        rhs = special.digamma(x) + 1.0 / x
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_gammaln_recurrence(self):
        x = np.geomspace(1e-3, 1e6, 400)
        np.testing.assert_allclose(
            special.gammaln(x + 1.0), special.gammaln(x) + np.log(x), rtol=1e-12, atol=1e-12
        )

    def test_digamma_reflection(self):
        x = np.linspace(0.05, 0.95, 19)
        lhs = special.digamma(1.0 - x) - special.digamma(x)
        rhs = np.pi / np.tan(np.pi * x)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)
