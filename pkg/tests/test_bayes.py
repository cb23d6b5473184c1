import numpy as np
import pytest
from abreg import bayes
from abreg.bayes import (FlatPrior, HorseshoePrior, LaplacePrior, McmcConfig,
                         NormalLikelihood, PosteriorDraws, draw_beta_conditional, draw_hs_gamma,
                         draw_hs_lambda2, draw_hs_local, draw_hs_xi, draw_laplace_lambda2,
                         draw_laplace_local, gibbs_step_horseshoe, gibbs_step_laplace,
                         run_chain, run_posterior, sample_beta_flat, sample_ybar, summarize)
from abreg.errors import ConfigError, DataError, NumericalError
from abreg.regfit import Lasso, cv_select_lambda, fit_penalized, fit_wls
from abreg.survey import (AuxTotals, DesignSpec, FinitePopulation, draw_sample, greg_mean,
                          variance_e)

from conftest import linear_population, make_sample

M = 100_000


def _within(sample_values, target, k=3.0):
    se = sample_values.std(ddof=1) / np.sqrt(sample_values.size)
    return abs(sample_values.mean() - target) <= k * se


# -- flat prior -------------------------------------------------------------

def test_flat_draw_moments():
    lik = NormalLikelihood([2.0], [[0.25]])
    d = sample_beta_flat(lik, np.random.default_rng(0), size=M)[:, 0]
    assert abs(d.mean() - 2) <= 0.005
    assert abs(d.var() - 0.25) <= 0.01


def test_flat_draw_multivariate_moments():
    V = np.array([[1.0, 0.3, 0.0], [0.3, 0.5, -0.1], [0.0, -0.1, 0.2]])
    lik = NormalLikelihood([1.0, -1.0, 0.5], V)
    d = sample_beta_flat(lik, np.random.default_rng(1), size=M)
    for j in range(3):
        assert _within(d[:, j], lik.beta_hat[j])
    np.testing.assert_allclose(np.cov(d.T), V, atol=4 * np.sqrt(2 / M) * 1.0)


def test_flat_degenerate_covariance_is_jittered():
    lik = NormalLikelihood([1.0, 2.0], np.zeros((2, 2)))
    assert lik.jitter > 0
    d = sample_beta_flat(lik, np.random.default_rng(2), size=1000)
    assert np.max(np.abs(d - [1.0, 2.0])) < 10 * np.sqrt(lik.jitter)


def test_flat_draw_deterministic():
    lik = NormalLikelihood([0.0, 1.0], np.eye(2))
    assert np.array_equal(sample_beta_flat(lik, 5), sample_beta_flat(lik, 5))


def test_stabilized_cov_rule():
    V = np.diag([1.0, 1e-14])
    Vs, j = bayes.stabilized_cov(V)
    assert j == pytest.approx(1e-8 * np.trace(V) / 2)
    Vs, j = bayes.stabilized_cov(np.eye(2))
    assert j == 0.0


# -- Laplace full conditionals ----------------------------------------------

def test_beta_conditional_conjugate_normal():
    lik = NormalLikelihood([1.5], [[0.4]])
    tau2 = 0.3
    rng = np.random.default_rng(3)
    d = np.array([draw_beta_conditional(lik, [tau2], rng)[0] for _ in range(M)])
    prec = 1 / 0.4 + 1 / tau2
    assert _within(d, (1.5 / 0.4) / prec)
    assert d.var() == pytest.approx(1 / prec, rel=0.02)


def test_lambda2_conditional_gamma():
    rng = np.random.default_rng(4)
    d = np.array([draw_laplace_lambda2(rng, LaplacePrior(1.0, 1.0), [1.0, 3.0]) for _ in range(M)])
    # Gamma(3, rate 3): mean 1, variance 1/3
    assert _within(d, 1.0)
    assert d.var() == pytest.approx(1 / 3, rel=0.03)


def test_laplace_local_conditional_inverse_gaussian():
    rng = np.random.default_rng(5)
    beta = np.full(M, 0.8)
    lam2 = 2.5
    inv = 1 / draw_laplace_local(rng, beta, lam2)
    mu = np.sqrt(lam2) / 0.8
    assert _within(inv, mu)
    assert inv.var() == pytest.approx(mu**3 / lam2, rel=0.03)


def test_laplace_local_floor_for_zero_beta():
    tau2 = draw_laplace_local(np.random.default_rng(6), np.zeros(10), 1.0)
    assert np.all(np.isfinite(tau2)) and np.all(tau2 > 0)


# -- horseshoe full conditionals --------------------------------------------

def test_hs_local_conditional_median():
    # xi = 1, beta = 0: InvGamma(1, 1), median 1 / ln 2
    d = draw_hs_local(np.random.default_rng(7), np.zeros(M), 3.0, np.ones(M))
    assert np.median(d) == pytest.approx(1 / np.log(2), rel=0.02)


def test_hs_local_conditional_reciprocal_mean():
    rng = np.random.default_rng(8)
    beta, lam2, xi = 1.2, 0.7, 2.0
    rate = 1 / xi + beta**2 / (2 * lam2)
    d = 1 / draw_hs_local(rng, np.full(M, beta), lam2, np.full(M, xi))
    assert _within(d, 1 / rate)


def test_hs_xi_conditional():
    u2 = 0.5
    d = 1 / draw_hs_xi(np.random.default_rng(9), np.full(M, u2))
    assert _within(d, 1 / (1 + 1 / u2))


def test_hs_lambda2_and_gamma_conditionals():
    rng = np.random.default_rng(10)
    beta = np.array([0.5, -1.0, 2.0])
    u2 = np.array([1.0, 0.5, 4.0])
    g = 1.5
    rate = 1 / g + 0.5 * np.sum(beta**2 / u2)
    d = np.array([1 / draw_hs_lambda2(rng, beta, u2, g) for _ in range(M)])
    assert _within(d, 2.0 / rate)  # shape (3 + 1) / 2
    e = np.array([1 / draw_hs_gamma(rng, 0.8) for _ in range(M)])
    assert _within(e, 1 / (1 + 1 / 0.8))


def test_gibbs_trajectories_are_deterministic():
    lik = NormalLikelihood([0.5, -0.2], np.diag([0.1, 0.2]))
    for prior in (LaplacePrior(2.0, 1.0), HorseshoePrior()):
        a = run_chain(lik, prior, 50, 10, 1, np.random.default_rng(11))
        b = run_chain(lik, prior, 50, 10, 1, np.random.default_rng(11))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_gibbs_steps_keep_scales_positive():
    lik = NormalLikelihood([3.0, 0.0, -1e-13], np.diag([1e-4, 1.0, 1e-6]))
    rng = np.random.default_rng(12)
    s = bayes.initial_state(lik, LaplacePrior(1.0, 1.0))
    h = bayes.initial_state(lik, HorseshoePrior())
    for _ in range(500):
        s = gibbs_step_laplace(s, lik, LaplacePrior(1.0, 1.0), rng)
        h = gibbs_step_horseshoe(h, lik, rng)
        for st in (s, h):
            assert st.lambda2 > 0 and np.all(st.local > 0) and np.all(np.isfinite(st.beta))
        assert np.all(h.xi > 0) and h.gamma_aux > 0


def test_prior_validation():
    with pytest.raises(ConfigError):
        LaplacePrior(a=0.0)
    with pytest.raises(ConfigError):
        LaplacePrior(b=-1.0)
    with pytest.raises(ConfigError):
        bayes.initial_state(NormalLikelihood([0.0], [[1.0]]), FlatPrior())


# -- drawing the mean -------------------------------------------------------

def test_sample_ybar_zero_residuals():
    x = np.array([[1.0], [2.0], [4.0], [5.0]])
    s = make_sample(1 + 2 * x[:, 0], x, N=20)
    aux = AuxTotals([3.0])
    assert sample_ybar(s, aux, [2.0], 0) == greg_mean(s, aux, [2.0])


def test_sample_ybar_moments_and_determinism(srs_sample):
    pop, s = srs_sample
    aux = AuxTotals.from_population(pop)
    b = fit_wls(s).beta1
    rng = np.random.default_rng(13)
    d = np.array([sample_ybar(s, aux, b, rng) for _ in range(20_000)])
    assert _within(d, greg_mean(s, aux, b))
    assert d.var() == pytest.approx(variance_e(s, b), rel=0.04)
    assert sample_ybar(s, aux, b, 9) == sample_ybar(s, aux, b, 9)


def test_run_posterior_shapes(srs_sample):
    pop, s = srs_sample
    aux = AuxTotals.from_population(pop)
    for prior in (FlatPrior(), LaplacePrior(), HorseshoePrior()):
        d = run_posterior(s, aux, prior, McmcConfig(1, 0, 0))
        assert d.beta_draws.shape == (1, pop.p)
        assert d.lambda_draws.shape == (1,) and d.ybar_draws.shape == (1,)


def test_run_posterior_bitwise_deterministic(srs_sample):
    pop, s = srs_sample
    aux = AuxTotals.from_population(pop)
    for prior in (FlatPrior(), LaplacePrior(3.0, 1.0), HorseshoePrior()):
        a = run_posterior(s, aux, prior, McmcConfig(200, 20, 7))
        b = run_posterior(s, aux, prior, McmcConfig(200, 20, 7))
        for f in ("beta_draws", "lambda_draws", "ybar_draws"):
            assert np.array_equal(getattr(a, f), getattr(b, f))


def test_flat_posterior_matches_greg_at_large_n():
    pop = linear_population(20_000, p=5, seed=21)
    s = draw_sample(pop, DesignSpec.srs(2000), 3)
    aux = AuxTotals.from_population(pop)
    fit = fit_wls(s)
    d = run_posterior(s, aux, FlatPrior(), McmcConfig(5000, 0, 1), fit=fit)
    sd = np.sqrt(variance_e(s, fit.beta1))
    assert abs(d.ybar_draws.mean() - greg_mean(s, aux, fit.beta1)) <= 0.5 * sd
    assert d.ybar_draws.std() == pytest.approx(sd, rel=0.10)


def test_laplace_posterior_is_no_wider_on_noise():
    narrower = 0
    for r in range(50):
        rng = np.random.default_rng(300 + r)
        N = 3000
        X = rng.normal(1.0, 1.0, size=(N, 8))
        pop = FinitePopulation(2.0 + rng.normal(size=N), X)
        s = draw_sample(pop, DesignSpec.srs(150), r)
        aux = AuxTotals.from_population(pop)
        fit = fit_wls(s)
        prior = bayes.laplace_prior_from_cv(s, fit, cv_select_lambda(s, "lasso", seed=r))
        cfg = McmcConfig(1000, 100, r)
        lap = run_posterior(s, aux, prior, cfg, fit=fit).ybar_draws.std()
        flat = run_posterior(s, aux, FlatPrior(), cfg, fit=fit).ybar_draws.std()
        narrower += lap <= flat
    assert narrower >= 45


def test_laplace_posterior_near_penalized_greg():
    pop = linear_population(20_000, p=5, seed=22)
    s = draw_sample(pop, DesignSpec.srs(2000), 4)
    aux = AuxTotals.from_population(pop)
    fit = fit_wls(s)
    d = run_posterior(s, aux, LaplacePrior(4.0, 1.0), McmcConfig(3000, 300, 2), fit=fit)
    gram, scales = bayes.weighted_gram(s)
    lam_pen = bayes.penalty_from_prior_lambda(np.median(d.lambda_draws), gram, fit.v11, scales)
    b_r = fit_penalized(s, Lasso(lam_pen)).beta1
    assert abs(d.ybar_draws.mean() - greg_mean(s, aux, b_r)) <= d.ybar_draws.std()


def test_penalty_prior_conversion_round_trip():
    rng = np.random.default_rng(14)
    A = rng.normal(size=(4, 4))
    gram = A @ A.T + np.eye(4)
    v11 = np.linalg.inv(gram) * 3.0
    lam = bayes.prior_lambda_from_penalty(12.0, gram, v11, np.array([1.0, 2.0, 0.5, 1.5]))
    assert bayes.curvature_ratio(gram, v11) == pytest.approx(3.0)  # gram = 3 inv(v11)
    assert bayes.penalty_from_prior_lambda(lam, gram, v11, np.array([1.0, 2.0, 0.5, 1.5])) \
        == pytest.approx(12.0)


# -- domains ----------------------------------------------------------------

def test_domain_posterior_flat():
    rng = np.random.default_rng(15)
    N = 3000
    X = rng.normal(size=(N, 2))
    dom = rng.integers(0, 3, N)
    y = np.array([0.0, 1.0, -1.0])[dom] + X @ [1.0, 0.5] + rng.normal(size=N)
    pop = FinitePopulation(y, X, domain=dom)
    s = draw_sample(pop, DesignSpec.srs(600), 1)
    aux = {h: AuxTotals(X[dom == h].mean(axis=0), None, int((dom == h).sum())) for h in range(3)}
    out = bayes.run_posterior_domains(s, aux, FlatPrior(), McmcConfig(2000, 0, 3))
    assert set(out) == {0, 1, 2}
    for h, d in out.items():
        truth = y[dom == h].mean()
        point, lo, hi = summarize(d)
        assert abs(point - truth) < 4 * d.ybar_draws.std()
        assert lo < point < hi
    with pytest.raises(DataError):
        bayes.run_posterior_domains(s, {0: aux[0]}, FlatPrior(), McmcConfig(10, 0, 3))


# -- summaries --------------------------------------------------------------

def test_summarize_constant():
    assert summarize(np.full(200, 1.25)) == (1.25, 1.25, 1.25)


def test_summarize_order_statistics():
    point, lo, hi = summarize(np.arange(1.0, 101.0), 0.95)
    # linear rule: h = (n - 1) q; x[floor h] + frac(h) * gap
    assert point == 50.5
    assert lo == pytest.approx(3.475, abs=1e-12)
    assert hi == pytest.approx(97.525, abs=1e-12)


def test_summarize_symmetric_draws():
    d = np.random.default_rng(16).standard_normal(50_000)
    _, lo, hi = summarize(np.concatenate([d, -d]))
    assert abs(lo + hi) < 1e-12


def test_summarize_errors():
    with pytest.raises(DataError):
        summarize(np.ones(99))
    with pytest.raises(ConfigError):
        summarize(np.ones(200), level=1.0)


def test_posterior_draws_reject_nonfinite():
    with pytest.raises(NumericalError):
        PosteriorDraws(np.zeros((2, 1)), np.zeros(2), np.array([0.0, np.nan]), McmcConfig(2, 0))
    with pytest.raises(NumericalError):
        PosteriorDraws(np.zeros((3, 1)), np.zeros(2), np.zeros(2), McmcConfig(2, 0))
