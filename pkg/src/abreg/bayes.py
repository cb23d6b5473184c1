"""Approximate Bayesian regression estimation of a population mean.

The slopes get a posterior built from the normal approximation
``beta_hat ~ N(beta, V)`` of the design-weighted estimator, under a flat,
Laplace or horseshoe prior. Given a slope draw, the mean is drawn from
``N(greg_mean(beta), variance_e(beta))``. Shrinkage priors are handled by
Gibbs sampling on their normal scale-mixture representations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
from scipy import linalg

from .errors import ConfigError, DataError, NumericalError
from .regfit import RegressionFit, fit_wls
from .survey import (AuxTotals, ResidualConvention, Sample, domain_greg, greg_mean,
                     greg_mean_rows, variance_e, variance_e_rows)

BETA_FLOOR = 1e-12
_SCALE_MIN, _SCALE_MAX = 1e-100, 1e100
_RATE_MAX = 1e300


@dataclass(frozen=True)
class FlatPrior:
    kind = "flat"


@dataclass(frozen=True)
class LaplacePrior:
    """Laplace prior with a Gamma(a, rate b) hyperprior on lambda^2.

    ``fixed_lambda2`` pins lambda^2 (degenerate hyperprior).
    """

    a: float = 1.0
    b: float = 1.0
    fixed_lambda2: Optional[float] = None
    kind = "laplace"

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ConfigError("Laplace hyperparameters a and b must be positive")
        if self.fixed_lambda2 is not None and not self.fixed_lambda2 > 0:
            raise ConfigError("fixed lambda^2 must be positive")


@dataclass(frozen=True)
class HorseshoePrior:
    """Horseshoe prior; the global scale has a half-Cauchy prior unless fixed."""

    fixed_lambda2: Optional[float] = None
    kind = "horseshoe"


PriorSpec = Union[FlatPrior, LaplacePrior, HorseshoePrior]


@dataclass(frozen=True)
class McmcConfig:
    n_draws: int = 2000
    burn_in: int = 200
    seed: int = 0
    thin: int = 1

    def __post_init__(self):
        if self.n_draws < 1 or self.burn_in < 0 or self.thin < 1:
            raise ConfigError("need n_draws >= 1, burn_in >= 0 and thin >= 1")


@dataclass(eq=False)
class McmcState:
    beta: np.ndarray
    lambda2: float
    local: np.ndarray  # tau^2 (Laplace) or u^2 (horseshoe), penalized coordinates only
    xi: Optional[np.ndarray] = None
    gamma_aux: Optional[float] = None

    def copy(self) -> "McmcState":
        return McmcState(self.beta.copy(), self.lambda2, self.local.copy(),
                         None if self.xi is None else self.xi.copy(), self.gamma_aux)


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    beta_draws: np.ndarray
    lambda_draws: np.ndarray
    ybar_draws: np.ndarray
    config: McmcConfig

    def __post_init__(self):
        m = self.ybar_draws.shape[0]
        if self.beta_draws.shape[0] != m or self.lambda_draws.shape[0] != m:
            raise NumericalError("posterior draw arrays have inconsistent lengths")
        for arr in (self.beta_draws, self.lambda_draws, self.ybar_draws):
            if not np.all(np.isfinite(arr)):
                raise NumericalError("non-finite posterior draw")


# --------------------------------------------------------------------------
# Normal approximate likelihood


def stabilized_cov(V: np.ndarray):
    """Add ``1e-8 * trace/p`` to the diagonal when V is near singular."""
    V = 0.5 * (np.asarray(V, dtype=float) + np.asarray(V, dtype=float).T)
    p = V.shape[0]
    scale = np.trace(V) / p if p else 1.0
    if not scale > 0:
        scale = 1.0
    ev = np.linalg.eigvalsh(V)
    if ev[0] < 1e-10 * scale:
        return V + 1e-8 * scale * np.eye(p), 1e-8 * scale
    return V, 0.0


@dataclass(eq=False)
class NormalLikelihood:
    """``beta_hat ~ N(beta, V)`` with precomputed precision.

    ``penalized`` marks the coordinates a shrinkage prior acts on; the rest
    get a flat prior.
    """

    beta_hat: np.ndarray
    V: np.ndarray
    penalized: Optional[np.ndarray] = None

    def __post_init__(self):
        self.beta_hat = np.atleast_1d(np.asarray(self.beta_hat, dtype=float))
        self.V, self.jitter = stabilized_cov(np.atleast_2d(self.V))
        try:
            self.chol_V = np.linalg.cholesky(self.V)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance factorization failed after jitter") from exc
        self.precision = linalg.cho_solve((self.chol_V, True), np.eye(self.V.shape[0]))
        self.precision = 0.5 * (self.precision + self.precision.T)
        self.pb = self.precision @ self.beta_hat
        if self.penalized is None:
            self.penalized = np.ones(self.beta_hat.size, dtype=bool)
        self.penalized = np.asarray(self.penalized, dtype=bool)

    @classmethod
    def from_fit(cls, fit: RegressionFit) -> "NormalLikelihood":
        return cls(fit.beta1, fit.v11)

    @property
    def q(self) -> int:
        return int(self.penalized.sum())


def _as_lik(obj) -> NormalLikelihood:
    return obj if isinstance(obj, NormalLikelihood) else NormalLikelihood.from_fit(obj)


def sample_beta_flat(fit, rng, size: Optional[int] = None) -> np.ndarray:
    """Draw(s) from ``N(beta_hat, V)``, the flat-prior posterior."""
    lik = _as_lik(fit)
    rng = np.random.default_rng(rng)
    k = lik.beta_hat.size
    if size is None:
        return lik.beta_hat + lik.chol_V @ rng.standard_normal(k)
    return lik.beta_hat + rng.standard_normal((size, k)) @ lik.chol_V.T


def _draw_beta(lik: NormalLikelihood, prior_var: np.ndarray, rng) -> np.ndarray:
    """Conditional draw given prior variances of the penalized coordinates."""
    A = lik.precision.copy()
    idx = np.flatnonzero(lik.penalized)
    A[idx, idx] += 1.0 / prior_var
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("conditional precision is not positive definite") from exc
    mean = linalg.cho_solve((L, True), lik.pb)
    z = rng.standard_normal(lik.beta_hat.size)
    return mean + linalg.solve_triangular(L, z, lower=True, trans="T")


def _inv_gamma(rng, shape, rate):
    rate = np.minimum(rate, _RATE_MAX)
    return rate / rng.gamma(shape, 1.0, size=np.shape(rate))


def _floored_sq(beta):
    return np.maximum(beta**2, BETA_FLOOR**2)


def draw_laplace_local(rng, beta, lambda2) -> np.ndarray:
    """tau^2 given (beta, lambda^2): 1/tau^2 is inverse Gaussian with mean
    sqrt(lambda^2 / beta^2) and shape lambda^2."""
    b2 = _floored_sq(np.asarray(beta, dtype=float))
    inv_tau2 = rng.wald(np.sqrt(lambda2 / b2), lambda2)
    with np.errstate(divide="ignore"):  # a draw can underflow to 0 at the beta floor
        return np.clip(1.0 / inv_tau2, _SCALE_MIN, _SCALE_MAX)


def draw_laplace_lambda2(rng, prior: LaplacePrior, tau2) -> float:
    """lambda^2 given tau^2: Gamma(a + q, rate b + sum(tau^2)/2)."""
    tau2 = np.asarray(tau2, dtype=float)
    lam2 = rng.gamma(prior.a + tau2.size, 1.0 / (prior.b + 0.5 * tau2.sum()))
    return float(np.clip(lam2, _SCALE_MIN, _SCALE_MAX))


def draw_hs_local(rng, beta, lambda2, xi) -> np.ndarray:
    """u^2 given (beta, lambda^2, xi): InvGamma(1, 1/xi + beta^2 / (2 lambda^2))."""
    b2 = _floored_sq(np.asarray(beta, dtype=float))
    return np.clip(_inv_gamma(rng, 1.0, 1.0 / xi + b2 / (2.0 * lambda2)), _SCALE_MIN, _SCALE_MAX)


def draw_hs_xi(rng, u2) -> np.ndarray:
    """xi given u^2: InvGamma(1, 1 + 1/u^2)."""
    return np.clip(_inv_gamma(rng, 1.0, 1.0 + 1.0 / np.asarray(u2)), _SCALE_MIN, _SCALE_MAX)


def draw_hs_lambda2(rng, beta, u2, gamma_aux) -> float:
    """lambda^2 given (beta, u^2, gamma): InvGamma((q+1)/2, 1/gamma + sum(beta^2/u^2)/2)."""
    b2 = _floored_sq(np.asarray(beta, dtype=float))
    lam2 = _inv_gamma(rng, 0.5 * (b2.size + 1), 1.0 / gamma_aux + 0.5 * np.sum(b2 / u2))
    return float(np.clip(lam2, _SCALE_MIN, _SCALE_MAX))


def draw_hs_gamma(rng, lambda2) -> float:
    """gamma given lambda^2: InvGamma(1, 1 + 1/lambda^2)."""
    return float(np.clip(_inv_gamma(rng, 1.0, 1.0 + 1.0 / lambda2), _SCALE_MIN, _SCALE_MAX))


def draw_beta_conditional(fit, prior_var, rng) -> np.ndarray:
    """beta given the prior variances of the penalized coordinates."""
    return _draw_beta(_as_lik(fit), np.asarray(prior_var, dtype=float), np.random.default_rng(rng))


def gibbs_step_laplace(state: McmcState, fit, prior: LaplacePrior, rng) -> McmcState:
    """One sweep over (beta, tau^2, lambda^2)."""
    lik = _as_lik(fit)
    rng = np.random.default_rng(rng)
    beta = _draw_beta(lik, state.local, rng)
    lam2 = state.lambda2
    tau2 = draw_laplace_local(rng, beta[lik.penalized], lam2)
    if prior.fixed_lambda2 is None:
        lam2 = draw_laplace_lambda2(rng, prior, tau2)
    return McmcState(beta, lam2, tau2)


def gibbs_step_horseshoe(state: McmcState, fit, rng, prior: Optional[HorseshoePrior] = None
                         ) -> McmcState:
    """One sweep over (beta, u^2, xi, lambda^2, gamma)."""
    prior = prior or HorseshoePrior()
    lik = _as_lik(fit)
    rng = np.random.default_rng(rng)
    lam2 = state.lambda2
    beta = _draw_beta(lik, np.clip(lam2 * state.local, _SCALE_MIN, _SCALE_MAX), rng)
    bp = beta[lik.penalized]
    u2 = draw_hs_local(rng, bp, lam2, state.xi)
    xi = draw_hs_xi(rng, u2)
    gam = state.gamma_aux
    if prior.fixed_lambda2 is None:
        lam2 = draw_hs_lambda2(rng, bp, u2, gam)
        gam = draw_hs_gamma(rng, lam2)
    return McmcState(beta, lam2, u2, xi, gam)


def initial_state(lik: NormalLikelihood, prior: PriorSpec) -> McmcState:
    q = lik.q
    if isinstance(prior, LaplacePrior):
        lam2 = prior.fixed_lambda2 if prior.fixed_lambda2 is not None else prior.a / prior.b
        return McmcState(lik.beta_hat.copy(), float(lam2), np.ones(q))
    if isinstance(prior, HorseshoePrior):
        lam2 = prior.fixed_lambda2 if prior.fixed_lambda2 is not None else 1.0
        return McmcState(lik.beta_hat.copy(), float(lam2), np.ones(q), np.ones(q), 1.0)
    raise ConfigError(f"no Gibbs sampler for prior {prior!r}")


def run_chain(lik: NormalLikelihood, prior: PriorSpec, n_draws: int, burn_in: int = 0,
              thin: int = 1, rng=None, state: Optional[McmcState] = None):
    """Retained (beta, lambda) draws; flat priors give i.i.d. draws."""
    rng = np.random.default_rng(rng)
    if isinstance(prior, FlatPrior):
        return sample_beta_flat(lik, rng, size=n_draws), np.zeros(n_draws)
    state = state or initial_state(lik, prior)
    if isinstance(prior, LaplacePrior):
        step = lambda s: gibbs_step_laplace(s, lik, prior, rng)
    else:
        step = lambda s: gibbs_step_horseshoe(s, lik, rng, prior)
    betas = np.empty((n_draws, lik.beta_hat.size))
    lams = np.empty(n_draws)
    for _ in range(burn_in):
        state = step(state)
    for t in range(n_draws):
        for _ in range(thin):
            state = step(state)
        betas[t] = state.beta
        lams[t] = np.sqrt(state.lambda2)
    return betas, lams


# --------------------------------------------------------------------------
# Drawing the population mean


def sample_ybar(sample: Sample, aux: AuxTotals, beta1, rng,
                convention: ResidualConvention = "absorbed") -> float:
    rng = np.random.default_rng(rng)
    mean = greg_mean(sample, aux, beta1)
    var = variance_e(sample, beta1, convention)
    if var < 0:
        raise NumericalError("negative variance estimate")
    return float(mean + np.sqrt(var) * rng.standard_normal())


def _ybar_rows(sample, aux, B, rng, convention):
    mean = greg_mean_rows(sample, aux, B)
    var = variance_e_rows(sample, B, convention)
    return mean + np.sqrt(var) * rng.standard_normal(B.shape[0])


def run_posterior(sample: Sample, aux: AuxTotals, prior: PriorSpec, config: McmcConfig,
                  fit: Optional[RegressionFit] = None,
                  convention: ResidualConvention = "absorbed") -> PosteriorDraws:
    """Two-step sampler: slopes from their approximate posterior, then the mean."""
    aux.check(sample)
    fit = fit or fit_wls(sample)
    lik = NormalLikelihood.from_fit(fit)
    beta_ss, ybar_ss = np.random.SeedSequence(config.seed).spawn(2)
    betas, lams = run_chain(lik, prior, config.n_draws, config.burn_in, config.thin,
                            np.random.default_rng(beta_ss))
    ybar = _ybar_rows(sample, aux, betas, np.random.default_rng(ybar_ss), convention)
    return PosteriorDraws(betas, lams, ybar, config)


def run_posterior_domains(sample: Sample, domain_aux: dict, prior: PriorSpec,
                          config: McmcConfig) -> dict:
    """Posterior of every domain mean under a common-slope working model.

    Each domain gets its own intercept (unpenalized); shrinkage priors act on
    the shared slopes. ``domain_aux`` maps a domain label to its auxiliary
    means and population size. Returns one :class:`PosteriorDraws` per domain;
    they share the slope draws.
    """
    if sample.domain is None:
        raise DataError("sample carries no domain labels")
    labels = sorted(domain_aux)
    missing = set(np.unique(sample.domain)) - set(labels)
    if missing:
        raise DataError(f"no auxiliary totals for sampled domains {sorted(missing)}")
    # dummies for all but the first domain; the global intercept absorbs it
    D = np.column_stack([(sample.domain == h).astype(float) for h in labels[1:]]) \
        if len(labels) > 1 else np.empty((sample.n, 0))
    H = D.shape[1]
    fit = fit_wls(replace(sample, x=np.column_stack([D, sample.x])))
    mask = np.ones(fit.coef.size, dtype=bool)
    mask[:H + 1] = False
    lik = NormalLikelihood(fit.coef, fit.vbeta, penalized=mask)
    beta_ss, ybar_ss = np.random.SeedSequence(config.seed).spawn(2)
    betas, lams = run_chain(lik, prior, config.n_draws, config.burn_in, config.thin,
                            np.random.default_rng(beta_ss))
    rng = np.random.default_rng(ybar_ss)
    out = {}
    for k, h in enumerate(labels):
        b0 = betas[:, 0] + (betas[:, k] if k > 0 else 0.0)
        draws = np.empty(betas.shape[0])
        for t in range(betas.shape[0]):
            est, var = domain_greg(sample, h, domain_aux[h], b0[t], betas[t, H + 1:])
            draws[t] = est + np.sqrt(var) * rng.standard_normal()
        out[h] = PosteriorDraws(betas, lams, draws, config)
    return out


def summarize(draws, level: float = 0.95):
    """Posterior mean and equal-tailed interval (linear interpolation of order statistics)."""
    if not 0 < level < 1:
        raise ConfigError("credible level must lie in (0, 1)")
    y = draws.ybar_draws if isinstance(draws, PosteriorDraws) else np.asarray(draws, float)
    if y.size < 100:
        raise DataError(f"need at least 100 draws for an interval, got {y.size}")
    alpha = 1.0 - level
    lo, hi = np.quantile(y, [alpha / 2, 1 - alpha / 2], method="linear")
    return float(y.mean()), float(lo), float(hi)


# --------------------------------------------------------------------------
# Penalty <-> prior scale


def curvature_ratio(gram: np.ndarray, v11: np.ndarray) -> float:
    """``kappa`` with ``gram ~ kappa * inv(v11)``: loss curvature per unit of likelihood curvature."""
    p = gram.shape[0]
    return float(np.trace(gram @ v11) / p)


def prior_lambda_from_penalty(lam_pen: float, gram, v11, scales=None) -> float:
    """Laplace rate matching the penalty ``lam_pen * sum|b_j * s_j|`` on the weighted loss.

    The loss behaves like ``kappa`` times the normal log-likelihood kernel,
    and a Laplace(lambda) prior adds ``2 * lambda * sum|b|`` to minus twice
    the log posterior, so ``lambda = lam_pen * mean(s) / (2 kappa)``.
    """
    s = 1.0 if scales is None else float(np.mean(scales))
    return lam_pen * s / (2.0 * curvature_ratio(np.asarray(gram), np.asarray(v11)))


def penalty_from_prior_lambda(lam_prior: float, gram, v11, scales=None) -> float:
    s = 1.0 if scales is None else float(np.mean(scales))
    return 2.0 * curvature_ratio(np.asarray(gram), np.asarray(v11)) * lam_prior / s


def weighted_gram(sample: Sample, weights=None):
    """Centred weighted Gram matrix of the auxiliaries and the weighted sd scales."""
    w = 1.0 / sample.pi if weights is None else np.asarray(weights, dtype=float)
    xbar = w @ sample.x / w.sum()
    Xc = sample.x - xbar
    gram = (Xc * w[:, None]).T @ Xc
    scales = np.sqrt(np.diag(gram) / w.sum())
    return gram, scales


def laplace_prior_from_cv(sample: Sample, fit: RegressionFit, lam_cv: float,
                          b: float = 1.0) -> LaplacePrior:
    """Gamma(lambda*^2, b) hyperprior centred on the cross-validated penalty."""
    gram, scales = weighted_gram(sample)
    lam = prior_lambda_from_penalty(lam_cv, gram, fit.v11, scales)
    return LaplacePrior(a=max(lam**2, 1e-8), b=b)
