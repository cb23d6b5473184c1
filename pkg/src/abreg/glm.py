"""Nonlinear model-assisted estimation with a GLM working model.

The coefficient vector always includes the intercept first. The working
model supplies the mean ``m(eta)``, its derivative and the variance
function ``a(m)``; the estimating-equation weight is
``h = (dm/deta) / a(m) * z`` for the design row ``z = (1, x)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, logit

from .bayes import (McmcConfig, NormalLikelihood, PosteriorDraws,
                    PriorSpec, prior_lambda_from_penalty, run_chain)
from .errors import ConvergenceError, DataError, NumericalError, SeparationError
from .regfit import (ENET_MIX, PenaltySpec, _fold_ids, _penalty_arrays, _solve_prepared,
                     _Prepared, make_penalty)
from .survey import Sample, design_quadratic, design_quadratic_rows

PROB_EPS = 1e-12


class WorkingModel:
    name = "base"

    def mean(self, eta):
        raise NotImplementedError

    def dmean(self, eta):
        raise NotImplementedError

    def variance(self, m):
        raise NotImplementedError

    def link(self, m):
        raise NotImplementedError

    def clamp_count(self, eta) -> int:
        return 0


class Logistic(WorkingModel):
    """Bernoulli mean with logit link; probabilities clamped to (eps, 1-eps)."""

    name = "logistic"

    def mean(self, eta):
        return np.clip(expit(eta), PROB_EPS, 1 - PROB_EPS)

    def dmean(self, eta):
        m = self.mean(eta)
        return m * (1 - m)

    def variance(self, m):
        return m * (1 - m)

    def link(self, m):
        return logit(np.clip(m, PROB_EPS, 1 - PROB_EPS))

    def clamp_count(self, eta) -> int:
        raw = expit(eta)
        return int(np.sum((raw < PROB_EPS) | (raw > 1 - PROB_EPS)))


class Identity(WorkingModel):
    """Linear mean; reduces everything here to the linear regression estimator."""

    name = "identity"

    def mean(self, eta):
        return np.asarray(eta, dtype=float)

    def dmean(self, eta):
        return np.ones_like(np.asarray(eta, dtype=float))

    def variance(self, m):
        return np.ones_like(np.asarray(m, dtype=float))

    def link(self, m):
        return np.asarray(m, dtype=float)


def _design(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.column_stack([np.ones(x.shape[0]), x])


def unit_terms(model: WorkingModel, Z, beta):
    """Per-unit mean ``m``, gradient ``dm/dbeta`` and weight vector ``h``."""
    eta = Z @ beta
    m = model.mean(eta)
    dm = model.dmean(eta)
    mdot = dm[:, None] * Z
    h = (dm / model.variance(m))[:, None] * Z
    return m, mdot, h


def estimating_function(sample: Sample, model: WorkingModel, beta) -> np.ndarray:
    Z = _design(sample.x)
    m, _, h = unit_terms(model, Z, np.asarray(beta, dtype=float))
    return h.T @ ((sample.y - m) / sample.pi)


def ee_jacobian(sample: Sample, model: WorkingModel, beta) -> np.ndarray:
    """Analytic derivative of the estimating function.

    Exact for canonical-link models (``h`` free of beta), which covers
    both shipped models.
    """
    Z = _design(sample.x)
    _, mdot, h = unit_terms(model, Z, np.asarray(beta, dtype=float))
    return -(h / sample.pi[:, None]).T @ mdot


@dataclass(frozen=True, eq=False)
class GlmFit:
    beta: np.ndarray
    vbeta: np.ndarray
    converged: bool
    iterations: int
    score_norm: float
    clamped: int = 0  # most units clamped at any trial iterate

    @property
    def v11(self):
        return self.vbeta[1:, 1:]


def _init_beta(sample, model, p):
    w = 1.0 / sample.pi
    beta = np.zeros(p + 1)
    beta[0] = float(model.link(np.array(w @ sample.y / w.sum())))
    return beta


def solve_ee(sample: Sample, model: WorkingModel, init=None, *, tol: float = 1e-8,
             max_iter: int = 100, max_halvings: int = 30) -> GlmFit:
    """Newton iterations with step halving on the design-weighted estimating equation."""
    n, p = sample.x.shape
    if n <= p + 1:
        raise DataError(f"need n > p + 1, got n={n}, p={p}")
    beta = _init_beta(sample, model, p) if init is None else np.array(init, dtype=float)
    U = estimating_function(sample, model, beta)
    norm = np.max(np.abs(U))
    it = 0
    max_clamped = 0  # largest number of clamped units over all trial iterates
    while norm > tol and it < max_iter:
        it += 1
        J = ee_jacobian(sample, model, beta)
        try:
            step = np.linalg.solve(J, -U)
        except np.linalg.LinAlgError:
            k = J.shape[0]
            J = J - 1e-10 * abs(np.trace(J)) / k * np.eye(k)
            try:
                step = np.linalg.solve(J, -U)
            except np.linalg.LinAlgError as exc:
                raise NumericalError("singular Jacobian in estimating-equation solve") from exc
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = beta + t * step
            if np.linalg.norm(cand) > 1e3:
                raise SeparationError("coefficients diverged; the data may be separated")
            U_new = estimating_function(sample, model, cand)
            max_clamped = max(max_clamped, model.clamp_count(_design(sample.x) @ cand))
            if np.linalg.norm(U_new) < np.linalg.norm(U):
                break
            t *= 0.5
        else:
            break  # no decrease possible: at the roundoff floor
        beta, U = cand, U_new
        norm = np.max(np.abs(U))
    Z = _design(sample.x)
    clamped = model.clamp_count(Z @ beta)
    if clamped:
        # the score only vanished because fitted means hit the clamp
        raise SeparationError(f"{clamped} fitted means at the probability clamp; "
                              "the data appear to be separated")
    m, mdot, h = unit_terms(model, Z, beta)
    H = (h / sample.pi[:, None]).T @ mdot
    Hinv = np.linalg.inv(H)
    M = design_quadratic(sample, h * (sample.y - m)[:, None])
    V = Hinv @ M @ Hinv.T
    return GlmFit(beta, 0.5 * (V + V.T), bool(norm <= tol), it, float(norm), max_clamped)


# --------------------------------------------------------------------------
# Estimators


def _pop_n_check(pop_x, sample):
    if pop_x is None:
        raise DataError("unit-level population covariates are required")
    pop_x = np.asarray(pop_x, dtype=float)
    if pop_x.shape[0] != sample.pop_n:
        raise DataError(f"population matrix has {pop_x.shape[0]} rows, N={sample.pop_n}")
    return pop_x


def model_assisted_mean(pop_x, sample: Sample, model: WorkingModel, beta) -> float:
    pop_x = _pop_n_check(pop_x, sample)
    beta = np.asarray(beta, dtype=float)
    m_pop = model.mean(_design(pop_x) @ beta)
    m_s = model.mean(_design(sample.x) @ beta)
    return float((m_pop.sum() + np.sum((sample.y - m_s) / sample.pi)) / sample.pop_n)


def model_assisted_mean_rows(pop_x, sample, model, B, chunk: int = 256) -> np.ndarray:
    pop_x = _pop_n_check(pop_x, sample)
    Zp, Zs = _design(pop_x), _design(sample.x)
    out = np.empty(B.shape[0])
    for lo in range(0, B.shape[0], chunk):
        Bc = B[lo:lo + chunk]
        pop_sum = model.mean(Bc @ Zp.T).sum(axis=1)
        resid = (sample.y[None, :] - model.mean(Bc @ Zs.T)) @ (1.0 / sample.pi)
        out[lo:lo + chunk] = (pop_sum + resid) / sample.pop_n
    return out


def variance_e_m(sample: Sample, model: WorkingModel, beta) -> float:
    e = sample.y - model.mean(_design(sample.x) @ np.asarray(beta, dtype=float))
    return max(design_quadratic(sample, e), 0.0) / sample.pop_n**2


def variance_e_m_rows(sample, model, B) -> np.ndarray:
    E = sample.y[None, :] - model.mean(B @ _design(sample.x).T)
    return np.maximum(design_quadratic_rows(sample, E), 0.0) / sample.pop_n**2


def run_posterior_glm(sample: Sample, pop_x, model: WorkingModel, prior: PriorSpec,
                      config: McmcConfig, fit: Optional[GlmFit] = None) -> PosteriorDraws:
    """Two-step sampler with the GLM sandwich as the approximate likelihood.

    Shrinkage acts on the slopes only; the intercept has a flat prior.
    """
    fit = fit or solve_ee(sample, model)
    if not fit.converged:
        raise ConvergenceError("estimating equation did not converge")
    pop_x = _pop_n_check(pop_x, sample)
    mask = np.ones(fit.beta.size, dtype=bool)
    mask[0] = False
    lik = NormalLikelihood(fit.beta, fit.vbeta, penalized=mask)
    beta_ss, ybar_ss = np.random.SeedSequence(config.seed).spawn(2)
    betas, lams = run_chain(lik, prior, config.n_draws, config.burn_in, config.thin,
                            np.random.default_rng(beta_ss))
    mean = model_assisted_mean_rows(pop_x, sample, model, betas)
    var = variance_e_m_rows(sample, model, betas)
    rng = np.random.default_rng(ybar_ss)
    ybar = mean + np.sqrt(var) * rng.standard_normal(betas.shape[0])
    return PosteriorDraws(betas, lams, ybar, config)


# --------------------------------------------------------------------------
# Penalized logistic regression (glmnet-style IRLS + coordinate descent)


def _deviance(y, m):
    return -2.0 * (y * np.log(m) + (1 - y) * np.log1p(-m))


def _wsd_scales(X, w, standardize):
    if not standardize:
        return np.ones(X.shape[1])
    xbar = w @ X / w.sum()
    s = np.sqrt(w @ (X - xbar) ** 2 / w.sum())
    s[s <= 1e-14 * max(1.0, s.max(initial=0.0))] = 1.0
    return s


def _irls_penalized(X, y, w, l1, l2, scales, beta0=None, tol=1e-8, max_iter=100):
    """Minimise ``sum w * deviance + P`` (P on the ``scales``-standardized slopes)."""
    model = Logistic()
    p = X.shape[1]
    beta = np.zeros(p + 1) if beta0 is None else np.array(beta0, dtype=float)
    if beta0 is None:
        beta[0] = float(model.link(np.array(w @ y / w.sum())))
    Z = np.column_stack([np.ones(X.shape[0]), X])

    def objective(b):
        g = b[1:] * scales
        return float(w @ _deviance(y, model.mean(Z @ b)) + l1 @ np.abs(g) + l2 @ g**2)

    f = objective(beta)
    for _ in range(max_iter):
        eta = Z @ beta
        m = model.mean(eta)
        v = np.maximum(m * (1 - m), 1e-10)
        z = eta + (y - m) / v
        om = w * v
        so = om.sum()
        xbar = om @ X / so
        zbar = om @ z / so
        Xs = (X - xbar) / scales
        WXs = Xs * om[:, None]
        prep = _Prepared(xbar, zbar, scales, WXs.T @ Xs, WXs.T @ (z - zbar), so)
        g, _, _ = _solve_prepared(prep, l1, l2, g0=beta[1:] * scales, tol=1e-12)
        b1 = g / scales
        cand = np.concatenate([[zbar - xbar @ b1], b1])
        step = cand - beta
        t = 1.0
        for _ in range(30):
            f_new = objective(beta + t * step)
            if f_new <= f + 1e-12 * abs(f):
                break
            t *= 0.5
        new = beta + t * step
        if np.linalg.norm(new) > 1e3:
            raise SeparationError("penalized logistic coefficients diverged")
        delta = np.max(np.abs(new - beta))
        beta, f = new, f_new
        if delta < tol:
            return beta
    raise ConvergenceError("penalized IRLS did not converge")


def fit_penalized_glm(sample: Sample, penalty: PenaltySpec, *, standardize: bool = True,
                      penalty_factor=None, init=None) -> np.ndarray:
    """Penalized logistic coefficients (intercept first)."""
    w = 1.0 / sample.pi
    scales = _wsd_scales(sample.x, w, standardize)
    l1, l2 = _penalty_arrays(penalty, sample.p, scales, penalty_factor)
    return _irls_penalized(sample.x, sample.y, w, l1, l2, scales, init)


def lambda_max_glm(sample: Sample, family: str) -> float:
    w = 1.0 / sample.pi
    scales = _wsd_scales(sample.x, w, True)
    ybar = w @ sample.y / w.sum()
    Xs = (sample.x - w @ sample.x / w.sum()) / scales
    if family == "ridge":
        return 1e2 * w.sum() * ybar * (1 - ybar)
    lam = float(np.max(2 * np.abs((Xs * w[:, None]).T @ (sample.y - ybar))))
    if family == "elastic_net":
        lam /= ENET_MIX
    return lam


def cv_select_lambda_glm(sample: Sample, family: str, folds: int = 10, grid=None, seed=0,
                         *, n_lambda: int = 100, weighted: bool = True) -> float:
    """Cross-validated penalty on held-out weighted deviance; ties go to larger lambda."""
    if grid is None:
        top = lambda_max_glm(sample, family)
        grid = np.geomspace(top, 1e-4 * top, n_lambda)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise DataError("lambda grid is empty")
    if np.any(np.diff(grid) > 0):
        raise DataError("lambda grid must be sorted in descending order")
    w_all = 1.0 / sample.pi
    parts = _fold_ids(sample.n, folds, seed)
    if min(len(f) for f in parts) < 2:
        raise DataError("a cross-validation fold has fewer than 2 observations")
    model = Logistic()
    losses = np.empty((folds, grid.size))
    for k, held in enumerate(parts):
        train = np.ones(sample.n, dtype=bool)
        train[held] = False
        Xt, yt, wt = sample.x[train], sample.y[train], w_all[train]
        scales = _wsd_scales(Xt, wt, True)
        share = wt.sum() / w_all.sum()
        wh = w_all[held] if weighted else np.ones(len(held))
        Zh = np.column_stack([np.ones(len(held)), sample.x[held]])
        beta = None
        for m, lam in enumerate(grid):
            l1, l2 = _penalty_arrays(make_penalty(family, lam * share), sample.p, scales, None)
            beta = _irls_penalized(Xt, yt, wt, l1, l2, scales, beta)
            dev = _deviance(sample.y[held], model.mean(Zh @ beta))
            losses[k, m] = wh @ dev / wh.sum()
    return float(grid[int(np.argmin(losses.mean(axis=0)))])


def glm_prior_lambda(sample: Sample, fit: GlmFit, lam_cv: float) -> float:
    """Laplace rate on the slope scale matching a cross-validated logistic penalty."""
    model = Logistic()
    w = 1.0 / sample.pi
    m = model.mean(_design(sample.x) @ fit.beta)
    om = w * m * (1 - m)
    Xc = sample.x - om @ sample.x / om.sum()
    gram = (Xc * om[:, None]).T @ Xc
    scales = _wsd_scales(sample.x, w, True)
    return prior_lambda_from_penalty(lam_cv, gram, fit.v11, scales)
