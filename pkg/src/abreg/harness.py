"""Monte Carlo replication of the linear and logistic simulation studies.

One finite population is generated per study; each replication draws a
fresh sample from it and runs every requested method. Per-replication
seeds depend only on (master seed, replication index), so the aggregate
does not depend on execution order or on the number of workers.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from . import bayes, glm, regfit
from .bayes import FlatPrior, HorseshoePrior, LaplacePrior, McmcConfig
from .errors import AbregError, ConfigError
from .survey import (AuxTotals, DesignSpec, FinitePopulation, draw_sample, greg_mean,
                     ht_mean, ht_variance, variance_e)

log = logging.getLogger(__name__)

LINEAR_METHODS = ("GREG", "GREG-L", "GREG-R", "GREG-V", "AB", "ABL", "ABH", "HT")
LOGISTIC_METHODS = ("GREG", "GREG-L", "GREG-R", "AB", "ABL", "ABH", "HT")
TRUE_SLOPES = {0: 1.0, 3: -0.5, 6: 1.0, 9: -0.5}  # x1, x4, x7, x10


@dataclass(frozen=True)
class ScenarioConfig:
    kind: Literal["linear", "logistic"] = "linear"
    N: int = 10_000
    p_star: int = 50
    p: int = 50
    n: int = 300
    rho: float = 0.2
    design: Literal["A", "B"] = "A"
    reps: int = 200
    methods: tuple = LINEAR_METHODS
    mcmc: McmcConfig = McmcConfig(2000, 200)
    seed: int = 0
    beta0: Optional[float] = None  # None: 0 (linear) or -1 (logistic)
    noise_sd: float = 2.0
    size_rate: Optional[float] = None  # Exp rate; None: 2 (linear) or 3 (logistic)
    cv_folds: int = 10
    n_lambda: int = 100
    level: float = 0.95
    workers: int = 1

    def __post_init__(self):
        if self.kind not in ("linear", "logistic"):
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.design not in ("A", "B"):
            raise ConfigError("design must be 'A' (SRS) or 'B' (PPS)")
        if not 1 <= self.p <= self.p_star:
            raise ConfigError("need 1 <= p <= p_star")
        if self.p_star < max(TRUE_SLOPES) + 1:
            raise ConfigError(f"p_star must be at least {max(TRUE_SLOPES) + 1}")
        if not 1 <= self.n <= self.N:
            raise ConfigError("need 1 <= n <= N")
        if not self.methods:
            raise ConfigError("at least one method is required")
        allowed = LINEAR_METHODS if self.kind == "linear" else LOGISTIC_METHODS
        bad = [m for m in self.methods if m not in allowed]
        if bad:
            raise ConfigError(f"methods {bad} not available for {self.kind} scenarios")
        if self.reps < 1:
            raise ConfigError("reps must be positive")
        object.__setattr__(self, "methods", tuple(self.methods))

    @property
    def intercept(self) -> float:
        if self.beta0 is not None:
            return self.beta0
        return 0.0 if self.kind == "linear" else -1.0

    @property
    def rate(self) -> float:
        if self.size_rate is not None:
            return self.size_rate
        return 2.0 if self.kind == "linear" else 3.0


def true_slopes(p_star: int) -> np.ndarray:
    beta = np.zeros(p_star)
    for k, v in TRUE_SLOPES.items():
        beta[k] = v
    return beta


def ar_covariance(p: int, rho: float, scale: float = 2.0) -> np.ndarray:
    idx = np.arange(p)
    return scale * rho ** np.abs(np.subtract.outer(idx, idx))


def _covariates(cfg: ScenarioConfig, rng) -> np.ndarray:
    L = np.linalg.cholesky(ar_covariance(cfg.p_star, cfg.rho))
    return 1.0 + rng.standard_normal((cfg.N, cfg.p_star)) @ L.T


def gen_population_linear(cfg: ScenarioConfig, seed) -> FinitePopulation:
    if cfg.kind != "linear":
        raise ConfigError("linear generator called with a non-linear scenario")
    rng = np.random.default_rng(seed)
    X = _covariates(cfg, rng)
    y = cfg.intercept + X @ true_slopes(cfg.p_star) + cfg.noise_sd * rng.standard_normal(cfg.N)
    return FinitePopulation(y, X)


def gen_population_logistic(cfg: ScenarioConfig, seed) -> FinitePopulation:
    if cfg.kind != "logistic":
        raise ConfigError("logistic generator called with a non-logistic scenario")
    rng = np.random.default_rng(seed)
    X = _covariates(cfg, rng)
    prob = expit(cfg.intercept + X @ true_slopes(cfg.p_star))
    y = (rng.uniform(size=cfg.N) < prob).astype(float)
    return FinitePopulation(y, X)


def pps_size_measure(pop: FinitePopulation, cfg: ScenarioConfig, seed) -> np.ndarray:
    """Noisy size measure; the Exp variate uses ``cfg.rate`` as its rate (mean 1/rate)."""
    rng = np.random.default_rng(seed)
    e = rng.exponential(1.0 / cfg.rate, size=pop.n_units)
    if cfg.kind == "linear":
        return np.maximum(np.log1p(np.abs(pop.y + e)), 1.0)
    return np.maximum(np.log1p(0.5 * pop.y + e), 0.5)


def build_population(cfg: ScenarioConfig) -> FinitePopulation:
    gen = gen_population_linear if cfg.kind == "linear" else gen_population_logistic
    pop = gen(cfg, np.random.SeedSequence([cfg.seed, 0]))
    if cfg.design == "B":
        pop = pop.with_size_measure(pps_size_measure(pop, cfg, np.random.SeedSequence([cfg.seed, 1])))
    return pop.columns(cfg.p)


# --------------------------------------------------------------------------
# One replication


class _LinearRep:
    def __init__(self, sample, aux, cfg, cv_seed):
        self.s, self.aux, self.cfg, self.cv_seed = sample, aux, cfg, cv_seed
        self._fit = None
        self._lam = {}

    @property
    def fit(self):
        if self._fit is None:
            self._fit = regfit.fit_wls(self.s)
        return self._fit

    def lam(self, family):
        if family not in self._lam:
            grid = regfit.lambda_grid(self.s, family, self.cfg.n_lambda)
            self._lam[family] = regfit.cv_select_lambda(
                self.s, family, self.cfg.cv_folds, grid, self.cv_seed)
        return self._lam[family]

    def plugin(self, beta1):
        return greg_mean(self.s, self.aux, beta1), variance_e(self.s, beta1)

    def frequentist(self, method):
        if method == "HT":
            return ht_mean(self.s), ht_variance(self.s)
        if method == "GREG":
            return self.plugin(self.fit.beta1)
        if method in ("GREG-L", "GREG-R"):
            family = "lasso" if method == "GREG-L" else "ridge"
            pen = regfit.make_penalty(family, self.lam(family))
            return self.plugin(regfit.fit_penalized(self.s, pen).beta1)
        if method == "GREG-V":
            _, sub = regfit.forward_select(self.s)
            return self.plugin(sub.full_beta1(self.s.p))
        raise ConfigError(method)

    def prior(self, method):
        if method == "AB":
            return FlatPrior()
        if method == "ABH":
            return HorseshoePrior()
        return bayes.laplace_prior_from_cv(self.s, self.fit, self.lam("lasso"))

    def posterior(self, method, mcmc):
        return bayes.run_posterior(self.s, self.aux, self.prior(method), mcmc, fit=self.fit)


class _LogisticRep(_LinearRep):
    model = glm.Logistic()

    @property
    def fit(self):
        if self._fit is None:
            self._fit = glm.solve_ee(self.s, self.model)
            if not self._fit.converged:
                raise AbregError("logistic estimating equation did not converge")
        return self._fit

    def lam(self, family):
        if family not in self._lam:
            self._lam[family] = glm.cv_select_lambda_glm(
                self.s, family, self.cfg.cv_folds, seed=self.cv_seed, n_lambda=self.cfg.n_lambda)
        return self._lam[family]

    def plugin(self, beta):
        return (glm.model_assisted_mean(self.aux.pop_x, self.s, self.model, beta),
                glm.variance_e_m(self.s, self.model, beta))

    def frequentist(self, method):
        if method == "HT":
            return ht_mean(self.s), ht_variance(self.s)
        if method == "GREG":
            return self.plugin(self.fit.beta)
        family = "lasso" if method == "GREG-L" else "ridge"
        beta = glm.fit_penalized_glm(self.s, regfit.make_penalty(family, self.lam(family)))
        return self.plugin(beta)

    def prior(self, method):
        if method == "AB":
            return FlatPrior()
        if method == "ABH":
            return HorseshoePrior()
        lam = glm.glm_prior_lambda(self.s, self.fit, self.lam("lasso"))
        return LaplacePrior(a=max(lam**2, 1e-8), b=1.0)

    def posterior(self, method, mcmc):
        return glm.run_posterior_glm(self.s, self.aux.pop_x, self.model, self.prior(method),
                                     mcmc, fit=self.fit)


def run_replication(pop: FinitePopulation, aux: AuxTotals, cfg: ScenarioConfig, rep: int):
    """Per-method ``(estimate, lower, upper)`` or an error string."""
    ss = np.random.SeedSequence([cfg.seed, 2, rep])
    s_seed, cv_seed, mc_seed = ss.spawn(3)
    design = DesignSpec.srs(cfg.n) if cfg.design == "A" else DesignSpec.pps(cfg.n)
    sample = draw_sample(pop, design, s_seed)
    cls = _LinearRep if cfg.kind == "linear" else _LogisticRep
    ctx = cls(sample, aux, cfg, cv_seed)
    z = norm.ppf(0.5 + cfg.level / 2)
    mcmc_seed = int(mc_seed.generate_state(1)[0])
    out = {}
    for method in cfg.methods:
        try:
            if method.startswith("AB"):
                mcmc = replace(cfg.mcmc, seed=mcmc_seed)
                out[method] = bayes.summarize(ctx.posterior(method, mcmc), cfg.level)
            else:
                est, var = ctx.frequentist(method)
                half = z * np.sqrt(var)
                out[method] = (est, est - half, est + half)
        except (AbregError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out[method] = f"{type(exc).__name__}: {exc}"
    return out


# --------------------------------------------------------------------------
# Aggregation


@dataclass
class MethodMetrics:
    rmse: float
    bias: float
    cp: float  # fraction in [0, 1]
    al: float
    n_ok: int
    n_failed: int
    estimates: np.ndarray = field(repr=False, default=None)
    failures: list = field(repr=False, default_factory=list)


@dataclass
class MetricsTable:
    rows: dict
    reps: int
    ybar: float
    runtime: float = 0.0

    def display(self) -> dict:
        """Metrics multiplied by 100 (CP becomes a percentage)."""
        return {m: {"rmse": 100 * r.rmse, "bias": 100 * r.bias, "cp": 100 * r.cp,
                    "al": 100 * r.al} for m, r in self.rows.items()}

    def to_dict(self) -> dict:
        return {
            "reps": self.reps,
            "ybar": self.ybar,
            "runtime": self.runtime,
            "methods": {m: {"rmse": r.rmse, "bias": r.bias, "cp": r.cp, "al": r.al,
                            "n_ok": r.n_ok, "n_failed": r.n_failed,
                            "failures": r.failures[:5]}
                        for m, r in self.rows.items()},
            "display_x100": self.display(),
        }

    def write_csv(self, path, display: bool = False):
        vals = self.display() if display else {
            m: {"rmse": r.rmse, "bias": r.bias, "cp": r.cp, "al": r.al} for m, r in self.rows.items()}
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["method", "rmse", "bias", "cp", "al"])
            for m, v in vals.items():
                wr.writerow([m] + [f"{v[k]:.4g}" for k in ("rmse", "bias", "cp", "al")])


def aggregate(records: list, ybar: float, methods) -> MetricsTable:
    rows = {}
    for m in methods:
        ok = [r[m] for r in records if not isinstance(r[m], str)]
        fails = [r[m] for r in records if isinstance(r[m], str)]
        if ok:
            arr = np.array(ok)
            err = arr[:, 0] - ybar
            cover = (arr[:, 1] <= ybar) & (ybar <= arr[:, 2])
            rows[m] = MethodMetrics(float(np.sqrt(np.mean(err**2))), float(err.mean()),
                                    float(cover.mean()), float(np.mean(arr[:, 2] - arr[:, 1])),
                                    len(ok), len(fails), arr[:, 0], fails)
        else:
            nan = float("nan")
            rows[m] = MethodMetrics(nan, nan, nan, nan, 0, len(fails), np.empty(0), fails)
        if fails:
            log.warning("%s failed in %d of %d replications", m, len(fails), len(records))
    return MetricsTable(rows, len(records), ybar)


_WORKER = {}


def _worker_init(pop, aux, cfg):
    _WORKER.update(pop=pop, aux=aux, cfg=cfg)


def _worker_rep(rep):
    return run_replication(_WORKER["pop"], _WORKER["aux"], _WORKER["cfg"], rep)


def run_study(cfg: ScenarioConfig, progress=None) -> MetricsTable:
    t0 = time.perf_counter()
    pop = build_population(cfg)
    aux = AuxTotals.from_population(pop, keep_units=cfg.kind == "logistic")
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers, initializer=_worker_init,
                                 initargs=(pop, aux, cfg)) as ex:
            records = list(ex.map(_worker_rep, range(cfg.reps), chunksize=4))
    else:
        records = []
        for r in range(cfg.reps):
            records.append(run_replication(pop, aux, cfg, r))
            if progress:
                progress(r + 1, cfg.reps)
    table = aggregate(records, pop.ybar, cfg.methods)
    table.runtime = time.perf_counter() - t0
    return table
