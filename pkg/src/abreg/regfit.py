"""Design-weighted linear regression: plain WLS with sandwich variance,
penalized fits by coordinate descent, cross-validated tuning and forward
selection.

Every objective here is on the unnormalised survey scale

    sum_i w_i (y_i - b0 - x_i'b)^2 + P(b),      w_i = 1/pi_i,

with P taken verbatim from the usual table of penalties (ridge
``lam*sum b^2``, lasso ``lam*sum|b|``, ...). The intercept is never
penalized. For the lasso this makes the univariate solution
``S(sum w x y, lam/2) / sum w x^2``: the soft-threshold constant is lam/2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ._cd import cd_solve
from .errors import ConvergenceError, DataError, NumericalError
from .survey import Sample, design_quadratic


@dataclass(frozen=True, eq=False)
class RegressionFit:
    beta0: float
    beta1: np.ndarray
    vbeta: np.ndarray
    residuals: np.ndarray
    columns: Optional[tuple] = None
    jitter: float = 0.0

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([[self.beta0], self.beta1])

    @property
    def v11(self) -> np.ndarray:
        """Covariance block of the slope coefficients."""
        return self.vbeta[1:, 1:]

    def full_beta1(self, p: int) -> np.ndarray:
        """Slopes embedded in a length-``p`` vector (zeros for unused columns)."""
        if self.columns is None:
            return self.beta1.copy()
        out = np.zeros(p)
        out[list(self.columns)] = self.beta1
        return out


# --------------------------------------------------------------------------
# Penalties


@dataclass(frozen=True)
class NoPenalty:
    def weights(self, p):
        return np.zeros(p), np.zeros(p)


@dataclass(frozen=True)
class Ridge:
    lam: float

    def weights(self, p):
        _check_lam(self.lam)
        return np.zeros(p), np.full(p, float(self.lam))


@dataclass(frozen=True)
class Lasso:
    lam: float

    def weights(self, p):
        _check_lam(self.lam)
        return np.full(p, float(self.lam)), np.zeros(p)


@dataclass(frozen=True, eq=False)
class AdaptiveLasso:
    lam: float
    pilot: np.ndarray

    def __post_init__(self):
        pilot = np.asarray(self.pilot, dtype=float)
        if np.any(pilot == 0) or not np.all(np.isfinite(pilot)):
            raise DataError("adaptive lasso pilot coefficients must be finite and nonzero")
        object.__setattr__(self, "pilot", pilot)

    def weights(self, p, scales=None):
        _check_lam(self.lam)
        pilot = self.pilot if scales is None else self.pilot * scales
        return float(self.lam) / np.abs(pilot), np.zeros(p)


@dataclass(frozen=True)
class ElasticNet:
    lam1: float
    lam2: float

    def weights(self, p):
        _check_lam(self.lam1)
        _check_lam(self.lam2)
        return np.full(p, float(self.lam1)), np.full(p, float(self.lam2))


PenaltySpec = Union[NoPenalty, Ridge, Lasso, AdaptiveLasso, ElasticNet]

# mixing used when elastic net is tuned along a single lambda path
ENET_MIX = 0.5


def _check_lam(lam):
    if not np.isfinite(lam) or lam < 0:
        raise DataError(f"penalty parameter must be finite and nonnegative, got {lam}")


def make_penalty(family: str, lam: float, pilot=None) -> PenaltySpec:
    family = family.lower()
    if family == "lasso":
        return Lasso(lam)
    if family == "ridge":
        return Ridge(lam)
    if family == "adaptive_lasso":
        return AdaptiveLasso(lam, pilot)
    if family == "elastic_net":
        return ElasticNet(ENET_MIX * lam, (1 - ENET_MIX) * lam)
    if family == "none":
        return NoPenalty()
    raise DataError(f"unknown penalty family {family!r}")


# --------------------------------------------------------------------------
# Weighted least squares


def _design(sample: Sample, columns):
    X = sample.x if columns is None else sample.x[:, list(columns)]
    return X


def fit_wls(sample: Sample, columns: Optional[Sequence[int]] = None) -> RegressionFit:
    """Weighted least squares with intercept and its sandwich covariance."""
    X = _design(sample, columns)
    n, p = X.shape
    if n <= p + 1:
        raise DataError(f"need n > p + 1 for WLS, got n={n}, p={p}")
    w = 1.0 / sample.pi
    Z = np.column_stack([np.ones(n), X])
    if np.linalg.matrix_rank(Z * np.sqrt(w)[:, None]) < p + 1:
        raise DataError("design matrix (with intercept) is rank deficient")

    # centred normal equations
    xbar = w @ X / w.sum()
    Xc = X - xbar
    ybar = w @ sample.y / w.sum()
    G1 = (Xc * w[:, None]).T @ Xc
    beta1 = np.linalg.solve(G1, (Xc * w[:, None]).T @ sample.y) if p else np.zeros(0)
    beta0 = float(ybar - xbar @ beta1)
    e = sample.y - beta0 - X @ beta1

    G = (Z * w[:, None]).T @ Z
    G, jitter = _jittered(G)
    Ginv = np.linalg.inv(G)
    M = design_quadratic(sample, Z * e[:, None])
    V = Ginv @ M @ Ginv
    V = 0.5 * (V + V.T)
    return RegressionFit(beta0, beta1, V, e,
                         None if columns is None else tuple(int(c) for c in columns), jitter)


def _jittered(G: np.ndarray):
    k = G.shape[0]
    ev = np.linalg.eigvalsh(G)
    scale = np.trace(G) / k
    if ev[0] < 1e-12 * ev[-1]:
        jitter = 1e-10 * scale
        return G + jitter * np.eye(k), jitter
    return G, 0.0


# --------------------------------------------------------------------------
# Penalized fits


@dataclass(frozen=True, eq=False)
class PenalizedFit:
    beta0: float
    beta1: np.ndarray
    sweeps: int
    kkt_residual: float

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([[self.beta0], self.beta1])

    def __array__(self, dtype=None, copy=None):
        return self.coef if dtype is None else self.coef.astype(dtype)


@dataclass
class _Prepared:
    """Centred (and optionally scaled) Gram quantities of a weighted problem."""

    xbar: np.ndarray
    ybar: float
    scales: np.ndarray
    G: np.ndarray
    c: np.ndarray
    sw: float


def _prepare(X, y, w, standardize: bool) -> _Prepared:
    sw = w.sum()
    xbar = w @ X / sw
    ybar = float(w @ y / sw)
    Xc = X - xbar
    if standardize:
        scales = np.sqrt(w @ Xc**2 / sw)
        scales[scales <= 1e-14 * max(1.0, scales.max(initial=0.0))] = 1.0
    else:
        scales = np.ones(X.shape[1])
    Xs = Xc / scales
    WXs = Xs * w[:, None]
    return _Prepared(xbar, ybar, scales, WXs.T @ Xs, WXs.T @ (y - ybar), sw)


def _penalty_arrays(penalty: PenaltySpec, p, scales, penalty_factor):
    if isinstance(penalty, AdaptiveLasso):
        l1, l2 = penalty.weights(p, scales)
    else:
        l1, l2 = penalty.weights(p)
    if penalty_factor is not None:
        pf = np.asarray(penalty_factor, dtype=float)
        l1, l2 = l1 * pf, l2 * pf
    return np.ascontiguousarray(l1), np.ascontiguousarray(l2)


def _solve_prepared(prep: _Prepared, l1, l2, g0=None, tol=1e-10, max_sweeps=10_000):
    p = prep.c.size
    g0 = np.zeros(p) if g0 is None else np.asarray(g0, dtype=float)
    g, sweeps, converged, monotone, kkt = cd_solve(
        np.ascontiguousarray(prep.G), np.ascontiguousarray(prep.c), l1, l2,
        np.ascontiguousarray(g0), tol, max_sweeps)
    if not monotone:
        raise NumericalError("coordinate descent objective increased during a sweep")
    if not converged:
        raise ConvergenceError(f"coordinate descent did not converge in {max_sweeps} sweeps")
    return g, int(sweeps), float(kkt)


def fit_penalized(sample: Sample, penalty: PenaltySpec, *, standardize: bool = True,
                  penalty_factor=None, columns=None, tol: float = 1e-10,
                  max_sweeps: int = 10_000) -> PenalizedFit:
    """Minimise the weighted squared loss plus ``penalty`` on the slopes.

    With ``standardize`` the slopes are penalized on the scale of
    weighted-standard-deviation-one predictors and mapped back afterwards.
    ``kkt_residual`` is the largest coordinate-wise fixed-point violation
    in standardized coefficient units.
    """
    X = _design(sample, columns)
    w = 1.0 / sample.pi
    prep = _prepare(X, sample.y, w, standardize)
    l1, l2 = _penalty_arrays(penalty, X.shape[1], prep.scales, penalty_factor)
    g, sweeps, kkt = _solve_prepared(prep, l1, l2, tol=tol, max_sweeps=max_sweeps)
    beta1 = g / prep.scales
    beta0 = prep.ybar - prep.xbar @ beta1
    return PenalizedFit(float(beta0), beta1, sweeps, kkt)


def kkt_certificate(sample: Sample, penalty: PenaltySpec, coef, *, standardize=True,
                    penalty_factor=None) -> np.ndarray:
    """Per-coordinate subgradient violation ``|dQ/dg_j + subgrad P|``.

    Independent of the solver: evaluates the optimality conditions on the
    standardized scale directly from the data. Divided by ``2*sum(w)`` so it
    is on a per-unit scale.
    """
    coef = np.asarray(coef, dtype=float)
    w = 1.0 / sample.pi
    prep = _prepare(sample.x, sample.y, w, standardize)
    l1, l2 = _penalty_arrays(penalty, sample.p, prep.scales, penalty_factor)
    g = coef[1:] * prep.scales
    smooth = -2 * (prep.c - prep.G @ g) + 2 * l2 * g
    out = np.empty_like(g)
    nz = g != 0
    out[nz] = np.abs(smooth[nz] + l1[nz] * np.sign(g[nz]))
    out[~nz] = np.maximum(np.abs(smooth[~nz]) - l1[~nz], 0.0)
    return out / (2 * prep.sw)


# --------------------------------------------------------------------------
# Tuning


def lambda_max(sample: Sample, family: str, *, penalty_factor=None, pilot=None) -> float:
    """Smallest penalty that zeroes every slope (ridge: a 1%-shrinkage level)."""
    w = 1.0 / sample.pi
    prep = _prepare(sample.x, sample.y, w, standardize=True)
    return _lambda_max_prepared(prep, family, penalty_factor, pilot)


def _lambda_max_prepared(prep: _Prepared, family, penalty_factor, pilot):
    p = prep.c.size
    pf = np.ones(p) if penalty_factor is None else np.asarray(penalty_factor, dtype=float)
    active = pf > 0
    family = family.lower()
    if family == "ridge":
        return 1e2 * prep.sw
    grad = 2 * np.abs(prep.c)
    if family == "adaptive_lasso":
        grad = grad * np.abs(np.asarray(pilot) * prep.scales)
    lam = float(np.max(grad[active] / pf[active])) if active.any() else 0.0
    if family == "elastic_net":
        lam /= ENET_MIX
    return max(lam, np.finfo(float).tiny)


def lambda_grid(sample: Sample, family: str, n_lambda: int = 100, ratio: float = 1e-4,
                **kw) -> np.ndarray:
    """Log-spaced descending grid from ``lambda_max`` to ``ratio * lambda_max``."""
    top = lambda_max(sample, family, **kw)
    return np.geomspace(top, ratio * top, n_lambda)


def _fold_ids(n: int, folds: int, seed) -> list:
    rng = np.random.default_rng(seed)
    return np.array_split(rng.permutation(n), folds)


def cv_curve(sample: Sample, family: str, folds: int = 10, grid=None, seed=0, *,
             weighted: bool = True, penalty_factor=None, pilot=None):
    """Held-out loss for every grid value, averaged over folds.

    Each fold is solved along the (descending) grid with warm starts. The
    penalty is rescaled by the training share of total weight so a given
    lambda means the same amount of shrinkage in every fold.
    """
    if folds < 2:
        raise DataError("cross-validation needs at least two folds")
    if grid is None:
        grid = lambda_grid(sample, family, penalty_factor=penalty_factor, pilot=pilot)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise DataError("lambda grid is empty")
    if np.any(np.diff(grid) > 0):
        raise DataError("lambda grid must be sorted in descending order")
    if family == "adaptive_lasso" and pilot is None:
        pilot = fit_wls(sample).beta1
    w_all = 1.0 / sample.pi
    parts = _fold_ids(sample.n, folds, seed)
    if min(len(f) for f in parts) < 2:
        raise DataError("a cross-validation fold has fewer than 2 observations")

    losses = np.empty((folds, grid.size))
    for k, held in enumerate(parts):
        train = np.ones(sample.n, dtype=bool)
        train[held] = False
        Xt, yt, wt = sample.x[train], sample.y[train], w_all[train]
        prep = _prepare(Xt, yt, wt, standardize=True)
        share = wt.sum() / w_all.sum()
        g = np.zeros(sample.p)
        Xh, yh = sample.x[held], sample.y[held]
        wh = w_all[held] if weighted else np.ones(len(held))
        for m, lam in enumerate(grid):
            pen = make_penalty(family, lam * share, pilot)
            l1, l2 = _penalty_arrays(pen, sample.p, prep.scales, penalty_factor)
            g, _, _ = _solve_prepared(prep, l1, l2, g0=g)
            beta1 = g / prep.scales
            beta0 = prep.ybar - prep.xbar @ beta1
            resid = yh - beta0 - Xh @ beta1
            losses[k, m] = wh @ resid**2 / wh.sum()
    return grid, losses.mean(axis=0)


def cv_select_lambda(sample: Sample, family: str, folds: int = 10, grid=None, seed=0,
                     **kw) -> float:
    """Grid value with the smallest cross-validated loss; ties go to the larger one."""
    grid, loss = cv_curve(sample, family, folds, grid, seed, **kw)
    return float(grid[int(np.argmin(loss))])


# --------------------------------------------------------------------------
# Forward selection


def adjusted_r2(rss: float, tss: float, n: int, k: int) -> float:
    if tss <= 0:
        return 0.0
    return 1.0 - (rss / tss) * (n - 1) / (n - k - 1)


def forward_select(sample: Sample, *, weighted: bool = True):
    """Greedy forward selection on adjusted R^2.

    Returns the selected column indices (in order of entry) and the WLS
    fit on those columns.
    """
    n, p = sample.n, sample.p
    if n <= 2:
        raise DataError("forward selection needs n > 2")
    w = 1.0 / sample.pi if weighted else np.ones(n)
    xbar = w @ sample.x / w.sum()
    Xc = sample.x - xbar
    yc = sample.y - w @ sample.y / w.sum()
    G = (Xc * w[:, None]).T @ Xc
    c = (Xc * w[:, None]).T @ yc
    tss = float(w @ yc**2)

    selected: list = []
    best = 0.0  # adjusted R^2 of the intercept-only model
    while len(selected) < p and len(selected) + 2 < n:
        k = len(selected) + 1
        cand_best, cand_j = best, None
        for j in range(p):
            if j in selected:
                continue
            S = selected + [j]
            GS = G[np.ix_(S, S)]
            try:
                coef = np.linalg.solve(GS, c[S])
            except np.linalg.LinAlgError:
                continue
            rss = tss - c[S] @ coef
            score = adjusted_r2(rss, tss, n, k)
            if score > cand_best + 1e-12:
                cand_best, cand_j = score, j
        if cand_j is None:
            break
        selected.append(cand_j)
        best = cand_best
    return selected, fit_wls(sample, columns=selected)
