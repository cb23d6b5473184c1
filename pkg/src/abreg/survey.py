"""Finite populations, sampling designs and design-based estimators of a mean.

All estimators work on the scale of the population *mean*, so variance
estimators carry the ``1/N**2`` factor. The design quadratic form

    Q(e) = sum_i sum_j (Delta_ij / pi_ij) (e_i / pi_i) (e_j / pi_j)

is evaluated in O(n) for the two supported pairwise policies; the diagonal
terms use ``pi_ii = pi_i`` so ``Delta_ii = pi_i (1 - pi_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .errors import ConfigError, DataError, DesignError

PairwisePolicy = Literal["exact_srs", "independence"]
ResidualConvention = Literal["absorbed", "raw"]


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FinitePopulation:
    y: np.ndarray
    x: np.ndarray
    domain: Optional[np.ndarray] = None
    size_measure: Optional[np.ndarray] = None

    def __post_init__(self):
        y = _frozen(self.y)
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        x.setflags(write=False)
        if y.ndim != 1 or y.size < 1:
            raise DataError("population response must be a non-empty vector")
        if x.shape[0] != y.size:
            raise DataError(f"x has {x.shape[0]} rows but y has {y.size} units")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        if self.domain is not None:
            dom = _frozen(self.domain, dtype=np.int64)
            if dom.shape != y.shape:
                raise DataError("domain labels must have one entry per unit")
            object.__setattr__(self, "domain", dom)
        if self.size_measure is not None:
            z = _frozen(self.size_measure)
            if z.shape != y.shape:
                raise DataError("size measure must have one entry per unit")
            if not np.all(z > 0):
                raise DesignError("size measures must be strictly positive")
            object.__setattr__(self, "size_measure", z)

    @property
    def n_units(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def ybar(self) -> float:
        return float(self.y.mean())

    def with_size_measure(self, z) -> "FinitePopulation":
        return FinitePopulation(self.y, self.x, self.domain, z)

    def columns(self, p: int) -> "FinitePopulation":
        """Population restricted to the first ``p`` auxiliary columns."""
        return FinitePopulation(self.y, self.x[:, :p], self.domain, self.size_measure)


@dataclass(frozen=True)
class DesignSpec:
    kind: Literal["srs", "pps"]
    n: int
    pairwise: PairwisePolicy = "exact_srs"

    def __post_init__(self):
        if self.kind not in ("srs", "pps"):
            raise DesignError(f"unknown design kind {self.kind!r}")
        if self.pairwise not in ("exact_srs", "independence"):
            raise DesignError(f"unknown pairwise policy {self.pairwise!r}")
        if int(self.n) < 1:
            raise DesignError("sample size must be at least 1")

    @classmethod
    def srs(cls, n: int) -> "DesignSpec":
        return cls("srs", n, "exact_srs")

    @classmethod
    def pps(cls, n: int) -> "DesignSpec":
        return cls("pps", n, "independence")


@dataclass(frozen=True, eq=False)
class Sample:
    indices: np.ndarray
    y: np.ndarray
    x: np.ndarray
    pi: np.ndarray
    design: DesignSpec
    pop_n: int
    domain: Optional[np.ndarray] = None

    def __post_init__(self):
        idx = _frozen(self.indices, dtype=np.int64)
        y = _frozen(self.y)
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        x.setflags(write=False)
        pi = _frozen(self.pi)
        n = y.size
        if idx.size != n or x.shape[0] != n or pi.size != n:
            raise DataError("sample arrays have inconsistent lengths")
        if np.unique(idx).size != n:
            raise DataError("sample indices must be distinct")
        if not np.all((pi > 0) & (pi <= 1)):
            raise DesignError("inclusion probabilities must lie in (0, 1]")
        if n > self.pop_n:
            raise DesignError("sample larger than population")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "pi", pi)
        if self.domain is not None:
            object.__setattr__(self, "domain", _frozen(self.domain, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.pi

    @property
    def n_hat(self) -> float:
        return float(np.sum(1.0 / self.pi))

    def columns(self, cols) -> "Sample":
        return Sample(self.indices, self.y, self.x[:, list(cols)], self.pi,
                      self.design, self.pop_n, self.domain)

    def subset(self, mask) -> "Sample":
        """Rows selected by ``mask``; design and population size are kept."""
        mask = np.asarray(mask)
        dom = None if self.domain is None else self.domain[mask]
        return Sample(self.indices[mask], self.y[mask], self.x[mask], self.pi[mask],
                      self.design, self.pop_n, dom)


@dataclass(frozen=True, eq=False)
class AuxTotals:
    """Known population means of the auxiliaries.

    ``pop_x`` (unit-level population covariates) is only needed by the
    nonlinear estimators; ``pop_size`` is used for domain estimation.
    """

    xbar: np.ndarray
    pop_x: Optional[np.ndarray] = None
    pop_size: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "xbar", _frozen(np.atleast_1d(self.xbar)))
        if self.pop_x is not None:
            px = np.array(self.pop_x, dtype=float)
            if px.ndim == 1:
                px = px[:, None]
            if px.shape[1] != self.xbar.size:
                raise DataError("population matrix and xbar disagree on p")
            px.setflags(write=False)
            object.__setattr__(self, "pop_x", px)

    @classmethod
    def from_population(cls, pop: FinitePopulation, p: Optional[int] = None,
                        keep_units: bool = False) -> "AuxTotals":
        x = pop.x if p is None else pop.x[:, :p]
        return cls(x.mean(axis=0), x if keep_units else None, pop.n_units)

    def check(self, sample: Sample):
        if self.xbar.size != sample.p:
            raise DataError(f"auxiliary totals have dimension {self.xbar.size}, "
                            f"sample has p={sample.p}")


# --------------------------------------------------------------------------
# Sampling


def pps_probabilities(z, n: int) -> np.ndarray:
    """First-order probabilities proportional to ``z`` with units capped at 1.

    Units whose share would exceed one become certainty units and the
    remaining sample size is spread over the rest, until a fixed point.
    """
    z = np.asarray(z, dtype=float)
    N = z.size
    if n > N:
        raise DesignError(f"sample size {n} exceeds population size {N}")
    if not np.all(z > 0):
        raise DesignError("size measures must be strictly positive")
    certain = np.zeros(N, dtype=bool)
    for _ in range(N + 1):
        pi = np.ones(N)
        free = ~certain
        n_free = n - certain.sum()
        pi[free] = n_free * z[free] / z[free].sum()
        over = free & (pi >= 1.0)
        if not over.any():
            return pi
        certain |= over
    raise DesignError("PPS capping did not converge")


def draw_sample(pop: FinitePopulation, design: DesignSpec, seed) -> Sample:
    rng = np.random.default_rng(seed)
    N, n = pop.n_units, int(design.n)
    if n > N:
        raise DesignError(f"sample size {n} exceeds population size {N}")
    if design.kind == "srs":
        idx = np.sort(rng.choice(N, size=n, replace=False))
        pi = np.full(n, n / N)
    else:
        if pop.size_measure is None:
            raise DesignError("PPS design requires a size measure")
        pi_pop = pps_probabilities(pop.size_measure, n)
        idx = _systematic(pi_pop, rng)
        pi = pi_pop[idx]
    return Sample(idx, pop.y[idx], pop.x[idx], pi, design, N,
                  None if pop.domain is None else pop.domain[idx])


def _systematic(pi_pop: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Systematic PPS selection over a random permutation of the frame."""
    n = int(round(pi_pop.sum()))
    order = rng.permutation(pi_pop.size)
    cum = np.cumsum(pi_pop[order])
    cum[-1] = n  # guard the last boundary against rounding drift
    points = rng.uniform() + np.arange(n)
    hits = np.searchsorted(cum, points, side="right")
    return np.sort(order[hits])


# --------------------------------------------------------------------------
# Pairwise probabilities and the design quadratic form


def _srs_joint(n: int, N: int) -> float:
    if N < 2:
        return 1.0
    return n * (n - 1) / (N * (N - 1))


def pairwise_probability(sample: Sample, i: int, j: int) -> float:
    """Joint inclusion probability of sampled positions ``i`` and ``j``."""
    n = sample.n
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"sample position out of range: ({i}, {j}) with n={n}")
    if i == j:
        return float(sample.pi[i])
    if sample.design.pairwise == "exact_srs":
        return _srs_joint(sample.design.n, sample.pop_n)
    return float(sample.pi[i] * sample.pi[j])


def pairwise_matrix(sample: Sample) -> np.ndarray:
    """Dense matrix of ``Delta_ij / (pi_ij pi_i pi_j)`` built entrywise."""
    n = sample.n
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            pij = pairwise_probability(sample, i, j)
            if pij <= 0:
                raise DesignError(f"zero joint inclusion probability for pair ({i}, {j})")
            pi, pj = sample.pi[i], sample.pi[j]
            out[i, j] = (pij - pi * pj) / (pij * pi * pj)
    return out


def _require_variance_ok(sample: Sample):
    if sample.n < 2:
        raise DesignError("variance estimation needs at least two sampled units")
    if sample.design.pairwise == "exact_srs" and _srs_joint(sample.design.n, sample.pop_n) <= 0:
        raise DesignError("zero joint inclusion probability under the design")


def design_quadratic(sample: Sample, u: np.ndarray) -> np.ndarray:
    """``sum_ij Omega_ij u_i u_j^T`` for ``u`` of shape (n,) or (n, k).

    Returns a scalar for 1-d input and a k-by-k matrix otherwise.
    """
    _require_variance_ok(sample)
    pi = sample.pi
    u = np.asarray(u, dtype=float)
    vec = u.ndim == 1
    U = u[:, None] if vec else u
    diag = (1.0 - pi) / pi**2
    out = (U * diag[:, None]).T @ U
    if sample.design.pairwise == "exact_srs":
        pij = _srs_joint(sample.design.n, sample.pop_n)
        # off-diagonal weight is 1/(pi_i pi_j) - 1/pi_ij
        a = (U / pi[:, None]).sum(axis=0)
        s = U.sum(axis=0)
        out = out + (np.outer(a, a) - (U / pi[:, None]**2).T @ U
                     - (np.outer(s, s) - U.T @ U) / pij)
    if vec:
        return float(out[0, 0])
    return 0.5 * (out + out.T)


def design_quadratic_rows(sample: Sample, E: np.ndarray) -> np.ndarray:
    """Row-wise scalar quadratic forms for a (m, n) stack of residual vectors."""
    _require_variance_ok(sample)
    pi = sample.pi
    E = np.atleast_2d(E)
    diag = (1.0 - pi) / pi**2
    out = (E**2) @ diag
    if sample.design.pairwise == "exact_srs":
        pij = _srs_joint(sample.design.n, sample.pop_n)
        out = out + ((E @ (1.0 / pi))**2 - (E**2) @ (1.0 / pi**2)
                     - (E.sum(axis=1)**2 - (E**2).sum(axis=1)) / pij)
    return out


# --------------------------------------------------------------------------
# Estimators


def ht_mean(sample: Sample) -> float:
    return float(np.sum(sample.y / sample.pi) / sample.pop_n)


def hajek_mean(sample: Sample) -> float:
    w = 1.0 / sample.pi
    return float(np.sum(w * sample.y) / np.sum(w))


def _check_beta(sample: Sample, beta1) -> np.ndarray:
    beta1 = np.atleast_1d(np.asarray(beta1, dtype=float))
    if beta1.shape != (sample.p,):
        raise DataError(f"beta1 has shape {beta1.shape}, expected ({sample.p},)")
    return beta1


def greg_mean(sample: Sample, aux: AuxTotals, beta1) -> float:
    """Regression estimator ``Xbar' b + Hajek mean of (y - x' b)``."""
    beta1 = _check_beta(sample, beta1)
    aux.check(sample)
    w = 1.0 / sample.pi
    resid = sample.y - sample.x @ beta1
    return float(aux.xbar @ beta1 + np.sum(w * resid) / np.sum(w))


def greg_mean_rows(sample: Sample, aux: AuxTotals, B: np.ndarray) -> np.ndarray:
    """:func:`greg_mean` for every row of a (m, p) coefficient stack."""
    w = 1.0 / sample.pi
    resid = sample.y[None, :] - B @ sample.x.T
    return B @ aux.xbar + resid @ w / w.sum()


def residuals(sample: Sample, beta1, convention: ResidualConvention = "absorbed") -> np.ndarray:
    """Residuals ``y - x'b``, optionally centred at their Hajek mean.

    The ``absorbed`` convention subtracts the intercept implied by the
    regression estimator, which is what its linearisation carries.
    """
    beta1 = _check_beta(sample, beta1)
    e = sample.y - sample.x @ beta1
    if convention == "absorbed":
        w = 1.0 / sample.pi
        e = e - np.sum(w * e) / np.sum(w)
    elif convention != "raw":
        raise ConfigError(f"unknown residual convention {convention!r}")
    return e


def variance_e(sample: Sample, beta1, convention: ResidualConvention = "absorbed") -> float:
    e = residuals(sample, beta1, convention)
    return max(design_quadratic(sample, e), 0.0) / sample.pop_n**2


def variance_e_rows(sample: Sample, B: np.ndarray,
                    convention: ResidualConvention = "absorbed") -> np.ndarray:
    E = sample.y[None, :] - B @ sample.x.T
    if convention == "absorbed":
        w = 1.0 / sample.pi
        E = E - (E @ w / w.sum())[:, None]
    return np.maximum(design_quadratic_rows(sample, E), 0.0) / sample.pop_n**2


def ht_variance(sample: Sample) -> float:
    """Variance estimator of :func:`ht_mean`: the quadratic form in raw ``y``."""
    return max(design_quadratic(sample, sample.y), 0.0) / sample.pop_n**2


def domain_greg(sample: Sample, domain_id: int, aux: AuxTotals, beta0_h: float, beta1):
    """Domain regression estimator and its variance for domain ``domain_id``.

    ``aux`` holds the domain's own auxiliary means and ``pop_size`` (N_h).
    The double sum runs over sampled units of the domain only, with the
    design's pairwise policy.
    """
    if sample.domain is None:
        raise DataError("sample carries no domain labels")
    if aux.pop_size is None:
        raise DataError(f"population size of domain {domain_id} is unknown")
    beta1 = _check_beta(sample, beta1)
    aux.check(sample)
    mask = sample.domain == domain_id
    if not mask.any():
        raise DataError(f"no sampled units in domain {domain_id}")
    Nh = aux.pop_size
    pi = sample.pi[mask]
    e = sample.y[mask] - beta0_h - sample.x[mask] @ beta1
    est = beta0_h + aux.xbar @ beta1 + np.sum(e / pi) / Nh
    var = max(design_quadratic(_domain_view(sample, mask), e), 0.0) / Nh**2
    return float(est), float(var)


def _domain_view(sample: Sample, mask) -> Sample:
    # keeps the overall design (n, N) so ExactSRS joint probabilities are unchanged
    return sample.subset(mask)
