import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from abreg.errors import DataError, DesignError
from abreg.survey import (AuxTotals, DesignSpec, FinitePopulation, Sample, design_quadratic,
                          design_quadratic_rows, domain_greg, draw_sample, greg_mean,
                          greg_mean_rows, hajek_mean, ht_mean, ht_variance, pairwise_matrix,
                          pairwise_probability, pps_probabilities, residuals, variance_e,
                          variance_e_rows)

from conftest import linear_population, make_sample


# -- sampling ---------------------------------------------------------------

def test_census_srs_takes_every_unit():
    pop = FinitePopulation([1.0, 2.0, 3.0, 4.0], np.zeros((4, 1)))
    s = draw_sample(pop, DesignSpec.srs(4), 0)
    assert list(s.indices) == [0, 1, 2, 3]
    assert np.all(s.pi == 1.0)
    assert ht_mean(s) == 2.5


def test_equal_sizes_give_srs_probabilities():
    pi = pps_probabilities(np.full(1000, 3.7), 100)
    np.testing.assert_allclose(pi, 0.1, rtol=0, atol=1e-15)


def test_pps_probabilities_without_capping():
    z = np.arange(1, 11, dtype=float)
    pi = pps_probabilities(z, 3)
    np.testing.assert_allclose(pi, 3 * z / 55, rtol=1e-14)
    assert abs(pi.sum() - 3) < 1e-12


def test_pps_probabilities_with_capping():
    # hand fixed point: the big unit is certain, one draw spread over four
    pi = pps_probabilities([1, 1, 1, 1, 20], 2)
    np.testing.assert_allclose(pi, [0.25, 0.25, 0.25, 0.25, 1.0], atol=1e-15)


def test_pps_rejects_bad_inputs():
    with pytest.raises(DesignError):
        pps_probabilities([1.0, 0.0, 2.0], 1)
    with pytest.raises(DesignError):
        pps_probabilities([1.0, 2.0], 3)
    pop = FinitePopulation(np.ones(5), np.zeros((5, 1)))
    with pytest.raises(DesignError):
        draw_sample(pop, DesignSpec.pps(2), 0)
    with pytest.raises(DesignError):
        draw_sample(pop, DesignSpec.srs(6), 0)


@given(st.lists(st.floats(0.01, 100), min_size=2, max_size=60), st.data())
def test_pps_first_order_calibration(z, data):
    n = data.draw(st.integers(1, len(z)))
    pi = pps_probabilities(z, n)
    assert abs(pi.sum() - n) < 1e-9
    assert np.all((pi > 0) & (pi <= 1))


def test_pps_inclusion_frequencies_match_probabilities():
    rng = np.random.default_rng(5)
    z = rng.uniform(0.5, 3.0, size=40)
    pop = FinitePopulation(np.zeros(40), np.zeros((40, 1)), size_measure=z)
    pi = pps_probabilities(z, 8)
    counts = np.zeros(40)
    reps = 20000
    for r in range(reps):
        s = draw_sample(pop, DesignSpec.pps(8), r)
        assert s.n == 8
        counts[s.indices] += 1
    se = np.sqrt(pi * (1 - pi) / reps)
    assert np.all(np.abs(counts / reps - pi) <= 4 * se + 1e-12)


def test_draw_sample_is_deterministic():
    pop = linear_population(500)
    a = draw_sample(pop, DesignSpec.srs(50), 42)
    b = draw_sample(pop, DesignSpec.srs(50), 42)
    assert np.array_equal(a.indices, b.indices)
    c = draw_sample(pop.with_size_measure(np.exp(pop.x[:, 0] / 4)), DesignSpec.pps(50), 42)
    d = draw_sample(pop.with_size_measure(np.exp(pop.x[:, 0] / 4)), DesignSpec.pps(50), 42)
    assert np.array_equal(c.indices, d.indices)


def test_sample_invariants():
    with pytest.raises(DesignError):
        make_sample([1.0, 2.0], pi=[0.5, 1.5], N=4)
    with pytest.raises(DataError):
        Sample([0, 0], [1.0, 2.0], np.zeros((2, 1)), [0.5, 0.5], DesignSpec.srs(2), 4)
    with pytest.raises(DataError):
        Sample([0, 1], [1.0, 2.0, 3.0], np.zeros((2, 1)), [0.5, 0.5], DesignSpec.srs(2), 4)


# -- pairwise probabilities -------------------------------------------------

def test_pairwise_exact_srs():
    s = make_sample(np.arange(5.0), N=10)
    assert pairwise_probability(s, 0, 3) == pytest.approx(2 / 9, abs=1e-15)
    assert pairwise_probability(s, 2, 2) == pytest.approx(0.5)


def test_pairwise_independence_product():
    s = make_sample([1.0, 2.0], pi=[0.2, 0.3], N=10)
    assert pairwise_probability(s, 0, 1) == pytest.approx(0.06, abs=1e-15)
    with pytest.raises(IndexError):
        pairwise_probability(s, 0, 2)


@given(arrays(float, 6, elements=st.floats(0.05, 1.0)))
def test_pairwise_symmetry(pi):
    s = make_sample(np.zeros(6), pi=pi, N=40, design=DesignSpec("pps", 6, "independence"))
    for i, j in itertools.combinations(range(6), 2):
        assert pairwise_probability(s, i, j) == pairwise_probability(s, j, i)


# -- point estimators -------------------------------------------------------

def test_ht_hand_values():
    assert ht_mean(make_sample([3.0, 6.0], pi=[2 / 3, 2 / 3], N=3)) == pytest.approx(4.5)


def test_hajek_hand_values():
    assert hajek_mean(make_sample([1.0, 2.0], pi=[0.1, 0.4], N=12)) == pytest.approx(1.2)
    assert hajek_mean(make_sample([4.0, 1.0, 7.0], N=30)) == pytest.approx(4.0)
    assert hajek_mean(make_sample([2.5] * 3, pi=[0.1, 0.3, 0.9], N=30)) == pytest.approx(2.5)


@given(arrays(float, 5, elements=st.floats(0.05, 1.0)), st.floats(0.1, 0.99))
def test_hajek_scale_invariance(pi, c):
    y = np.arange(5.0)
    a = hajek_mean(make_sample(y, pi=pi, N=100, design=DesignSpec("pps", 5, "independence")))
    b = hajek_mean(make_sample(y, pi=pi * c, N=500, design=DesignSpec("pps", 5, "independence")))
    assert a == pytest.approx(b, rel=1e-12)


def test_ht_unbiased_over_repeated_srs():
    pop = linear_population(400, p=2, seed=3)
    est = np.array([ht_mean(draw_sample(pop, DesignSpec.srs(15), r)) for r in range(10_000)])
    se = est.std(ddof=1) / np.sqrt(est.size)
    assert abs(est.mean() - pop.ybar) <= 3 * se


def test_greg_reductions():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 2))
    pi = rng.uniform(0.2, 0.9, 8)
    s = make_sample(rng.normal(size=8), x, pi, N=40)
    aux = AuxTotals([0.3, -0.2])
    assert greg_mean(s, aux, np.zeros(2)) == hajek_mean(s)
    b = np.array([1.5, -2.0])
    exact = make_sample(x @ b, x, pi, N=40)
    assert greg_mean(exact, aux, b) == pytest.approx(aux.xbar @ b, abs=1e-14)
    with pytest.raises(DataError):
        greg_mean(s, aux, np.zeros(3))


def test_greg_p1_toy():
    # y - x has Hajek mean 0.5 under these weights
    x = np.array([1.0, 3.0])
    s = make_sample(x + np.array([0.0, 1.0]), x, pi=[0.5, 0.5], N=4)
    assert greg_mean(s, AuxTotals([2.0]), [1.0]) == pytest.approx(2.5)


@given(arrays(float, 2, elements=st.floats(-5, 5)), arrays(float, 2, elements=st.floats(-5, 5)),
       st.floats(-3, 3))
def test_greg_affine_in_beta(b1, b2, t):
    rng = np.random.default_rng(1)
    s = make_sample(rng.normal(size=6), rng.normal(size=(6, 2)), rng.uniform(0.2, 0.9, 6), N=30)
    aux = AuxTotals([0.1, 0.7])
    lhs = greg_mean(s, aux, t * b1 + (1 - t) * b2)
    rhs = t * greg_mean(s, aux, b1) + (1 - t) * greg_mean(s, aux, b2)
    assert lhs == pytest.approx(rhs, abs=1e-9)
    np.testing.assert_allclose(greg_mean_rows(s, aux, np.stack([b1, b2])),
                               [greg_mean(s, aux, b1), greg_mean(s, aux, b2)], atol=1e-12)


# -- variance estimators ----------------------------------------------------

def _double_sum(sample, e):
    """Brute-force double sum over all sampled pairs (the oracle)."""
    return e @ pairwise_matrix(sample) @ e / sample.pop_n**2


def test_variance_zero_residuals():
    x = np.array([[1.0], [2.0], [4.0]])
    s = make_sample(3 * x[:, 0] + 1, x, N=10)
    assert variance_e(s, [3.0]) == pytest.approx(0.0, abs=1e-28)


def test_variance_scales_quadratically():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(7, 1))
    y = rng.normal(size=7)
    pi = rng.uniform(0.2, 0.9, 7)
    s1 = make_sample(y, x, pi, N=30)
    s2 = make_sample(2 * y, x, pi, N=30)
    assert variance_e(s2, [0.6]) == pytest.approx(4 * variance_e(s1, [0.3]), rel=1e-12)
    assert ht_variance(make_sample(3 * y, x, pi, N=30)) == pytest.approx(9 * ht_variance(s1), rel=1e-12)


def test_fast_quadratic_matches_brute_force():
    rng = np.random.default_rng(4)
    for design, pi in [(DesignSpec.srs(9), np.full(9, 9 / 25)),
                       (DesignSpec("pps", 9, "independence"), rng.uniform(0.1, 0.9, 9))]:
        s = make_sample(rng.normal(size=9), rng.normal(size=(9, 2)), pi, N=25, design=design)
        for conv in ("absorbed", "raw"):
            e = residuals(s, [0.4, -1.1], conv)
            assert variance_e(s, [0.4, -1.1], conv) == pytest.approx(_double_sum(s, e), rel=1e-12)
        U = rng.normal(size=(9, 3))
        np.testing.assert_allclose(design_quadratic(s, U), U.T @ pairwise_matrix(s) @ U,
                                   rtol=1e-11, atol=1e-12)
        E = rng.normal(size=(4, 9))
        np.testing.assert_allclose(design_quadratic_rows(s, E),
                                   np.einsum("ij,jk,ik->i", E, pairwise_matrix(s), E), rtol=1e-11)
        B = rng.normal(size=(4, 2))
        np.testing.assert_allclose(variance_e_rows(s, B), [variance_e(s, b) for b in B], rtol=1e-11)


def test_srs_closed_form_exhaustive():
    # every SRS of size 2 from N=5 (and size 3 from N=6): the double sum equals (1-f) s_e^2 / n
    rng = np.random.default_rng(6)
    for N, n in [(5, 2), (6, 3)]:
        y = rng.normal(size=N)
        x = rng.normal(size=(N, 1))
        for idx in itertools.combinations(range(N), n):
            idx = list(idx)
            s = Sample(idx, y[idx], x[idx], np.full(n, n / N), DesignSpec.srs(n), N)
            e = residuals(s, [0.7])
            closed = (1 - n / N) * np.var(e, ddof=1) / n
            assert variance_e(s, [0.7]) == pytest.approx(closed, abs=1e-12)
            assert _double_sum(s, e) == pytest.approx(closed, abs=1e-12)
            assert ht_variance(s) == pytest.approx((1 - n / N) * np.var(y[idx], ddof=1) / n,
                                                   abs=1e-12)


def test_ht_variance_constant_y_srs():
    s = make_sample(np.full(6, 3.3), N=20)
    assert ht_variance(s) == pytest.approx(0.0, abs=1e-12)


def test_ht_variance_unbiased_by_enumeration():
    # E_design[ht_variance] equals the exact design variance of ht_mean
    rng = np.random.default_rng(7)
    N, n = 6, 3
    y = rng.normal(size=N)
    ests, vhats = [], []
    for idx in itertools.combinations(range(N), n):
        s = Sample(list(idx), y[list(idx)], np.zeros((n, 1)), np.full(n, n / N),
                   DesignSpec.srs(n), N)
        ests.append(ht_mean(s))
        vhats.append(ht_variance(s))
    assert np.mean(vhats) == pytest.approx(np.var(ests), abs=1e-12)


def test_variance_needs_two_units():
    s = make_sample([1.0], N=10)
    with pytest.raises(DesignError):
        ht_variance(s)


@given(arrays(float, 8, elements=st.floats(-1e3, 1e3)),
       arrays(float, 8, elements=st.floats(0.02, 1.0)), st.booleans())
def test_variance_nonnegative(e, pi, exact):
    if exact:
        s = make_sample(e, N=50)
    else:
        s = make_sample(e, pi=pi, N=50, design=DesignSpec("pps", 8, "independence"))
    assert design_quadratic(s, e) >= -1e-9 * max(1.0, float(e @ e)) / pi.min()**2
    assert variance_e(s, np.zeros(0)) >= 0


# -- domains ----------------------------------------------------------------

def test_domain_greg_hand_expansion():
    # two domains of N_h = 3 with two sampled units each; SRS n=4 from N=6
    y = np.array([1.0, 3.0, 2.0, 5.0])
    x = np.array([[0.5], [1.0], [2.0], [1.5]])
    s = make_sample(y, x, N=6, domain=[0, 0, 1, 1])
    est, var = domain_greg(s, 0, AuxTotals([0.8], None, 3), 0.2, [1.0])
    # residuals (0.3, 1.8); pi = 2/3; pi_ij = 0.4; off-diagonal weight -1/4
    assert est == pytest.approx(2.05, abs=1e-14)
    assert var == pytest.approx(0.2475, abs=1e-14)


def test_single_domain_reduces_to_greg():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(10, 2))
    y = rng.normal(size=10)
    pi = rng.uniform(0.2, 0.8, 10)
    s = make_sample(y, x, pi, N=30, domain=np.zeros(10, int))
    aux = AuxTotals([0.2, 0.5], None, 30)
    b = np.array([0.3, -0.4])
    b0 = float(np.sum((y - x @ b) / pi) / np.sum(1 / pi))  # absorbed intercept
    est, var = domain_greg(s, 0, aux, b0, b)
    # absorbed residuals have zero weighted sum, so N_h vs N-hat does not matter
    assert est == pytest.approx(greg_mean(s, aux, b), abs=1e-12)
    assert var == pytest.approx(variance_e(s, b), rel=1e-12)


def test_domain_errors():
    s = make_sample([1.0, 2.0, 3.0], [[1.0], [2.0], [3.0]], N=9, domain=[0, 0, 0])
    with pytest.raises(DataError):
        domain_greg(s, 1, AuxTotals([1.0], None, 3), 0.0, [1.0])
    with pytest.raises(DataError):
        domain_greg(s, 0, AuxTotals([1.0]), 0.0, [1.0])
    with pytest.raises(DataError):
        domain_greg(make_sample([1.0, 2.0], [[1.0], [2.0]], N=9), 0,
                    AuxTotals([1.0], None, 3), 0.0, [1.0])
    z = make_sample([1.0, 1.0, 3.0], [[0.0], [0.0], [2.0]], N=9, domain=[0, 0, 1])
    assert domain_greg(z, 0, AuxTotals([0.0], None, 4), 1.0, [1.0])[1] == 0.0
