import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from lharq.fading import (
    DiscreteSnrLaw,
    FadingParams,
    SnrPair,
    bessel_j0,
    conditional_cdf,
    conditional_cdf_kernel,
    correlation_factor,
    marcum_q1,
    marcum_q1_complement,
    sample_snr_pair,
    sample_snr_pairs,
)

# reference values from the mpmath oracles below, frozen
Q1_1_1 = 0.7328798037968202
Q1_2_3 = 0.21436208816264946
J0_1 = 0.7651976865579666


def q1_series(a, b, dps=40):
    """exp(-(a^2+b^2)/2) * sum_k (a/b)^k I_k(ab), in extended precision."""
    with mp.workdps(dps):
        a, b = mp.mpf(a), mp.mpf(b)
        if b == 0:
            return mp.mpf(1)
        s = mp.nsum(lambda k: (a / b) ** k * mp.besseli(k, a * b), [0, mp.inf])
        return s * mp.exp(-(a * a + b * b) / 2)


def cdf_disk(threshold, est, corr, avg, dps=20):
    """Pr{|h~|^2 < t | |h|^2 = est} by 2-D quadrature of the complex Gaussian
    density of h~ over the disc of radius sqrt(t)."""
    with mp.workdps(dps):
        var = (1 - mp.mpf(corr)) * avg
        mu = mp.sqrt(corr * est)
        f = lambda r, th: r / (mp.pi * var) * mp.exp(-(r * r + mu * mu - 2 * r * mu * mp.cos(th)) / var)
        return mp.quad(f, [0, mp.sqrt(threshold)], [0, mp.pi, 2 * mp.pi])


def test_frozen_values_match_oracles():
    assert abs(float(q1_series(1, 1)) - Q1_1_1) < 1e-15
    assert abs(float(q1_series(2, 3)) - Q1_2_3) < 1e-15
    with mp.workdps(30):
        assert abs(float(mp.besselj(0, 1)) - J0_1) < 1e-16


def test_marcum_spot_values():
    assert abs(marcum_q1(1.0, 1.0) - Q1_1_1) <= 1e-9
    assert abs(marcum_q1(2.0, 3.0) - Q1_2_3) <= 1e-9


def test_marcum_edges():
    assert marcum_q1(0.0, 0.0) == pytest.approx(1.0, abs=1e-15)
    assert marcum_q1(3.0, 0.0) == pytest.approx(1.0, abs=1e-15)
    b = np.linspace(0.1, 8, 20)
    np.testing.assert_allclose(marcum_q1(0.0, b), np.exp(-b * b / 2), atol=1e-13)
    assert marcum_q1(40.0, 1.0) == pytest.approx(1.0, abs=1e-15)
    assert marcum_q1(1.0, 40.0) < 1e-100


def test_marcum_grid_against_series():
    a = np.linspace(0.0, 12.0, 10)
    b = np.linspace(0.05, 14.0, 10)
    A, B = np.meshgrid(a, b)
    got = marcum_q1(A, B)
    got_c = marcum_q1_complement(A, B)
    ref = np.array([[float(q1_series(x, y)) for x, y in zip(ra, rb)] for ra, rb in zip(A, B)])
    assert np.max(np.abs(got - ref)) <= 1e-9
    assert np.max(np.abs(got_c - (1 - ref))) <= 1e-9


@given(st.floats(0, 30), st.floats(0, 30))
def test_marcum_sums_to_one(a, b):
    assert abs(marcum_q1(a, b) + marcum_q1_complement(a, b) - 1.0) <= 1e-9


@given(st.floats(0, 20), st.floats(0, 20), st.floats(0.01, 2))
def test_marcum_monotone(a, b, step):
    # increasing in a, decreasing in b
    assert marcum_q1(a + step, b) >= marcum_q1(a, b) - 1e-12
    assert marcum_q1(a, b + step) <= marcum_q1(a, b) + 1e-12


def test_bessel_j0():
    x = np.linspace(0, 30, 61)
    with mp.workdps(30):
        ref = np.array([float(mp.besselj(0, v)) for v in x])
    assert np.max(np.abs(bessel_j0(x) - ref)) <= 1e-10
    assert abs(bessel_j0(1.0) - J0_1) <= 1e-10


@given(st.floats(0, 1e3))
def test_correlation_factor_range(x):
    d = correlation_factor(x)
    assert 0.0 <= d <= 1.0


def test_correlation_factor_values():
    assert correlation_factor(0.0) == 1.0
    assert correlation_factor(0.05) == pytest.approx(float(mp.besselj(0, 2 * mp.pi * 0.05)) ** 2,
                                                     abs=1e-14)
    with pytest.raises(ValueError):
        correlation_factor(-0.1)


def test_params_validation():
    with pytest.raises(ValueError):
        FadingParams(0.0, 0.5)
    with pytest.raises(ValueError):
        FadingParams(1.0, 1.5)
    with pytest.raises(ValueError):
        FadingParams(math.inf, 0.5)
    with pytest.raises(ValueError):
        SnrPair(-1.0, 1.0)
    p = FadingParams.from_db(20.0, 0.9)
    assert p.avg_snr == pytest.approx(100.0)
    assert p.avg_snr_db == pytest.approx(20.0)
    assert FadingParams.from_fd_tau(1.0, 0.05).corr == pytest.approx(correlation_factor(0.05))


@pytest.mark.parametrize("t,est,corr,avg", [
    (5.0, 8.0, 0.95, 10.0),
    (1.0, 0.5, 0.5, 2.0),
    (50.0, 40.0, 0.9, 30.0),
    (0.2, 3.0, 0.99, 1.0),
    (12.0, 0.0, 0.3, 10.0),
])
def test_conditional_cdf_against_disc_quadrature(t, est, corr, avg):
    ref = float(cdf_disk(t, est, corr, avg))
    assert abs(conditional_cdf(t, est, FadingParams(avg, corr)) - ref) <= 1e-6


def test_conditional_cdf_frozen():
    # 1-D integral of the conditional density, mpmath, 25 digits
    assert conditional_cdf(5.0, 8.0, FadingParams(10.0, 0.95)) == pytest.approx(
        0.1265808061757076554925799, abs=1e-12)


def test_conditional_cdf_limits():
    p = FadingParams(10.0, 0.9)
    assert conditional_cdf(0.0, 5.0, p) == pytest.approx(0.0, abs=1e-15)
    assert conditional_cdf(1e4, 5.0, p) == pytest.approx(1.0, abs=1e-12)
    # corr = 0: experienced SNR is exponential with mean avg_snr
    p0 = FadingParams(10.0, 0.0)
    assert conditional_cdf(7.0, 3.0, p0) == pytest.approx(1 - math.exp(-0.7), abs=1e-12)
    with pytest.raises(ValueError):
        conditional_cdf(1.0, 1.0, FadingParams(10.0, 1.0))
    with pytest.raises(ValueError):
        conditional_cdf(-1.0, 1.0, p)


@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 0.999), st.floats(0.1, 100))
def test_conditional_cdf_kernel_matches(t, est, corr, avg):
    a = conditional_cdf_kernel(t, est, corr, avg)
    b = conditional_cdf(t, est, FadingParams(avg, corr))
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= 1.0


def test_conditional_cdf_kernel_indicator():
    assert conditional_cdf_kernel(5.0, 4.0, 1.0, 10.0) == 1.0
    assert conditional_cdf_kernel(5.0, 6.0, 1.0, 10.0) == 0.0


def test_conditional_cdf_tends_to_indicator():
    p = FadingParams(10.0, 1 - 1e-6)
    t = 10.0
    est = t * 10 ** (np.array([-1.0, -0.5, 0.5, 1.0]) / 10)
    np.testing.assert_allclose(conditional_cdf(t, est, p), [1, 1, 0, 0], atol=1e-6)


def test_marginal_means():
    n, g = 10**6, 10.0
    est, exp = sample_snr_pairs(FadingParams(g, 0.9), n, np.random.default_rng(3))
    sigma = g / math.sqrt(n)
    assert abs(est.mean() - g) < 3 * sigma
    assert abs(exp.mean() - g) < 3 * sigma
    assert np.all(est >= 0) and np.all(exp >= 0)


def test_conditional_histogram():
    # exp given est in a thin slice follows the Marcum law
    p = FadingParams(10.0, 0.8)
    est, exp = sample_snr_pairs(p, 2 * 10**6, np.random.default_rng(5))
    g0, eps = 8.0, 0.2
    sel = exp[(est >= g0) & (est < g0 + eps)]
    edges = np.array([0, 2, 4, 6, 8, 10, 14, 20, np.inf])
    # average the conditional cdf over the slice to account for its width
    mid = np.linspace(g0, g0 + eps, 21)
    w = np.exp(-mid / p.avg_snr)
    cdf = (conditional_cdf(np.minimum(edges, 1e6)[:, None], mid[None, :], p) * w).sum(axis=1) / w.sum()
    probs = np.diff(cdf)
    counts = np.histogram(sel, edges)[0]
    n = sel.size
    tol = 3 * np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) <= tol + 1)


def test_sampler_seeded_and_pure():
    p = FadingParams(5.0, 0.7)
    a = sample_snr_pairs(p, 100, np.random.default_rng(1))
    b = sample_snr_pairs(p, 100, np.random.default_rng(1))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    pair = sample_snr_pair(p, np.random.default_rng(2))
    assert pair.est >= 0 and pair.exp >= 0


def test_perfect_correlation_copies():
    est, exp = sample_snr_pairs(FadingParams(5.0, 1.0), 1000, np.random.default_rng(0))
    np.testing.assert_array_equal(est, exp)


def test_discrete_law():
    law = DiscreteSnrLaw((1.0, 1.0, 4.0), (0.5, 2.0, 3.0), (0.25, 0.25, 0.5))
    assert law.size == 3
    assert law.conditional_cdf(1.0, 1.0) == pytest.approx(0.5)
    assert law.conditional_cdf(10.0, 4.0) == 1.0
    est, exp = law.sample(10**5, np.random.default_rng(0))
    assert abs(np.mean(est == 4.0) - 0.5) < 0.01
    with pytest.raises(ValueError):
        DiscreteSnrLaw((1.0,), (1.0,), (0.5,))
    with pytest.raises(ValueError):
        law.conditional_cdf(1.0, 2.0)
