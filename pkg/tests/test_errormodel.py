import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lharq.errormodel import (
    PER_FLOOR,
    ConfigurationError,
    EmpiricalModel,
    TableValidationError,
    ThresholdModel,
    backtrack_ratio_kernel,
    decide_backtrack_error,
    decide_error,
    direct_per_kernel,
    expected_per,
    ir_accumulated_error,
    ir_error_prob_kernel,
    joint_per_kernel,
    load_per_table,
    synthetic_per_table,
)
from lharq.fading import FadingParams, sample_snr_pairs
from lharq.infotheory import mi, mi_inverse

RATES = (1.0, 2.0, 3.0)


def small_table():
    x = np.array([0.0, 5.0, 10.0])
    direct = {1.0: (x, [1.0, 0.1, 0.001]), 2.0: (x + 3, [1.0, 0.2, 0.01])}
    joint = {(1.0, 0.5): (x, [0.5, 0.01, 1e-5]), (2.0, 1.0): (x + 3, [0.5, 0.02, 1e-4])}
    return EmpiricalModel(direct, joint)


# ---- threshold model ---------------------------------------------------------

def test_threshold_decisions_are_deterministic():
    m = ThresholdModel(16)
    g = mi_inverse(2.0, 16)
    assert not decide_error(m, g, 2.0)
    assert decide_error(m, g * 0.99, 2.0)
    assert m.per(g * 0.99, 2.0) == 1.0 and m.per(g, 2.0) == 0.0
    assert decide_backtrack_error(m, g * 0.5, 2.0, 0.0)
    assert not decide_backtrack_error(m, g * 0.5, 2.0, 2.0 - mi(g * 0.5))


@given(st.floats(0.01, 1e3), st.floats(0.1, 3.9), st.floats(0, 1), st.floats(0, 1))
def test_backtrack_monotone_in_mix_rate(g, r, a, b):
    m = ThresholdModel(16)
    lo, hi = sorted((a * r, b * r))
    # raising the mixing rate never turns a success into a failure
    if not decide_backtrack_error(m, g, r, lo):
        assert not decide_backtrack_error(m, g, r, hi)


def test_mix_rate_bounds():
    m = ThresholdModel()
    with pytest.raises(ValueError):
        m.backtrack_per(1.0, 2.0, 2.5)
    with pytest.raises(ValueError):
        decide_backtrack_error(m, 1.0, 2.0, -0.1)


def test_ir_accumulation():
    m = ThresholdModel(16)
    g = mi_inverse(1.5, 16)
    assert ir_accumulated_error([g], 2.0, m)
    assert not ir_accumulated_error([g, g], 3.0, m)
    assert ir_accumulated_error([g, g], 3.1, m)
    with pytest.raises(ValueError):
        ir_accumulated_error([], 1.0, m)


def test_expected_per_threshold_perfect_csi():
    p = FadingParams(10.0, 1.0)
    g = mi_inverse(2.0, 16)
    assert expected_per(p, g, 2.0) == 0.0
    assert expected_per(p, 0.9 * g, 2.0) == 1.0
    assert expected_per(FadingParams(10.0, 0.5), 3.0, 0.0) == 0.0


def test_expected_per_converges_to_indicator():
    rate = 2.5
    gth_db = 10 * math.log10(mi_inverse(rate, 16))
    p = FadingParams(10.0, 1 - 1e-6)
    x = np.linspace(gth_db - 5, gth_db + 5, 401)
    x = x[np.abs(x - gth_db) > 0.1]
    got = expected_per(p, 10 ** (x / 10), rate)
    ind = (x < gth_db).astype(float)
    assert np.max(np.abs(got - ind)) < 0.02


def test_expected_per_vs_sampler():
    # averaging the conditional PER over the estimate recovers the error
    # frequency of the full sampler
    p = FadingParams(10.0, 0.9)
    rate = 2.0
    n = 10**6
    est, exp = sample_snr_pairs(p, n, np.random.default_rng(9))
    errs = mi(exp, 16) < rate
    cond = expected_per(p, est, rate)
    sd = math.sqrt(errs.mean() * (1 - errs.mean()) / n)
    assert abs(errs.mean() - cond.mean()) <= 3 * sd


def test_expected_per_empirical_vs_sampler():
    model = synthetic_per_table(RATES)
    p = FadingParams(10.0, 0.9)
    n = 4 * 10**5
    rng = np.random.default_rng(10)
    est, exp = sample_snr_pairs(p, n, rng)
    freq = (rng.random(n) < model.per(exp, 2.0)).mean()
    # the conditional average is smooth, so fewer estimates suffice
    cond = expected_per(p, est[:4000], 2.0, model)
    sd = math.hypot(math.sqrt(freq * (1 - freq) / n), cond.std() / math.sqrt(cond.size))
    assert abs(freq - cond.mean()) <= 3 * sd


def test_expected_per_empirical_perfect_csi():
    model = small_table()
    assert expected_per(FadingParams(10.0, 1.0), 10 ** 0.5, 1.0, model) == pytest.approx(0.1)


# ---- empirical tables --------------------------------------------------------

def test_interpolation_is_log_linear_and_clamped():
    m = small_table()
    assert m.per(10 ** 0.25, 1.0) == pytest.approx(math.sqrt(0.1), rel=1e-12)
    assert m.per(10 ** -0.1, 1.0) == 1.0
    assert m.per(10 ** 1.5, 1.0) == PER_FLOOR
    assert m.per(0.0, 1.0) == 1.0
    assert m.joint_per(10 ** 0.5, 1.0, 0.5) == pytest.approx(0.01)
    assert m.joint_per(10 ** 0.5, 1.0, 0.0) == m.per(10 ** 0.5, 1.0)
    assert m.backtrack_per(10 ** 0.5, 1.0, 0.5) == pytest.approx(0.1)


def test_backtrack_ratio_ignores_the_floor():
    # far above the knee the joint curve sits far below PER_FLOOR; the
    # conditional ratio must follow the curves, not floor / direct
    m = synthetic_per_table((2.25,))
    g = 10 ** 1.3
    assert m.per(g, 2.25) > PER_FLOOR
    assert m.joint_per(g, 2.25, 2.25 / 4) == PER_FLOOR
    expect = 0.0825  # shape of the curves at their mid-range, unaffected by SNR
    assert m.backtrack_per(g, 2.25, 2.25 / 4) == pytest.approx(expect, abs=1e-3)
    k = m.kernel_args()
    for x_db in (-20.0, 5.0, 10.0, 13.0, 30.0, 60.0):
        for q in (2.25 / 16, 2.25 / 4, 2.25):
            assert backtrack_ratio_kernel(k, 10 ** (x_db / 10), 2.25, q) == pytest.approx(
                m.backtrack_per(10 ** (x_db / 10), 2.25, q), rel=1e-12, abs=1e-300)


def test_lookup_errors():
    m = small_table()
    with pytest.raises(ConfigurationError):
        m.per(1.0, 1.5)
    with pytest.raises(ConfigurationError):
        m.joint_per(1.0, 1.0, 0.25)
    with pytest.raises(ValueError):
        m.joint_per(1.0, 1.0, 1.5)


@pytest.mark.parametrize("direct,joint,word", [
    ({1.0: ([0, 1, 2], [1.0, 0.5, 0.6])}, {}, "non-increasing"),
    ({1.0: ([0, 1, 2], [1.0, 1.5, 0.1])}, {}, "outside"),
    ({1.0: ([0, 1, 1], [1.0, 0.5, 0.1])}, {}, "duplicate"),
    ({1.0: ([0, 1, 2], [1.0, 0.5, 0.1])}, {(1.0, 0.5): ([0, 1, 2], [1.0, 0.6, 0.1])},
     "exceeds"),
    ({1.0: ([0, 1, 2], [1.0, 0.5, 0.1])}, {(2.0, 0.5): ([0, 1, 2], [1.0, 0.5, 0.1])},
     "no direct"),
    ({1.0: ([0, 1, 2], [1.0, 0.5, 0.1])},
     {(1.0, 0.25): ([0, 1, 2], [0.5, 0.2, 0.01]), (1.0, 0.5): ([0, 1, 2], [0.5, 0.3, 0.01])},
     "increases"),
])
def test_validation_rejects(direct, joint, word):
    with pytest.raises(TableValidationError, match=word):
        EmpiricalModel(direct, joint)


def test_csv_round_trip_is_exact():
    m = synthetic_per_table(RATES, divisor=4)
    text = m.to_csv()
    assert text.startswith("kind,rate,mix_rate,snr_db,prob\n")
    back = load_per_table(io.StringIO(text))
    assert back.to_csv() == text
    assert back.rates == m.rates
    assert back.mix_rates(2.0) == m.mix_rates(2.0)


def test_csv_rejects_bad_files():
    with pytest.raises(TableValidationError):
        load_per_table("a,b\n1,2\n")
    with pytest.raises(TableValidationError, match="line 2"):
        load_per_table("kind,rate,mix_rate,snr_db,prob\ndirect,1.0,,x,0.5\n")
    with pytest.raises(TableValidationError, match="unknown kind"):
        load_per_table("kind,rate,mix_rate,snr_db,prob\nother,1.0,,1,0.5\n")


def test_synthetic_table_shape():
    m = synthetic_per_table(RATES, divisor=16, gap_db=1.0, mix_shift=0.4)
    for r in RATES:
        g = mi_inverse(r, 16)
        # the code needs more SNR than the MI threshold
        assert m.per(g, r) > 0.9
        assert m.per(g * 10 ** 0.2, r) < 0.5
        rhos = m.mix_rates(r)
        assert len(rhos) == 16
        # a smaller backtrack gain than threshold decoding: at the SNR where the
        # threshold decoder would just succeed with mixing rate rho, the
        # synthetic joint probability is still large
        rho = rhos[7]
        gb = mi_inverse(r - rho, 16)
        assert m.joint_per(gb, r, rho) > 0.5
        x = np.linspace(-10, 40, 200)
        assert np.all(m.joint_per(10 ** (x / 10), r, rho) <= m.per(10 ** (x / 10), r) + 1e-15)


# ---- kernels agree with the object methods ----------------------------------

@given(st.floats(1e-3, 1e4), st.sampled_from(RATES), st.integers(0, 16))
def test_kernels_match_methods(g, r, j):
    m = synthetic_per_table(RATES)
    k = m.kernel_args()
    assert direct_per_kernel(k, g, r) == pytest.approx(m.per(g, r), rel=1e-12)
    rho = j * r / 16
    if j:
        assert joint_per_kernel(k, g, r, rho) == pytest.approx(m.joint_per(g, r, rho), rel=1e-12)
    t = ThresholdModel(16)
    tk = t.kernel_args()
    assert direct_per_kernel(tk, g, r) == t.per(g, r)
    assert joint_per_kernel(tk, g, r, rho) == float(mi(g) + 1e-12 < r - rho)


def test_ir_error_prob_kernel():
    t = ThresholdModel(16).kernel_args()
    assert ir_error_prob_kernel(t, 2.0, 2.0) == 0.0
    assert ir_error_prob_kernel(t, 1.9, 2.0) == 1.0
    m = synthetic_per_table(RATES)
    k = m.kernel_args()
    # the empirical IR mapping reads the curve at the SNR whose MI equals the sum
    g = mi_inverse(1.7, 16)
    assert ir_error_prob_kernel(k, 1.7, 2.0) == pytest.approx(m.per(g, 2.0), rel=1e-9)
    assert ir_error_prob_kernel(k, 5.0, 3.0) == PER_FLOOR


def test_empirical_decisions_use_rng():
    m = small_table()
    rng = np.random.default_rng(0)
    draws = [decide_error(m, 10 ** 0.5, 1.0, rng) for _ in range(20000)]
    assert abs(np.mean(draws) - 0.1) < 0.01
