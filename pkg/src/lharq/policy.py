"""Rate adaptation: AMC thresholds, aggressiveness tuning, mixing rates, VL lengths."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import infotheory
from ._accel import njit
from .fading import FadingParams, conditional_cdf
from .infotheory import mi_kernel

__all__ = [
    "CalibrationError",
    "RateSet",
    "RatePolicy",
    "ContinuousPolicy",
    "MixingRateSet",
    "calibrate_thresholds_per_target",
    "calibrate_thresholds_optimal",
    "optimal_rate_curve",
    "continuous_policy",
    "amc_rate",
    "delta_grid",
    "default_delta_max",
    "tune_delta",
    "mixing_rate_threshold",
    "mixing_rate_discrete",
    "vl_length",
    "VL_GRID",
]

POLICY_DISCRETE = 0
POLICY_MI = 1
POLICY_TABLE = 2
VL_GRID = np.round(np.arange(1, 21) * 0.05, 10)


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class RateSet:
    """Ascending transmission rates in bits/symbol."""

    rates: tuple

    def __post_init__(self):
        r = tuple(float(x) for x in self.rates)
        if not r:
            raise ValueError("rate set must not be empty")
        if any(x <= 0 for x in r) or any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError(f"rates must be positive and strictly ascending, got {r}")
        object.__setattr__(self, "rates", r)

    def __len__(self):
        return len(self.rates)

    def check_constellation(self, constellation):
        bits = infotheory.mi_table(constellation).bits
        if self.rates[-1] >= bits:
            raise ValueError(f"rate {self.rates[-1]} not below log2 M = {bits}")


@dataclass(frozen=True)
class RatePolicy:
    """Discrete AMC: rate ``rates[l]`` is used when ``thresholds[l] <= est * delta``."""

    thresholds: tuple
    rates: RateSet
    delta: float = 1.0

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        if len(t) != len(self.rates):
            raise ValueError("need one threshold per rate")
        if t[0] != 0.0:
            raise ValueError("the lowest threshold must be 0")
        if any(b < a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be ascending")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        object.__setattr__(self, "thresholds", t)

    def with_delta(self, delta):
        return RatePolicy(self.thresholds, self.rates, delta)

    @property
    def top_threshold(self):
        return self.thresholds[-1]

    def kernel_args(self, constellation=16):
        lo, step, coef, bits = infotheory.mi_table(constellation).kernel_args()
        return (POLICY_DISCRETE, np.array(self.thresholds), np.array(self.rates.rates),
                float(self.delta), 0.0, 1.0, np.zeros(2), lo, step, coef, bits)

    def to_csv(self, stream=None):
        buf = stream if stream is not None else io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["rate", "threshold_db"])
        for r, t in zip(self.rates.rates, self.thresholds):
            wr.writerow([repr(r), repr(10 * math.log10(t)) if t > 0 else "-inf"])
        if stream is None:
            return buf.getvalue()

    @classmethod
    def from_csv(cls, stream, delta=1.0):
        if isinstance(stream, str):
            stream = io.StringIO(stream)
        rows = list(csv.DictReader(stream))
        rates = [float(r["rate"]) for r in rows]
        thr = [10.0 ** (float(r["threshold_db"]) / 10.0) for r in rows]
        return cls(tuple(thr), RateSet(tuple(rates)), delta)


@dataclass(frozen=True, eq=False)
class ContinuousPolicy:
    """Idealised continuous rates ``R(est * delta)``.

    With ``grid_db`` empty the rate is the MI itself, otherwise it is read
    from the tabulated curve ``values`` over the uniform ``grid_db``.
    """

    constellation: object = 16
    delta: float = 1.0
    grid_db: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if len(self.grid_db) != len(self.values):
            raise ValueError("grid and values differ in length")

    def with_delta(self, delta):
        return ContinuousPolicy(self.constellation, delta, self.grid_db, self.values)

    @property
    def top_threshold(self):
        # SNR beyond which the rate no longer grows appreciably
        table = infotheory.mi_table(self.constellation)
        return infotheory.mi_inverse(table.bits - 1e-3, table)

    def kernel_args(self, constellation=None):
        lo, step, coef, bits = infotheory.mi_table(self.constellation).kernel_args()
        if len(self.grid_db):
            g = np.asarray(self.grid_db, float)
            return (POLICY_TABLE, np.zeros(1), np.zeros(1), float(self.delta),
                    float(g[0]), float(g[1] - g[0]), np.asarray(self.values, float),
                    lo, step, coef, bits)
        return (POLICY_MI, np.zeros(1), np.zeros(1), float(self.delta), 0.0, 1.0,
                np.zeros(2), lo, step, coef, bits)


@njit
def amc_rate_kernel(p, est):
    g = est * p[3]
    kind = p[0]
    if kind == 0:
        thr, rates = p[1], p[2]
        # largest l with thr[l] <= g; thr[0] == 0
        lo, hi = 0, thr.size
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if thr[mid] <= g:
                lo = mid
            else:
                hi = mid
        return rates[lo]
    if kind == 1:
        return mi_kernel(g, p[7], p[8], p[9], p[10])
    vals = p[6]
    if g <= 0.0:
        return vals[0]
    x = (10.0 * math.log10(g) - p[4]) / p[5]
    if x <= 0.0:
        return vals[0]
    i = int(x)
    if i >= vals.size - 1:
        return vals[vals.size - 1]
    w = x - i
    return vals[i] + w * (vals[i + 1] - vals[i])


def amc_rate(policy, est_snr):
    """Rate chosen for estimated SNR ``est_snr`` (after scaling by delta)."""
    if est_snr < 0:
        raise ValueError("SNR must be non-negative")
    return float(amc_rate_kernel(policy.kernel_args(), float(est_snr)))


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------

def _per_db(per_eval, x_db, rate):
    x = np.asarray(x_db, float)
    return np.broadcast_to(np.asarray(per_eval(10.0 ** (x / 10.0), rate), float), x.shape)


def calibrate_thresholds_per_target(per_eval, rates: RateSet, epsilon, lo_db=-30.0,
                                    hi_db=60.0, tol_db=1e-6):
    """Smallest SNR per rate with ``per_eval(snr, rate) <= epsilon``.

    Bisection in dB down to ``tol_db``; the returned value is the upper end
    of the final bracket so the target is always met.  The first threshold
    is then set to 0 so every SNR maps to some rate.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    out = []
    for r in rates.rates:
        if _per_db(per_eval, hi_db, r) > epsilon:
            raise CalibrationError(f"rate {r}: PER target {epsilon} not reachable "
                                   f"below {hi_db} dB")
        if _per_db(per_eval, lo_db, r) <= epsilon:
            out.append(10.0 ** (lo_db / 10.0))
            continue
        a, b = lo_db, hi_db
        while b - a > tol_db:
            m = 0.5 * (a + b)
            if _per_db(per_eval, m, r) <= epsilon:
                b = m
            else:
                a = m
        out.append(10.0 ** (b / 10.0))
    out = np.maximum.accumulate(np.array(out))
    out[0] = 0.0
    return tuple(out.tolist())


def calibrate_thresholds_optimal(per_eval, rates: RateSet, lo_db=-30.0, hi_db=60.0,
                                 step_db=0.01):
    """Switching points of ``argmax_R R (1 - per_eval(snr, R))`` on a dB grid.

    Ties go to the larger rate, except where every rate has zero expected
    reward; there the smallest rate is used.  A rate that never wins gets
    the same threshold as the next one, and ``inf`` if no larger rate ever
    wins.
    """
    grid = lo_db + step_db * np.arange(int(round((hi_db - lo_db) / step_db)) + 1)
    lin = 10.0 ** (grid / 10.0)
    r = np.array(rates.rates)
    good = np.stack([rr * (1.0 - _per_db(per_eval, grid, rr)) for rr in r])
    # reversed argmax returns the last (largest) rate among ties; where no
    # rate can succeed at all the smallest one is kept
    best = len(r) - 1 - np.argmax(good[::-1], axis=0)
    best[good.max(axis=0) <= 0.0] = 0
    out = []
    for l in range(len(r)):
        hit = np.nonzero(best >= l)[0]
        out.append(lin[hit[0]] if hit.size else math.inf)
    out = np.maximum.accumulate(np.array(out))
    out[0] = 0.0
    return tuple(out.tolist())


def optimal_rate_curve(fading: FadingParams, constellation=16, lo_db=-30.0, hi_db=60.0,
                       step_db=0.1):
    """Throughput-optimal continuous rate ``argmax_R R (1 - PER(est, R))``.

    PER is the threshold-decoding error probability under the fading
    mismatch.  Returns (grid_db, rates).
    """
    table = infotheory.mi_table(constellation)
    bits = table.bits
    grid = lo_db + step_db * np.arange(int(round((hi_db - lo_db) / step_db)) + 1)
    est = 10.0 ** (grid / 10.0)
    coarse = np.r_[np.linspace(0.01, bits - 0.01, 100), bits - 1e-6]
    gth = np.array([infotheory.mi_inverse(r, table) for r in coarse])
    good = coarse[:, None] * (1.0 - conditional_cdf(gth[:, None], est[None, :], fading))
    idx = np.argmax(good, axis=0)
    out = np.empty_like(est)
    for n, g in enumerate(est):
        i = idx[n]
        a = coarse[max(i - 1, 0)] if i > 0 else 1e-6
        b = coarse[min(i + 1, coarse.size - 1)]
        f = lambda r: -r * (1.0 - conditional_cdf(infotheory.mi_inverse(r, table), g, fading))
        res = optimize.minimize_scalar(f, bounds=(a, b), method="bounded",
                                       options={"xatol": 1e-6})
        out[n] = res.x if -res.fun >= good[i, n] else coarse[i]
    return grid, out


def continuous_policy(fading: FadingParams, constellation=16, delta=1.0):
    """Idealised continuous-rate AMC.

    Perfect estimates use ``R = I(est)``; otherwise the rate maximises the
    expected per-block reward under the mismatch.
    """
    if fading.corr >= 1.0:
        return ContinuousPolicy(constellation, delta)
    grid, vals = optimal_rate_curve(fading, constellation)
    return ContinuousPolicy(constellation, delta, tuple(grid.tolist()), tuple(vals.tolist()))


# --------------------------------------------------------------------------
# aggressiveness
# --------------------------------------------------------------------------

def delta_grid(delta_max, n_points=25):
    if delta_max < 1:
        raise ValueError("delta_max must be at least 1")
    return np.geomspace(1.0, delta_max, n_points) if delta_max > 1 else np.ones(1)


def default_delta_max(top_threshold, min_avg_snr):
    """Smallest delta that can still reach the top rate at the lowest SNR point."""
    return max(1.0, float(top_threshold) / float(min_avg_snr))


def tune_delta(objective, delta_max, n_points=25, full=False):
    """Grid search for the aggressiveness factor; ties go to the smaller delta."""
    grid = delta_grid(delta_max, n_points)
    vals = np.array([objective(float(d)) for d in grid])
    best = float(grid[int(np.argmax(vals))])
    return (best, grid, vals) if full else best


# --------------------------------------------------------------------------
# mixing rates and VL lengths
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MixingRateSet:
    """Mixing rates ``{k R / F : k = 0..F}`` available for a failed packet."""

    base_rate: float
    divisor: int

    def __post_init__(self):
        if self.divisor < 1 or (self.divisor & (self.divisor - 1)):
            raise ValueError("divisor must be a power of two")
        if not self.base_rate > 0:
            raise ValueError("base rate must be positive")

    @property
    def values(self):
        return tuple(k * self.base_rate / self.divisor for k in range(self.divisor + 1))

    @property
    def feedback_bits(self):
        return int(math.log2(self.divisor))


def mixing_rate_threshold(exp_snr, rate, constellation=16):
    """Smallest mixing rate that makes threshold backtrack decoding succeed."""
    m = infotheory.mi(exp_snr, constellation)
    if m >= rate:
        raise ValueError("direct decoding did not fail; no mixing rate needed")
    return rate - m


def mixing_rate_discrete(exp_snr, rate, next_rate_cap, backtrack_per, mix_set: MixingRateSet,
                         eps_b):
    """Smallest nonzero set element below ``next_rate_cap`` meeting ``eps_b``.

    Returns 0 (drop the packet, start a new cycle) when no element does.
    """
    if not 0 < eps_b < 1:
        raise ValueError("eps_b must lie in (0, 1)")
    for rho in mix_set.values[1:]:
        if rho >= next_rate_cap:
            break
        if backtrack_per(exp_snr, rate, rho) <= eps_b:
            return rho
    return 0.0


def vl_length(per_round_per, grid=VL_GRID):
    """Length maximising ``(1 - PER(l)) / l``; ties go to the shorter length."""
    vals = np.array([(1.0 - per_round_per(float(l))) / l for l in grid])
    return float(grid[int(np.argmax(vals))])
