"""Correlated block-Rayleigh fading.

Each channel block carries a pair of SNRs: the one estimated before the
transmission (used for rate adaptation) and the one actually experienced.
Both are exponential with mean ``avg_snr``; their powers have correlation
coefficient ``corr``.  Given the estimate, the experienced SNR is a scaled
non-central chi-square variable with two degrees of freedom, so conditional
probabilities reduce to the first-order Marcum Q-function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from ._accel import USE_NUMBA, njit

__all__ = [
    "FadingParams",
    "SnrPair",
    "DiscreteSnrLaw",
    "correlation_factor",
    "bessel_j0",
    "sample_snr_pair",
    "sample_snr_pairs",
    "conditional_cdf",
    "marcum_q1",
    "marcum_q1_complement",
]

# beyond this |b - a| the Q1 tail is below 0.5*exp(-45) ~ 1e-20
_Q1_GAP = 9.5


@dataclass(frozen=True)
class FadingParams:
    """Average SNR (linear) and power correlation between estimate and channel."""

    avg_snr: float
    corr: float

    def __post_init__(self):
        if not (self.avg_snr > 0 and math.isfinite(self.avg_snr)):
            raise ValueError(f"avg_snr must be positive and finite, got {self.avg_snr}")
        if not (0.0 <= self.corr <= 1.0):
            raise ValueError(f"corr must lie in [0, 1], got {self.corr}")

    @classmethod
    def from_fd_tau(cls, avg_snr, fd_tau):
        return cls(avg_snr, correlation_factor(fd_tau))

    @classmethod
    def from_db(cls, avg_snr_db, corr):
        return cls(10.0 ** (avg_snr_db / 10.0), corr)

    @property
    def avg_snr_db(self):
        return 10.0 * math.log10(self.avg_snr)


@dataclass(frozen=True)
class SnrPair:
    est: float
    exp: float

    def __post_init__(self):
        for name in ("est", "exp"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} SNR must be finite and non-negative, got {v}")


def bessel_j0(x):
    """Zero-order Bessel function of the first kind."""
    return special.j0(x)


def correlation_factor(fd_tau):
    """Power correlation ``J0(2*pi*fd_tau)**2`` for a Doppler-delay product."""
    fd_tau = np.asarray(fd_tau, dtype=float)
    if np.any(fd_tau < 0):
        raise ValueError("fd_tau must be non-negative")
    out = bessel_j0(2.0 * np.pi * fd_tau) ** 2
    return float(out) if out.ndim == 0 else out


def sample_snr_pairs(params: FadingParams, n, rng):
    """Draw ``n`` independent (estimated, experienced) SNR pairs.

    Uses ``h_exp = sqrt(corr) * h + sqrt(1 - corr) * w`` with ``h`` and ``w``
    independent circular Gaussians of power ``avg_snr``.
    """
    scale = math.sqrt(params.avg_snr / 2.0)
    g = rng.standard_normal((4, n)) * scale
    h_re, h_im, w_re, w_im = g
    sd, sw = math.sqrt(params.corr), math.sqrt(1.0 - params.corr)
    e_re = sd * h_re + sw * w_re
    e_im = sd * h_im + sw * w_im
    return h_re * h_re + h_im * h_im, e_re * e_re + e_im * e_im


def sample_snr_pair(params: FadingParams, rng) -> SnrPair:
    est, exp = sample_snr_pairs(params, 1, rng)
    return SnrPair(float(est[0]), float(exp[0]))


@dataclass(frozen=True)
class DiscreteSnrLaw:
    """Finite joint law of (estimated, experienced) SNR pairs.

    Used by the exact enumeration oracle and by the Monte Carlo runs that
    are checked against it.
    """

    est: tuple
    exp: tuple
    prob: tuple

    def __post_init__(self):
        est = np.asarray(self.est, float)
        exp = np.asarray(self.exp, float)
        prob = np.asarray(self.prob, float)
        if not (est.shape == exp.shape == prob.shape) or est.ndim != 1 or est.size == 0:
            raise ValueError("est, exp and prob must be equal-length 1-D sequences")
        if np.any(prob < 0) or abs(prob.sum() - 1.0) > 1e-12:
            raise ValueError("prob must be a probability vector")
        if np.any(est < 0) or np.any(exp < 0):
            raise ValueError("SNR values must be non-negative")
        object.__setattr__(self, "est", tuple(est.tolist()))
        object.__setattr__(self, "exp", tuple(exp.tolist()))
        object.__setattr__(self, "prob", tuple(prob.tolist()))

    @property
    def size(self):
        return len(self.prob)

    def arrays(self):
        return np.array(self.est), np.array(self.exp), np.array(self.prob)

    def sample(self, n, rng):
        est, exp, prob = self.arrays()
        idx = rng.choice(self.size, size=n, p=prob)
        return est[idx], exp[idx]

    def conditional_cdf(self, threshold, est):
        est_a, exp_a, prob = self.arrays()
        sel = est_a == est
        tot = prob[sel].sum()
        if tot == 0:
            raise ValueError(f"estimated SNR {est} has no mass under this law")
        return float(prob[sel & (exp_a < threshold)].sum() / tot)


# --------------------------------------------------------------------------
# Marcum Q1
# --------------------------------------------------------------------------

@njit
def _poisson_window(lam, lo, hi):
    # pmf of Poisson(lam) on lo..hi, filled outward from the mode so that
    # underflow only ever hits negligible terms
    n = hi - lo + 1
    p = np.zeros(n)
    if lam == 0.0:
        if lo == 0:
            p[0] = 1.0
        return p
    mode = int(math.floor(lam))
    if mode < lo:
        mode = lo
    if mode > hi:
        mode = hi
    p[mode - lo] = math.exp(mode * math.log(lam) - lam - math.lgamma(mode + 1.0))
    for j in range(mode + 1, hi + 1):
        p[j - lo] = p[j - 1 - lo] * lam / j
    for j in range(mode - 1, lo - 1, -1):
        p[j - lo] = p[j + 1 - lo] * (j + 1) / lam
    return p


@njit
def q1_pair(a, b):
    """Return ``(Q1(a, b), 1 - Q1(a, b))``, each accurate in its own right.

    Q1 is the probability that a Poisson(b^2/2) count does not exceed an
    independent Poisson(a^2/2) count; both sums are over positive terms.
    """
    if b <= 0.0:
        return 1.0, 0.0
    if a <= 0.0:
        t = -0.5 * b * b
        return math.exp(t), -math.expm1(t)
    gap = b - a
    if gap > _Q1_GAP:
        return 0.0, 1.0
    if gap < -_Q1_GAP:
        return 1.0, 0.0
    lam = 0.5 * a * a
    mu = 0.5 * b * b
    sl = math.sqrt(lam)
    sm = math.sqrt(mu)
    lo = int(math.floor(min(lam - 12.0 * sl, mu - 12.0 * sm) - 30.0))
    if lo < 0:
        lo = 0
    hi = int(math.ceil(max(lam + 12.0 * sl, mu + 12.0 * sm) + 30.0))
    pl = _poisson_window(lam, lo, hi)
    pm = _poisson_window(mu, lo, hi)
    n = hi - lo + 1
    acc = 0.0
    tot = 0.0
    if a < b:
        # Q1 = sum_j P(N_a = j) P(N_b <= j)
        cdf = 0.0
        for i in range(n):
            cdf += pm[i]
            acc += pl[i] * cdf
        q = min(max(acc, 0.0), 1.0)
        return q, 1.0 - q
    # 1 - Q1 = sum_j P(N_a = j) P(N_b > j)
    sf = 0.0
    for i in range(n - 1, -1, -1):
        acc += pl[i] * sf
        sf += pm[i]
    qc = min(max(acc, 0.0), 1.0)
    return 1.0 - qc, qc


@njit
def _q1_vec(a, b, q, qc):
    for i in range(a.size):
        q[i], qc[i] = q1_pair(a[i], b[i])


def _q1_bessel_numpy(a, b):
    # Scaled Bessel series, summed until the last term is < 1e-17 of the sum:
    #   Q1     = e^{-(a-b)^2/2} sum_{k>=0} (a/b)^k Ive_k(ab)        (a < b)
    #   1 - Q1 = e^{-(a-b)^2/2} sum_{k>=1} (b/a)^k Ive_k(ab)        (a >= b)
    q = np.empty_like(a)
    qc = np.empty_like(a)
    zero_b = b <= 0
    zero_a = (a <= 0) & ~zero_b
    far_lo = ~zero_a & ~zero_b & (b - a > _Q1_GAP)
    far_hi = ~zero_a & ~zero_b & (b - a < -_Q1_GAP)
    q[zero_b], qc[zero_b] = 1.0, 0.0
    t = -0.5 * b[zero_a] ** 2
    q[zero_a], qc[zero_a] = np.exp(t), -np.expm1(t)
    q[far_lo], qc[far_lo] = 0.0, 1.0
    q[far_hi], qc[far_hi] = 1.0, 0.0
    rest = ~(zero_a | zero_b | far_lo | far_hi)
    if np.any(rest):
        ar, br = a[rest], b[rest]
        x = ar * br
        lower = ar < br
        ratio = np.where(lower, ar / br, br / ar)
        acc = np.where(lower, special.ive(0, x), 0.0)
        rk = np.ones_like(x)
        for k in range(1, 200_000):
            rk = rk * ratio
            term = rk * special.ive(k, x)
            acc += term
            if np.all(term <= 1e-17 * acc):
                break
        val = np.clip(np.exp(-0.5 * (ar - br) ** 2) * acc, 0.0, 1.0)
        q[rest] = np.where(lower, val, 1.0 - val)
        qc[rest] = np.where(lower, 1.0 - val, val)
    return q, qc


def _q1_arrays(a, b):
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    shape = a.shape
    a = np.ascontiguousarray(a).ravel()
    b = np.ascontiguousarray(b).ravel()
    if np.any(a < 0) or np.any(b < 0) or not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("Marcum Q1 arguments must be finite and non-negative")
    if USE_NUMBA:
        q = np.empty_like(a)
        qc = np.empty_like(a)
        _q1_vec(a, b, q, qc)
    else:
        q, qc = _q1_bessel_numpy(a, b)
    return q.reshape(shape), qc.reshape(shape)


def _scalar_or_array(x):
    return float(x) if x.ndim == 0 else x


def marcum_q1(a, b):
    """First-order Marcum Q-function ``Q1(a, b)``; broadcasts over arrays."""
    return _scalar_or_array(_q1_arrays(a, b)[0])


def marcum_q1_complement(a, b):
    """``1 - Q1(a, b)``, computed directly rather than by subtraction."""
    return _scalar_or_array(_q1_arrays(a, b)[1])


def _q1_args(threshold, est, params):
    if params.corr >= 1.0:
        raise ValueError("conditional law is degenerate for corr == 1; use the indicator")
    spread = (1.0 - params.corr) * params.avg_snr
    threshold = np.asarray(threshold, float)
    est = np.asarray(est, float)
    if np.any(threshold < 0) or np.any(est < 0):
        raise ValueError("SNR arguments must be non-negative")
    a = np.sqrt(2.0 * params.corr * est / spread)
    b = np.sqrt(2.0 * threshold / spread)
    return a, b


def conditional_cdf(threshold, est, params: FadingParams):
    """``Pr{experienced SNR < threshold | estimated SNR = est}``.

    Equal to ``1 - Q1(sqrt(2 corr est / s), sqrt(2 threshold / s))`` with
    ``s = (1 - corr) avg_snr``.  Broadcasts over ``threshold`` and ``est``.
    """
    a, b = _q1_args(threshold, est, params)
    return marcum_q1_complement(a, b)


@njit
def conditional_cdf_kernel(threshold, est, corr, avg_snr):
    # scalar version for use inside the simulation loops; corr == 1 handled
    if corr >= 1.0:
        return 1.0 if est < threshold else 0.0
    spread = (1.0 - corr) * avg_snr
    a = math.sqrt(2.0 * corr * est / spread)
    b = math.sqrt(2.0 * threshold / spread)
    return q1_pair(a, b)[1]
