"""Decoding-error models.

Two decoders are supported:

* :class:`ThresholdModel` -- decoding succeeds iff the mutual information of
  the experienced SNR reaches the rate (deterministic).
* :class:`EmpiricalModel` -- packet-error curves measured for a concrete
  code, plus joint curves ``Pr{direct error and backtrack error}`` for every
  (rate, mixing rate) pair.

Both are turned into flat arrays (:meth:`kernel_args`) for the simulation
kernels in :mod:`lharq.protocol`.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import infotheory
from ._accel import njit
from .fading import FadingParams, conditional_cdf, conditional_cdf_kernel
from .infotheory import mi_kernel, mi_inverse_kernel

__all__ = [
    "ConfigurationError",
    "TableValidationError",
    "ThresholdModel",
    "EmpiricalModel",
    "decide_error",
    "decide_backtrack_error",
    "expected_per",
    "ir_accumulated_error",
    "load_per_table",
    "synthetic_per_table",
    "PER_FLOOR",
    "DECISION_TOL",
]

PER_FLOOR = 1e-7
TINY = 1e-300
# MI comparisons absorb this much rounding so that a mixing rate computed as
# R - I(snr) makes the backtrack decode succeed exactly at the margin
DECISION_TOL = 1e-12
MODEL_THRESHOLD = 0
MODEL_EMPIRICAL = 1
_RATE_MATCH = 1e-9


class ConfigurationError(ValueError):
    pass


class TableValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdModel:
    """Decoding succeeds iff I(experienced SNR) >= rate."""

    constellation: object = 16

    @property
    def table(self):
        return infotheory.mi_table(self.constellation)

    @property
    def bits(self):
        return self.table.bits

    def per(self, exp_snr, rate):
        return float(infotheory.mi(exp_snr, self.table) + DECISION_TOL < rate)

    def backtrack_per(self, exp_snr, rate, mix_rate):
        """Backtrack error probability given a direct failure (0 or 1)."""
        _check_mix(rate, mix_rate)
        return float(infotheory.mi(exp_snr, self.table) + DECISION_TOL < rate - mix_rate)

    def kernel_args(self):
        lo, step, coef, bits = self.table.kernel_args()
        empty = np.zeros(1)
        iempty = np.zeros(1, np.int64)
        return (MODEL_THRESHOLD, lo, step, coef, bits,
                empty, empty, iempty, iempty, empty, iempty, iempty, empty, iempty)


def _check_mix(rate, mix_rate):
    if mix_rate < 0 or mix_rate > rate + 1e-12:
        raise ValueError(f"mixing rate {mix_rate} must lie in [0, rate={rate}]")


@dataclass
class _Curve:
    snr_db: np.ndarray
    prob: np.ndarray

    def __post_init__(self):
        self.snr_db = np.asarray(self.snr_db, float)
        self.prob = np.asarray(self.prob, float)
        order = np.argsort(self.snr_db, kind="stable")
        self.snr_db, self.prob = self.snr_db[order], self.prob[order]
        # stored unfloored (down to LOG_TINY) so that ratios of two small
        # PERs stay meaningful; the floor applies to returned PERs only
        self.logp = np.log(np.clip(self.prob, TINY, 1.0))

    def log_raw(self, x_db):
        """Unfloored log PER: 0 below the first point, held at the last point above."""
        x = np.asarray(x_db, float)
        return np.where(x < self.snr_db[0], 0.0, np.interp(x, self.snr_db, self.logp))

    def __call__(self, x_db):
        x = np.asarray(x_db, float)
        out = np.exp(np.interp(x, self.snr_db, self.logp))
        out = np.where(x < self.snr_db[0], 1.0, out)
        out = np.where(x > self.snr_db[-1], PER_FLOOR, out)
        return np.clip(out, PER_FLOOR, 1.0)


def _key(x):
    return round(float(x), 9)


@dataclass(eq=False)
class EmpiricalModel:
    """Tabulated PER curves of a concrete code.

    ``direct`` maps rate -> (snr_db, prob); ``joint`` maps (rate, mix_rate)
    -> (snr_db, prob) with prob = Pr{direct error and backtrack error}.
    Queries interpolate linearly in (dB, log PER); below a curve's first
    point the PER is 1, above its last point it is ``PER_FLOOR``.
    """

    direct: dict
    joint: dict = field(default_factory=dict)

    def __post_init__(self):
        self._direct = {}
        self._joint = {}
        for r, (x, p) in sorted(self.direct.items()):
            self._direct[_key(r)] = self._validated(_Curve(x, p), f"rate {r}")
        for (r, rho), (x, p) in sorted(self.joint.items()):
            if _key(r) not in self._direct:
                raise TableValidationError(f"joint curve for rate {r} has no direct curve")
            if rho < 0 or rho > r + 1e-12:
                raise TableValidationError(f"mixing rate {rho} outside [0, {r}]")
            c = self._validated(_Curve(x, p), f"rate {r}, mix rate {rho}")
            d = self._direct[_key(r)](c.snr_db)
            bad = np.nonzero(np.clip(c.prob, PER_FLOOR, 1.0) > d * (1 + 1e-9))[0]
            if bad.size:
                raise TableValidationError(
                    f"joint curve exceeds direct curve at rate {r}, mix rate {rho}, "
                    f"snr {c.snr_db[bad[0]]} dB")
            self._joint[(_key(r), _key(rho))] = c
        self._check_mix_monotone()

    @staticmethod
    def _validated(c, label):
        if c.snr_db.size == 0:
            raise TableValidationError(f"empty curve for {label}")
        if np.any((c.prob < 0) | (c.prob > 1)) or not np.all(np.isfinite(c.prob)):
            raise TableValidationError(f"probabilities outside [0, 1] for {label}")
        if np.any(np.diff(c.snr_db) == 0):
            raise TableValidationError(f"duplicate SNR points for {label}")
        up = np.nonzero(np.diff(c.prob) > 0)[0]
        if up.size:
            raise TableValidationError(
                f"curve not non-increasing for {label} at snr {c.snr_db[up[0] + 1]} dB")
        return c

    def _check_mix_monotone(self):
        # a larger mixing rate must never make backtrack decoding harder
        for r in self._direct:
            rhos = sorted(rho for (rr, rho) in self._joint if rr == r)
            for lo, hi in zip(rhos[:-1], rhos[1:]):
                a, b = self._joint[(r, lo)], self._joint[(r, hi)]
                x = np.union1d(a.snr_db, b.snr_db)
                bad = np.nonzero(b(x) > a(x) * (1 + 1e-9))[0]
                if bad.size:
                    raise TableValidationError(
                        f"joint curve increases with mix rate at rate {r}, "
                        f"mix rates {lo} -> {hi}, snr {x[bad[0]]} dB")

    @property
    def rates(self):
        return tuple(sorted(self._direct))

    def mix_rates(self, rate):
        return tuple(sorted(rho for (r, rho) in self._joint if r == _key(rate)))

    def _direct_curve(self, rate):
        try:
            return self._direct[_key(rate)]
        except KeyError:
            raise ConfigurationError(f"no PER curve for rate {rate}") from None

    def per(self, exp_snr, rate):
        c = self._direct_curve(rate)
        x = 10.0 * np.log10(np.maximum(np.asarray(exp_snr, float), 1e-300))
        out = c(x)
        return float(out) if np.ndim(out) == 0 else out

    def joint_per(self, exp_snr, rate, mix_rate):
        _check_mix(rate, mix_rate)
        if _key(mix_rate) == 0.0:
            return self.per(exp_snr, rate)
        self._direct_curve(rate)
        try:
            c = self._joint[(_key(rate), _key(mix_rate))]
        except KeyError:
            raise ConfigurationError(
                f"no backtrack curve for rate {rate}, mix rate {mix_rate}") from None
        x = 10.0 * np.log10(np.maximum(np.asarray(exp_snr, float), 1e-300))
        out = c(x)
        return float(out) if np.ndim(out) == 0 else out

    def backtrack_per(self, exp_snr, rate, mix_rate):
        """``Pr{backtrack error | direct error}`` as joint / direct.

        The ratio is formed from unfloored log PERs, both read at the same
        SNR (held at the end of the shorter curve), so it does not jump to
        ``PER_FLOOR / direct`` once the joint curve drops below the floor.
        """
        _check_mix(rate, mix_rate)
        d = self._direct_curve(rate)
        if _key(mix_rate) == 0.0:
            j = d
        else:
            j = self._joint.get((_key(rate), _key(mix_rate)))
            if j is None:
                raise ConfigurationError(
                    f"no backtrack curve for rate {rate}, mix rate {mix_rate}")
        x = 10.0 * np.log10(np.maximum(np.asarray(exp_snr, float), 1e-300))
        x = np.minimum(x, min(d.snr_db[-1], j.snr_db[-1]))
        out = np.minimum(np.exp(j.log_raw(x) - d.log_raw(x)), 1.0)
        return float(out) if out.ndim == 0 else out

    # ---- serialisation ----------------------------------------------------

    def rows(self):
        out = []
        for r, c in self._direct.items():
            out += [("direct", r, None, x, p) for x, p in zip(c.snr_db, c.prob)]
        for (r, rho), c in self._joint.items():
            out += [("joint_backtrack", r, rho, x, p) for x, p in zip(c.snr_db, c.prob)]
        out.sort(key=lambda t: (t[0], t[1], -1.0 if t[2] is None else t[2], t[3]))
        return out

    def to_csv(self, stream=None):
        buf = stream if stream is not None else io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["kind", "rate", "mix_rate", "snr_db", "prob"])
        for kind, r, rho, x, p in self.rows():
            wr.writerow([kind, repr(float(r)), "" if rho is None else repr(float(rho)),
                         repr(float(x)), repr(float(p))])
        if stream is None:
            return buf.getvalue()

    # ---- kernel form ------------------------------------------------------

    def kernel_args(self, constellation=16):
        """Flat arrays for the simulation kernels.

        Curves are concatenated; ``direct_idx[i]`` is the curve of
        ``rates[i]``, and the joint curves of that rate are listed in
        ``j_rate == i`` with mixing rates ``j_rho`` and curve ids ``j_curve``.
        The MI table is included for the effective-SNR IR mapping.
        """
        curves, starts, stops = [], [], []
        pos = 0

        def add(c):
            nonlocal pos
            curves.append(c)
            starts.append(pos)
            pos += c.snr_db.size
            stops.append(pos)
            return len(curves) - 1

        rates = list(self._direct)
        direct_idx = [add(self._direct[r]) for r in rates]
        j_rate, j_rho, j_curve = [], [], []
        for (r, rho), c in self._joint.items():
            j_rate.append(rates.index(r))
            j_rho.append(rho)
            j_curve.append(add(c))
        xs = np.concatenate([c.snr_db for c in curves])
        lps = np.concatenate([c.logp for c in curves])
        lo, step, coef, bits = infotheory.mi_table(constellation).kernel_args()
        if not j_rate:
            j_rate, j_rho, j_curve = [-1], [-1.0], [-1]
        return (MODEL_EMPIRICAL, lo, step, coef, bits, xs, lps,
                np.array(starts, np.int64), np.array(stops, np.int64),
                np.array(rates, float), np.array(direct_idx, np.int64),
                np.array(j_rate, np.int64), np.array(j_rho, float),
                np.array(j_curve, np.int64))


def load_per_table(source) -> EmpiricalModel:
    """Read a PER table (``kind,rate,mix_rate,snr_db,prob``) from a text stream."""
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.DictReader(source)
    need = {"kind", "rate", "mix_rate", "snr_db", "prob"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise TableValidationError(f"PER table header must contain {sorted(need)}")
    direct, joint = {}, {}
    for n, row in enumerate(reader, start=2):
        try:
            kind = row["kind"].strip()
            r = float(row["rate"])
            x = float(row["snr_db"])
            p = float(row["prob"])
            if kind == "direct":
                direct.setdefault(r, ([], []))
                direct[r][0].append(x)
                direct[r][1].append(p)
            elif kind == "joint_backtrack":
                key = (r, float(row["mix_rate"]))
                joint.setdefault(key, ([], []))
                joint[key][0].append(x)
                joint[key][1].append(p)
            else:
                raise TableValidationError(f"line {n}: unknown kind {kind!r}")
        except (TypeError, ValueError) as e:
            if isinstance(e, TableValidationError):
                raise
            raise TableValidationError(f"line {n}: {e}") from None
    return EmpiricalModel(direct, joint)


def synthetic_per_table(rates, divisor=16, constellation=16, gap_db=1.0, slope_db=0.4,
                        mix_shift=0.4, grid_db=None) -> EmpiricalModel:
    """Logistic PER curves that mimic a practical code.

    The direct curve of rate R drops around ``dB(I^-1(R)) + gap_db``.  The
    joint curve for mixing rate rho is the same logistic moved to lower SNR
    by ``mix_shift`` times the shift the threshold decoder would see (the
    distance from ``I^-1(R)`` down to ``I^-1(R - rho)``).  ``mix_shift < 1``
    makes backtrack decoding profit less from side information than under
    threshold decoding.
    """
    if grid_db is None:
        grid_db = np.round(np.arange(-15.0, 45.0 + 1e-9, 0.25), 6)
    grid_db = np.asarray(grid_db, float)
    table = infotheory.mi_table(constellation)

    def logistic(center):
        z = np.clip((grid_db - center) / slope_db, -700, 700)
        return np.maximum(1.0 / (1.0 + np.exp(z)), 0.0)

    direct, joint = {}, {}
    for r in rates:
        c = 10 * math.log10(infotheory.mi_inverse(r, table)) + gap_db
        direct[float(r)] = (grid_db, logistic(c))
        for k in range(1, divisor + 1):
            rho = k * r / divisor
            if rho >= r - 1e-12:
                p = np.zeros_like(grid_db)
            else:
                shift = c - gap_db - 10 * math.log10(infotheory.mi_inverse(r - rho, table))
                p = logistic(c - mix_shift * shift)
            joint[(float(r), rho)] = (grid_db, np.minimum(p, direct[float(r)][1]))
    return EmpiricalModel(direct, joint)


# --------------------------------------------------------------------------
# decisions
# --------------------------------------------------------------------------

def decide_error(model, exp_snr, rate, rng=None):
    """Realised decoding failure at the experienced SNR."""
    if isinstance(model, ThresholdModel):
        return bool(model.per(exp_snr, rate))
    return bool(rng.random() < model.per(exp_snr, rate))


def decide_backtrack_error(model, exp_snr, rate, mix_rate, rng=None):
    """Realised backtrack failure, given that direct decoding failed."""
    _check_mix(rate, mix_rate)
    if isinstance(model, ThresholdModel):
        return bool(model.backtrack_per(exp_snr, rate, mix_rate))
    return bool(rng.random() < model.backtrack_per(exp_snr, rate, mix_rate))


def ir_accumulated_error(exp_snrs, rate_first, model: ThresholdModel):
    """Incremental-redundancy failure: accumulated MI below the first-round rate."""
    exp_snrs = np.atleast_1d(np.asarray(exp_snrs, float))
    if exp_snrs.size == 0:
        raise ValueError("need at least one round")
    return bool(np.sum(infotheory.mi(exp_snrs, model.table)) + DECISION_TOL < rate_first)


def expected_per(fading: FadingParams, est_snr, rate, model=None):
    """PER averaged over the experienced SNR given the estimate.

    Threshold model: ``Pr{exp < I^-1(R) | est}``; for ``corr == 1`` this is
    the indicator ``I(est) < R``.  Empirical model: the PER curve integrated
    against the conditional law of the experienced SNR.
    """
    model = ThresholdModel() if model is None else model
    est = np.asarray(est_snr, float)
    if isinstance(model, ThresholdModel):
        if rate <= 0:
            return np.zeros_like(est) if est.ndim else 0.0
        if fading.corr >= 1.0:
            out = np.asarray(infotheory.mi(est, model.table) + DECISION_TOL < rate, float)
        else:
            gth = infotheory.mi_inverse(rate, model.table)
            out = np.asarray(conditional_cdf(gth, est, fading))
        return float(out) if out.ndim == 0 else out
    if fading.corr >= 1.0:
        return model.per(est, rate)
    c = model._direct_curve(rate)
    # piecewise PER against conditional-CDF increments on a fine dB grid
    xs = np.union1d(np.arange(c.snr_db[0], c.snr_db[-1] + 0.05, 0.05), c.snr_db)
    xs = xs[xs <= c.snr_db[-1]]
    pm = c(0.5 * (xs[:-1] + xs[1:]))
    # merge runs of equal PER (saturated at 1 or at the floor): only their
    # end points matter
    keep = np.r_[True, pm[1:] != pm[:-1], True]
    xs, pm = xs[keep], pm[keep[:-1]]
    lin = 10.0 ** (xs[:, None] / 10.0)
    flat = est.ravel()
    out = np.empty(flat.shape)
    for i in range(0, flat.size, 512):
        cdf = conditional_cdf(lin, flat[None, i:i + 512], fading)
        out[i:i + 512] = cdf[0] + pm @ np.diff(cdf, axis=0) + PER_FLOOR * (1.0 - cdf[-1])
    out = out.reshape(est.shape)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# kernel helpers (shared by the simulation loops)
# --------------------------------------------------------------------------

@njit
def curve_eval(xs, lps, start, stop, snr):
    """Log-linear PER curve lookup with clamping, at linear SNR ``snr``."""
    if snr <= 0.0:
        return 1.0
    x = 10.0 * math.log10(snr)
    if x < xs[start]:
        return 1.0
    if x > xs[stop - 1]:
        return 1e-7
    lo, hi = start, stop - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if xs[mid] <= x:
            lo = mid
        else:
            hi = mid
    if hi == lo:
        return math.exp(lps[lo])
    w = (x - xs[lo]) / (xs[hi] - xs[lo])
    p = math.exp(lps[lo] + w * (lps[hi] - lps[lo]))
    return min(max(p, 1e-7), 1.0)


@njit
def curve_log_raw(xs, lps, start, stop, x):
    """Unfloored log PER at ``x`` dB (0 below the curve, held above it)."""
    if x < xs[start]:
        return 0.0
    if x >= xs[stop - 1]:
        return lps[stop - 1]
    lo, hi = start, stop - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if xs[mid] <= x:
            lo = mid
        else:
            hi = mid
    w = (x - xs[lo]) / (xs[hi] - xs[lo])
    return lps[lo] + w * (lps[hi] - lps[lo])


@njit
def rate_index(rates, rate):
    for i in range(rates.size):
        if abs(rates[i] - rate) < 1e-9:
            return i
    return -1


@njit
def joint_curve_index(m, ri, rho):
    j_rate, j_rho, j_curve = m[11], m[12], m[13]
    for i in range(j_rate.size):
        if j_rate[i] == ri and abs(j_rho[i] - rho) < 1e-9:
            return j_curve[i]
    return -1


@njit
def direct_per_kernel(m, snr, rate):
    """PER at experienced SNR ``snr`` for ``rate`` (threshold: 0/1)."""
    if m[0] == 0:
        return 1.0 if mi_kernel(snr, m[1], m[2], m[3], m[4]) + 1e-12 < rate else 0.0
    ri = rate_index(m[9], rate)
    if ri < 0:
        return math.nan
    c = m[10][ri]
    return curve_eval(m[5], m[6], m[7][c], m[8][c], snr)


@njit
def joint_per_kernel(m, snr, rate, rho):
    """Pr{direct and backtrack error}; threshold model gives the indicator."""
    if m[0] == 0:
        return 1.0 if mi_kernel(snr, m[1], m[2], m[3], m[4]) + 1e-12 < rate - rho else 0.0
    ri = rate_index(m[9], rate)
    if ri < 0:
        return math.nan
    if rho < 1e-9:
        c = m[10][ri]
    else:
        c = joint_curve_index(m, ri, rho)
        if c < 0:
            return math.nan
    return curve_eval(m[5], m[6], m[7][c], m[8][c], snr)


@njit
def backtrack_ratio_kernel(m, snr, rate, rho):
    """``Pr{backtrack error | direct error}``, as the method of each model."""
    if m[0] == 0:
        return 1.0 if mi_kernel(snr, m[1], m[2], m[3], m[4]) + 1e-12 < rate - rho else 0.0
    ri = rate_index(m[9], rate)
    if ri < 0:
        return math.nan
    d = m[10][ri]
    if rho < 1e-9:
        return 1.0
    c = joint_curve_index(m, ri, rho)
    if c < 0:
        return math.nan
    xs, lps, starts, stops = m[5], m[6], m[7], m[8]
    x = 10.0 * math.log10(max(snr, 1e-300))
    x = min(x, xs[stops[d] - 1], xs[stops[c] - 1])
    lj = curve_log_raw(xs, lps, starts[c], stops[c], x)
    ld = curve_log_raw(xs, lps, starts[d], stops[d], x)
    return min(math.exp(lj - ld), 1.0)


@njit
def ir_error_prob_kernel(m, mi_sum, rate):
    """Failure probability after accumulating ``mi_sum`` bits of MI."""
    if m[0] == 0:
        return 1.0 if mi_sum + 1e-12 < rate else 0.0
    if mi_sum >= m[4]:
        return direct_per_kernel(m, 10.0 ** 6.0, rate)
    g = mi_inverse_kernel(mi_sum, m[1], m[2], m[3], m[4])
    return direct_per_kernel(m, g, rate)


@njit
def expected_per_kernel(m, est, rate, corr, avg_snr):
    """Threshold-model PER given the estimate (used by the length optimiser)."""
    if rate <= 0.0:
        return 0.0
    if rate >= m[4]:
        return 1.0
    g = mi_inverse_kernel(rate, m[1], m[2], m[3], m[4])
    return conditional_cdf_kernel(g, est, corr, avg_snr)
