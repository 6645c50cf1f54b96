"""Block-by-block simulation of AMC, IR-HARQ, L-HARQ and VL-HARQ.

Each scheme walks a pre-drawn channel stream (estimated SNR, experienced
SNR and one uniform per block).  Replaying one stream across schemes gives
paired comparisons, and because every random number is drawn up front the
numba kernels and their pure-Python fallback produce identical logs.

The reward of a block is the number of information bits per symbol whose
decoding completes in that block; earlier blocks of a HARQ cycle book 0.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import infotheory
from ._accel import USE_NUMBA, njit
from .errormodel import (
    ConfigurationError,
    EmpiricalModel,
    ThresholdModel,
    backtrack_ratio_kernel,
    direct_per_kernel,
    joint_per_kernel,
    ir_error_prob_kernel,
    DECISION_TOL,
)
from .fading import DiscreteSnrLaw, FadingParams, conditional_cdf_kernel, sample_snr_pairs
from .infotheory import mi_kernel, mi_inverse_kernel
from .policy import (
    VL_GRID,
    ContinuousPolicy,
    MixingRateSet,
    RatePolicy,
    amc_rate,
    amc_rate_kernel,
    mixing_rate_discrete,
    mixing_rate_threshold,
    vl_length,
)

__all__ = [
    "ChannelStream",
    "MixingConfig",
    "BlockLog",
    "make_stream",
    "run_amc",
    "run_ir_harq",
    "run_l_harq",
    "run_vl_harq",
    "throughput",
    "run_exact_oracle",
    "EVENTS",
]

EV_SUCCESS, EV_FAIL, EV_BACKTRACK_FAIL, EV_LOST = 0, 1, 2, 3
EVENTS = ("success", "fail", "backtrack_fail", "lost")

MIX_CLOSED_FORM, MIX_DISCRETE, MIX_NONE = 0, 1, 2


@dataclass(frozen=True, eq=False)
class ChannelStream:
    """Pre-drawn per-block randomness shared by all schemes."""

    est: np.ndarray
    exp: np.ndarray
    u: np.ndarray

    def __len__(self):
        return self.est.size

    def head(self, n):
        return ChannelStream(self.est[:n], self.exp[:n], self.u[:n])


def make_stream(channel, n_blocks, rng) -> ChannelStream:
    """Draw ``n_blocks`` SNR pairs from ``channel`` plus one uniform per block.

    ``channel`` is a :class:`FadingParams` or a :class:`DiscreteSnrLaw`;
    ``rng`` a numpy Generator or an integer seed.
    """
    if n_blocks < 1:
        raise ValueError("n_blocks must be at least 1")
    rng = np.random.default_rng(rng)
    if isinstance(channel, DiscreteSnrLaw):
        est, exp = channel.sample(n_blocks, rng)
    else:
        est, exp = sample_snr_pairs(channel, n_blocks, rng)
    u = rng.random(n_blocks)
    return ChannelStream(np.ascontiguousarray(est, float), np.ascontiguousarray(exp, float),
                         np.ascontiguousarray(u))


@dataclass(frozen=True)
class MixingConfig:
    """How L-HARQ picks the mixing rate after a failed round.

    ``closed_form``: ``R - I(exp)`` (threshold decoding).  ``discrete``:
    smallest ``jR/F`` whose backtrack PER given failure is at most
    ``eps_b``.  ``none``: never mix, so every failure starts a new cycle.
    """

    mode: str = "closed_form"
    eps_b: float = 0.1
    divisor: int = 16

    def __post_init__(self):
        if self.mode not in ("closed_form", "discrete", "none"):
            raise ValueError(f"unknown mixing mode {self.mode!r}")
        if self.mode == "discrete":
            MixingRateSet(1.0, self.divisor)
            if not 0 < self.eps_b < 1:
                raise ValueError("eps_b must lie in (0, 1)")

    @property
    def code(self):
        return {"closed_form": MIX_CLOSED_FORM, "discrete": MIX_DISCRETE, "none": MIX_NONE}[self.mode]


@dataclass(eq=False)
class BlockLog:
    """Per-block trace of one simulation run."""

    scheme: str
    est: np.ndarray
    exp: np.ndarray
    rate: np.ndarray
    rho: np.ndarray
    round: np.ndarray
    event: np.ndarray
    reward: np.ndarray
    dropped: np.ndarray
    length: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.length is None:
            self.length = np.ones_like(self.reward)

    def __len__(self):
        return self.reward.size

    @property
    def total_bits(self):
        return float(self.reward.sum())

    @property
    def total_length(self):
        return float(self.length.sum())

    def counters(self):
        n_cycles = int(np.count_nonzero(self.round == 1))
        out = {name: int(np.count_nonzero(self.event == i)) for i, name in enumerate(EVENTS)}
        out["drop"] = int(self.dropped.sum())
        out["cycles"] = n_cycles
        out["blocks"] = len(self)
        return out

    def event_rates(self):
        c = self.counters()
        cycles = max(c["cycles"], 1)
        return {
            "drop_rate": c["drop"] / cycles,
            "backtrack_fail_rate": c["backtrack_fail"] / cycles,
            "mean_rounds": len(self) / cycles,
        }

    def to_csv(self, stream=None):
        buf = stream if stream is not None else io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["block", "scheme", "round", "rate", "rho", "est_snr_db", "exp_snr_db",
                     "event", "reward"])
        with np.errstate(divide="ignore"):
            est_db = 10 * np.log10(self.est)
            exp_db = 10 * np.log10(self.exp)
        for n in range(len(self)):
            wr.writerow([n, self.scheme, int(self.round[n]), repr(float(self.rate[n])),
                         repr(float(self.rho[n])), repr(float(est_db[n])),
                         repr(float(exp_db[n])), EVENTS[self.event[n]],
                         repr(float(self.reward[n]))])
        if stream is None:
            return buf.getvalue()

    @classmethod
    def concat(cls, logs):
        logs = list(logs)
        cat = lambda name: np.concatenate([getattr(l, name) for l in logs])
        return cls(logs[0].scheme, *(cat(k) for k in
                   ("est", "exp", "rate", "rho", "round", "event", "reward", "dropped", "length")))


def _alloc(n):
    return (np.zeros(n), np.zeros(n), np.zeros(n, np.int64), np.zeros(n, np.int8),
            np.zeros(n), np.zeros(n, np.int8), np.ones(n))


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

@njit
def amc_kernel(est, exp, u, p, m, rate, rho, rnd, event, reward, dropped):
    for n in range(est.size):
        r = amc_rate_kernel(p, est[n])
        rate[n] = r
        rnd[n] = 1
        if u[n] < direct_per_kernel(m, exp[n], r):
            event[n] = EV_LOST
        else:
            event[n] = EV_SUCCESS
            reward[n] = r


@njit
def ir_kernel(est, exp, u, p, m, k_max, dropping, rate, rho, rnd, event, reward, dropped):
    k = 0
    r1 = 0.0
    acc = 0.0
    u1 = 0.0
    for n in range(est.size):
        r = amc_rate_kernel(p, est[n])
        if k > 0 and dropping and r > r1:
            dropped[n] = 1
            k = 0
        if k == 0:
            r1 = r
            acc = 0.0
            u1 = u[n]
        k += 1
        rate[n] = r1
        rnd[n] = k
        acc += mi_kernel(exp[n], m[1], m[2], m[3], m[4])
        if u1 >= ir_error_prob_kernel(m, acc, r1):
            event[n] = EV_SUCCESS
            reward[n] = r1
            k = 0
        elif k >= k_max:
            event[n] = EV_LOST
            k = 0
        else:
            event[n] = EV_FAIL


@njit
def mixing_kernel(m, mode, eps_b, divisor, exp_l, rate_l, cap):
    """Mixing rate after a failure at (exp_l, rate_l); 0 means start over."""
    if mode == 0:
        return rate_l - mi_kernel(exp_l, m[1], m[2], m[3], m[4])
    if mode == 2:
        return 0.0
    for j in range(1, divisor + 1):
        r = j * rate_l / divisor
        if r >= cap:
            break
        if backtrack_ratio_kernel(m, exp_l, rate_l, r) <= eps_b:
            return r
    return 0.0


@njit
def lharq_kernel(est, exp, u, p, m, k_max, mode, eps_b, divisor,
                 rate, rho, rnd, event, reward, dropped):
    ch_rate = np.zeros(k_max)
    ch_exp = np.zeros(k_max)
    ch_u = np.zeros(k_max)
    ch_out = np.zeros(k_max)
    pending = 0
    for n in range(est.size):
        r = amc_rate_kernel(p, est[n])
        rho_in = 0.0
        if pending > 0:
            q = mixing_kernel(m, mode, eps_b, divisor, ch_exp[pending - 1],
                              ch_rate[pending - 1], r)
            if q <= 0.0 or q > r:
                dropped[n] = 1
                pending = 0
            else:
                ch_out[pending - 1] = q
                rho_in = q
        rate[n] = r
        rho[n] = rho_in
        rnd[n] = pending + 1
        if u[n] >= direct_per_kernel(m, exp[n], r):
            total = r
            ev = EV_SUCCESS
            for l in range(pending - 1, -1, -1):
                if ch_u[l] < joint_per_kernel(m, ch_exp[l], ch_rate[l], ch_out[l]):
                    ev = EV_BACKTRACK_FAIL
                    break
                total += ch_rate[l] - ch_out[l]
            event[n] = ev
            reward[n] = total
            pending = 0
        else:
            ch_rate[pending] = r
            ch_exp[pending] = exp[n]
            ch_u[pending] = u[n]
            ch_out[pending] = 0.0
            pending += 1
            if pending >= k_max:
                event[n] = EV_LOST
                pending = 0
            else:
                event[n] = EV_FAIL


@njit
def round_per_kernel(m, est, target, corr, avg_snr, law_est, law_exp, law_p):
    """Pr{I(exp) < target | est} under the fading law or a discrete law."""
    bits = m[4]
    if target <= 0.0:
        return 0.0
    if law_p.size > 0:
        tot = 0.0
        bad = 0.0
        for i in range(law_p.size):
            if law_est[i] == est:
                tot += law_p[i]
                if mi_kernel(law_exp[i], m[1], m[2], m[3], bits) + 1e-12 < target:
                    bad += law_p[i]
        return bad / tot if tot > 0 else 1.0
    if corr >= 1.0:
        return 1.0 if mi_kernel(est, m[1], m[2], m[3], bits) + 1e-12 < target else 0.0
    if target >= bits:
        return 1.0
    g = mi_inverse_kernel(target, m[1], m[2], m[3], bits)
    return conditional_cdf_kernel(g, est, corr, avg_snr)


@njit
def vl_choose_kernel(m, est, deficit, corr, avg_snr, law_est, law_exp, law_p, grid):
    # grid ascending; (1 - PER) / l <= 1 / l, so stop once 1 / l cannot win
    best = -1.0
    best_l = grid[0]
    for i in range(grid.size):
        l = grid[i]
        if 1.0 / l <= best:
            break
        if deficit / l >= m[4]:
            v = 0.0
        else:
            v = (1.0 - round_per_kernel(m, est, deficit / l, corr, avg_snr,
                                        law_est, law_exp, law_p)) / l
        if v > best:
            best = v
            best_l = l
    return best_l


@njit
def vl_kernel(est, exp, u, p, m, k_max, corr, avg_snr, law_est, law_exp, law_p, grid,
              fixed_length, rate, rho, rnd, event, reward, dropped, length):
    k = 0
    r1 = 0.0
    acc = 0.0
    for n in range(est.size):
        if k == 0:
            r1 = amc_rate_kernel(p, est[n])
            acc = 0.0
            l = 1.0
        elif fixed_length > 0.0:
            l = fixed_length
        else:
            l = vl_choose_kernel(m, est[n], r1 - acc, corr, avg_snr, law_est, law_exp,
                                 law_p, grid)
        k += 1
        rate[n] = r1
        rnd[n] = k
        length[n] = l
        acc += l * mi_kernel(exp[n], m[1], m[2], m[3], m[4])
        if acc + 1e-12 >= r1:
            event[n] = EV_SUCCESS
            reward[n] = r1
            k = 0
        elif k >= k_max:
            event[n] = EV_LOST
            k = 0
        else:
            event[n] = EV_FAIL


def _amc_numpy(est, exp, u, p, m, rate, rho, rnd, event, reward, dropped):
    # vectorised twin of amc_kernel for the no-numba build
    kind, thr, rates, delta = p[0], p[1], p[2], p[3]
    g = est * delta
    if kind == 0:
        r = rates[np.searchsorted(thr, g, side="right") - 1]
    else:
        r = np.array([amc_rate_kernel(p, x) for x in est])
    if m[0] == 0:
        mi = infotheory._mi_numpy(exp, _TableArgs(m[1], m[2], m[3], m[4]))
        per = (mi + DECISION_TOL < r).astype(float)
    else:
        per = np.array([direct_per_kernel(m, x, y) for x, y in zip(exp, r)])
    ok = u >= per
    rate[:] = r
    rnd[:] = 1
    event[:] = np.where(ok, EV_SUCCESS, EV_LOST)
    reward[:] = np.where(ok, r, 0.0)


class _TableArgs:
    def __init__(self, lo, step, coef, bits):
        self._args = (lo, step, coef, bits)

    def kernel_args(self):
        return self._args


# --------------------------------------------------------------------------
# public runners
# --------------------------------------------------------------------------

def _stream(channel, n_blocks, rng, stream):
    if stream is not None:
        return stream if n_blocks is None else stream.head(n_blocks)
    return make_stream(channel, n_blocks, rng)


def _model_args(model, policy, constellation):
    if isinstance(model, EmpiricalModel):
        if not isinstance(policy, RatePolicy):
            raise ConfigurationError("empirical PER tables need a discrete rate set")
        missing = [r for r in policy.rates.rates if model._direct.get(round(r, 9)) is None]
        if missing:
            raise ConfigurationError(f"no PER curve for rates {missing}")
        return model.kernel_args(constellation)
    return model.kernel_args()


def _constellation(model, policy):
    if isinstance(model, ThresholdModel):
        return model.constellation
    if isinstance(policy, ContinuousPolicy):
        return policy.constellation
    return 16


def run_amc(n_blocks, fading, policy, error_model=None, rng=None, stream=None) -> BlockLog:
    """Plain AMC: one packet per block, no retransmissions."""
    model = ThresholdModel() if error_model is None else error_model
    s = _stream(fading, n_blocks, rng, stream)
    const = _constellation(model, policy)
    m = _model_args(model, policy, const)
    p = policy.kernel_args(const)
    rate, rho, rnd, event, reward, dropped, length = _alloc(len(s))
    fn = amc_kernel if USE_NUMBA else _amc_numpy
    fn(s.est, s.exp, s.u, p, m, rate, rho, rnd, event, reward, dropped)
    return BlockLog("amc", s.est, s.exp, rate, rho, rnd, event, reward, dropped, length)


def run_ir_harq(n_blocks, k_max, fading, policy, error_model=None, dropping=False, rng=None,
                stream=None) -> BlockLog:
    """Incremental-redundancy HARQ with the rate fixed in the first round.

    With ``dropping`` a pending packet is abandoned whenever the rate the
    AMC would pick for the current block exceeds the packet's rate.
    """
    if k_max < 1:
        raise ValueError("K must be at least 1")
    model = ThresholdModel() if error_model is None else error_model
    s = _stream(fading, n_blocks, rng, stream)
    const = _constellation(model, policy)
    m = _model_args(model, policy, const)
    p = policy.kernel_args(const)
    rate, rho, rnd, event, reward, dropped, length = _alloc(len(s))
    ir_kernel(s.est, s.exp, s.u, p, m, int(k_max), bool(dropping), rate, rho, rnd, event,
              reward, dropped)
    name = f"ir{k_max}" + ("_drop" if dropping else "")
    return BlockLog(name, s.est, s.exp, rate, rho, rnd, event, reward, dropped, length)


def run_l_harq(n_blocks, k_max, fading, policy, error_model=None, mixing=None, rng=None,
               stream=None) -> BlockLog:
    """Layer-coded HARQ: each retransmission mixes old bits into a fresh AMC packet."""
    if k_max < 1:
        raise ValueError("K must be at least 1")
    model = ThresholdModel() if error_model is None else error_model
    mixing = MixingConfig() if mixing is None else mixing
    if mixing.mode == "closed_form" and not isinstance(model, ThresholdModel):
        raise ConfigurationError("closed-form mixing rates need the threshold model")
    const = _constellation(model, policy)
    m = _model_args(model, policy, const)
    if mixing.mode == "discrete" and isinstance(model, EmpiricalModel):
        for r in policy.rates.rates:
            have = set(model.mix_rates(r))
            need = {round(j * r / mixing.divisor, 9) for j in range(1, mixing.divisor + 1)}
            if not need <= have:
                raise ConfigurationError(
                    f"PER table lacks backtrack curves for rate {r}, mix rates "
                    f"{sorted(need - have)}")
    s = _stream(fading, n_blocks, rng, stream)
    p = policy.kernel_args(const)
    rate, rho, rnd, event, reward, dropped, length = _alloc(len(s))
    lharq_kernel(s.est, s.exp, s.u, p, m, int(k_max), mixing.code, float(mixing.eps_b),
                 int(mixing.divisor), rate, rho, rnd, event, reward, dropped)
    return BlockLog(f"lharq{k_max}", s.est, s.exp, rate, rho, rnd, event, reward, dropped,
                    length)


def _law_arrays(law):
    if law is None:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    return law.arrays()


def run_vl_harq(n_blocks, k_max, fading, policy, error_model=None, rng=None, stream=None,
                fixed_length=None, grid=VL_GRID) -> BlockLog:
    """Variable-length HARQ; each entry of the log is one round.

    Retransmissions occupy a fraction of a block chosen to maximise the
    expected per-round throughput given the current SNR estimate.
    ``fading`` may be a :class:`DiscreteSnrLaw`, in which case the length
    optimiser conditions on that law.
    """
    model = ThresholdModel() if error_model is None else error_model
    if not isinstance(model, ThresholdModel):
        raise ConfigurationError("VL-HARQ is defined for the threshold model only")
    s = _stream(fading, n_blocks, rng, stream)
    const = model.constellation
    m = model.kernel_args()
    p = policy.kernel_args(const)
    if isinstance(fading, DiscreteSnrLaw):
        corr, avg = 1.0, 1.0
        law = _law_arrays(fading)
    else:
        corr, avg = float(fading.corr), float(fading.avg_snr)
        law = _law_arrays(None)
    rate, rho, rnd, event, reward, dropped, length = _alloc(len(s))
    vl_kernel(s.est, s.exp, s.u, p, m, int(k_max), corr, avg, *law,
              np.asarray(grid, float), float(fixed_length or 0.0),
              rate, rho, rnd, event, reward, dropped, length)
    return BlockLog(f"vl{k_max}", s.est, s.exp, rate, rho, rnd, event, reward, dropped, length)


# --------------------------------------------------------------------------
# estimator
# --------------------------------------------------------------------------

def throughput(log: BlockLog, z=1.959963984540054):
    """Bits per symbol with a 95% batch-means half-width.

    The point estimate is total bits over total (fractional) blocks; the
    half-width comes from ``floor(sqrt(N))`` consecutive batches.
    """
    n = len(log)
    if n == 0:
        raise ValueError("empty log")
    est = log.total_bits / log.total_length
    b = int(math.isqrt(n))
    if b < 2:
        return est, math.inf
    size = n // b
    bits = log.reward[: b * size].reshape(b, size).sum(axis=1)
    lens = log.length[: b * size].reshape(b, size).sum(axis=1)
    ratios = bits / lens
    sd = float(np.std(ratios, ddof=1))
    return est, z * sd / math.sqrt(b)


# --------------------------------------------------------------------------
# exact oracle
# --------------------------------------------------------------------------

def run_exact_oracle(scheme, k_max, law: DiscreteSnrLaw, policy, error_model=None,
                     mixing=None, dropping=False, grid=VL_GRID):
    """Exact long-run throughput on a finite SNR law, by a Markov chain.

    The state at a block boundary is either "no packet pending" or "the
    packet sent on law point ``i`` failed".  Transitions enumerate the law
    point of the next block; the stationary distribution then gives
    expected bits over expected (fractional) blocks.
    """
    if not isinstance(law, DiscreteSnrLaw):
        raise ValueError("the exact oracle needs a finite SNR law")
    if k_max > 2 or k_max < 1:
        raise ValueError("the exact oracle supports K = 1 or 2")
    model = ThresholdModel() if error_model is None else error_model
    if not isinstance(model, ThresholdModel):
        raise ValueError("the exact oracle needs the threshold model")
    mixing = MixingConfig() if mixing is None else mixing
    if scheme == "amc":
        k_max = 1
    table = model.table
    est, exp, prob = law.arrays()
    n = law.size
    mi = lambda g: infotheory.mi(g, table)

    def fails(g, r):
        return mi(g) + DECISION_TOL < r

    def fresh(j):
        """(reward, length, failed) for a first round on point j."""
        r = amc_rate(policy, est[j])
        return (0.0 if fails(exp[j], r) else r), 1.0, fails(exp[j], r)

    def backtrack_per(g, r, q):
        return model.backtrack_per(g, r, q)

    def step(state, j):
        """(reward, length, next_state) for the block on point j."""
        if state >= 0:
            i = state
            r1 = amc_rate(policy, est[i])
            if scheme in ("ir", "amc"):
                if dropping and amc_rate(policy, est[j]) > r1:
                    state = -1
                else:
                    ok = mi(exp[i]) + mi(exp[j]) + DECISION_TOL >= r1
                    return (r1 if ok else 0.0), 1.0, -1
            elif scheme == "lharq":
                r2 = amc_rate(policy, est[j])
                if mixing.mode == "closed_form":
                    q = mixing_rate_threshold(exp[i], r1, table)
                elif mixing.mode == "discrete":
                    q = mixing_rate_discrete(exp[i], r1, r2, backtrack_per,
                                             MixingRateSet(r1, mixing.divisor), mixing.eps_b)
                else:
                    q = 0.0
                if q <= 0 or q > r2:
                    state = -1
                else:
                    if fails(exp[j], r2):
                        return 0.0, 1.0, -1
                    bt_ok = not backtrack_per(exp[i], r1, q)
                    return r2 + (r1 - q if bt_ok else 0.0), 1.0, -1
            elif scheme == "vl":
                d = r1 - mi(exp[i])
                sel = est == est[j]
                cond_p = prob[sel] / prob[sel].sum()
                cond_mi = mi(exp[sel])
                per = lambda l: float(np.sum(cond_p[cond_mi + DECISION_TOL < d / l]))
                l = vl_length(per, grid)
                ok = mi(exp[i]) + l * mi(exp[j]) + DECISION_TOL >= r1
                return (r1 if ok else 0.0), l, -1
            else:
                raise ValueError(f"unknown scheme {scheme!r}")
        reward, length, failed = fresh(j)
        nxt = j if (failed and k_max > 1) else -1
        return reward, length, nxt

    # states: -1 -> index 0, pending on point i -> index i + 1
    size = n + 1
    trans = np.zeros((size, size))
    rew = np.zeros(size)
    ln = np.zeros(size)
    for s in range(-1, n):
        # a packet on a point that never fails cannot be pending; give the
        # unreachable state the fresh-block row so the chain stays proper
        src = s if s < 0 or fresh(s)[2] else -1
        for j in range(n):
            if prob[j] == 0:
                continue
            r, l, nxt = step(src, j)
            trans[s + 1, nxt + 1] += prob[j]
            rew[s + 1] += prob[j] * r
            ln[s + 1] += prob[j] * l
    # stationary distribution: solve pi (T - I) = 0 with sum(pi) = 1
    a = np.vstack([trans.T - np.eye(size), np.ones(size)])
    b = np.zeros(size + 1)
    b[-1] = 1.0
    pi = np.linalg.lstsq(a, b, rcond=None)[0]
    return float(pi @ rew / (pi @ ln))
