"""Coded-modulation mutual information of square QAM over complex AWGN.

The MI function sits in the inner loop of every simulation, so it is
computed once per constellation by Gauss-Hermite quadrature on a 0.1 dB
grid and then evaluated by monotone cubic (PCHIP) interpolation.
"""
from __future__ import annotations

import csv
import functools
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.interpolate import PchipInterpolator

from ._accel import USE_NUMBA, njit

__all__ = [
    "Constellation",
    "MiTable",
    "qam",
    "mi_quadrature",
    "mi_table",
    "mi",
    "mi_inverse",
    "ergodic_capacity",
]

GRID_LO_DB = -20.0
GRID_HI_DB = 45.0
GRID_STEP_DB = 0.1
GH_ORDER = 32


@dataclass(frozen=True)
class Constellation:
    """Unit-energy constellation; ``order`` points, ``bits`` = log2(order)."""

    points: tuple
    order: int

    def __post_init__(self):
        pts = np.asarray(self.points, complex)
        if pts.size != self.order:
            raise ValueError("order does not match the number of points")
        if abs(np.mean(np.abs(pts) ** 2) - 1.0) > 1e-12:
            raise ValueError("constellation must have unit average energy")

    @property
    def bits(self):
        return math.log2(self.order)

    @property
    def pam(self):
        """Per-dimension PAM levels for square QAM."""
        m = math.isqrt(self.order)
        s = math.sqrt(3.0 / (2.0 * (self.order - 1)))
        return (2.0 * np.arange(m) - (m - 1)) * s


@functools.lru_cache(maxsize=None)
def qam(order: int) -> Constellation:
    m = math.isqrt(order)
    if m * m != order or m < 2 or (m & (m - 1)):
        raise ValueError(f"square QAM needs an even power of two, got {order}")
    s = math.sqrt(3.0 / (2.0 * (order - 1)))
    lv = (2.0 * np.arange(m) - (m - 1)) * s
    pts = (lv[:, None] + 1j * lv[None, :]).ravel()
    return Constellation(tuple(pts.tolist()), order)


def mi_quadrature(gamma, constellation: Constellation, order=GH_ORDER):
    """MI in bits/symbol by Gauss-Hermite quadrature.

    Uniform square QAM factorises into two independent PAM channels with
    noise variance 1/2, so the two-dimensional Gauss-Hermite rule is the
    tensor product of two one-dimensional ones and the MI doubles the PAM MI.
    """
    gamma = np.atleast_1d(np.asarray(gamma, float))
    if np.any(gamma < 0):
        raise ValueError("SNR must be non-negative")
    x = constellation.pam
    m = x.size
    t, w = np.polynomial.hermite.hermgauss(order)
    diff = x[:, None] - x[None, :]
    out = np.empty(gamma.shape)
    for n, g in enumerate(gamma):
        d = math.sqrt(g) * diff
        # exponent of the likelihood ratio p(y|x_j)/p(y|x_i), y = sqrt(g) x_i + t
        e = -((d[:, :, None] + t) ** 2 - t ** 2)
        e[np.arange(m), np.arange(m), :] = -np.inf
        mx = np.maximum(e.max(axis=1), 0.0)
        # log(1 + sum_{j != i} exp(e_ij)), kept positive
        lse = mx + np.log(np.exp(-mx) + np.exp(e - mx[:, None, :]).sum(axis=1))
        deficit = (lse @ w).mean() / math.sqrt(math.pi) / math.log(2.0)
        out[n] = 2.0 * max(math.log2(m) - deficit, 0.0)
    return out if out.size > 1 else float(out[0])


@dataclass(frozen=True, eq=False)
class MiTable:
    """MI tabulated on a uniform dB grid plus its PCHIP coefficients."""

    grid_db: np.ndarray
    values: np.ndarray
    bits: float

    def __post_init__(self):
        g, v = np.asarray(self.grid_db, float), np.asarray(self.values, float)
        if g.ndim != 1 or g.size != v.size or g.size < 4:
            raise ValueError("grid and values must be matching 1-D arrays")
        step = np.diff(g)
        if np.any(step <= 0) or np.ptp(step) > 1e-9:
            raise ValueError("MI grid must be uniform and ascending")
        if np.any(np.diff(v) < 0) or v[0] < 0 or v[-1] > self.bits + 1e-12:
            raise ValueError("MI values must be non-decreasing within [0, log2 M]")
        below = v < self.bits - 1e-12
        if np.any(np.diff(v[below]) <= 0):
            raise ValueError("MI values must be strictly increasing below saturation")
        object.__setattr__(self, "grid_db", g)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_coef", np.ascontiguousarray(PchipInterpolator(g, v).c))

    @property
    def lo_db(self):
        return float(self.grid_db[0])

    @property
    def step_db(self):
        return float(self.grid_db[1] - self.grid_db[0])

    @property
    def coef(self):
        return self._coef

    def kernel_args(self):
        """Arrays handed to the numba kernels: (lo_db, step_db, coef, bits)."""
        return self.lo_db, self.step_db, self._coef, float(self.bits)

    def to_csv(self, stream=None):
        buf = stream if stream is not None else io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["snr_db", "mi_bits"])
        for x, y in zip(self.grid_db, self.values):
            wr.writerow([repr(float(x)), repr(float(y))])
        if stream is None:
            return buf.getvalue()

    @classmethod
    def from_csv(cls, stream, bits):
        rows = list(csv.DictReader(stream))
        g = np.array([float(r["snr_db"]) for r in rows])
        v = np.array([float(r["mi_bits"]) for r in rows])
        return cls(g, v, float(bits))


@functools.lru_cache(maxsize=None)
def _cached_table(orders: tuple) -> MiTable:
    grid = np.round(np.arange(GRID_LO_DB, GRID_HI_DB + GRID_STEP_DB / 2, GRID_STEP_DB), 10)
    lin = 10.0 ** (grid / 10.0)
    vals = np.max([mi_quadrature(lin, qam(o)) for o in orders], axis=0)
    return MiTable(grid, np.maximum.accumulate(vals), max(math.log2(o) for o in orders))


def mi_table(constellation) -> MiTable:
    """Tabulated MI for a constellation, a QAM order, or a tuple of orders.

    A tuple such as ``(16, 64)`` yields the pointwise-maximum envelope, i.e.
    the MI available when the best of several constellations may be used.
    """
    if isinstance(constellation, MiTable):
        return constellation
    if isinstance(constellation, Constellation):
        orders = (constellation.order,)
    elif isinstance(constellation, (tuple, list)):
        orders = tuple(sorted(int(o) for o in constellation))
    else:
        orders = (int(constellation),)
    for o in orders:
        qam(o)
    return _cached_table(orders)


# ---- scalar kernels -------------------------------------------------------

@njit
def mi_kernel(gamma, lo_db, step_db, coef, bits):
    if gamma <= 0.0:
        return 0.0
    x = 10.0 * math.log10(gamma)
    n = coef.shape[1]
    if x < lo_db:
        # MI is linear in SNR at the bottom of the grid
        return coef[3, 0] * gamma / 10.0 ** (lo_db / 10.0)
    i = int((x - lo_db) / step_db)
    if i >= n:
        return coef[3, n - 1] + coef[2, n - 1] * step_db + coef[1, n - 1] * step_db ** 2 \
            + coef[0, n - 1] * step_db ** 3
    u = x - (lo_db + i * step_db)
    return ((coef[0, i] * u + coef[1, i]) * u + coef[2, i]) * u + coef[3, i]


@njit
def mi_inverse_kernel(rate, lo_db, step_db, coef, bits):
    """Smallest SNR whose interpolated MI reaches ``rate``; inf if none.

    Locates the grid segment by binary search on the node values, then
    bisects the cubic inside it, so the result satisfies mi >= rate.
    """
    if rate <= 0.0:
        return 0.0
    n = coef.shape[1]
    h = step_db
    top = ((coef[0, n - 1] * h + coef[1, n - 1]) * h + coef[2, n - 1]) * h + coef[3, n - 1]
    if top < rate:
        return math.inf
    if rate <= coef[3, 0]:
        g = rate / coef[3, 0] * 10.0 ** (lo_db / 10.0)
        while mi_kernel(g, lo_db, step_db, coef, bits) < rate:
            g = g * (1.0 + 1e-15)
        return g
    # last node with value < rate
    a, b = 0, n
    while b - a > 1:
        mid = (a + b) // 2
        if coef[3, mid] < rate:
            a = mid
        else:
            b = mid
    ul, uh = 0.0, h
    for _ in range(200):
        um = 0.5 * (ul + uh)
        if um <= ul or um >= uh:
            break
        v = ((coef[0, a] * um + coef[1, a]) * um + coef[2, a]) * um + coef[3, a]
        if v >= rate:
            uh = um
        else:
            ul = um
    g = 10.0 ** ((lo_db + a * h + uh) / 10.0)
    # guard against the dB -> linear -> dB round trip landing just below
    while mi_kernel(g, lo_db, step_db, coef, bits) < rate:
        g = g * (1.0 + 1e-15)
    return g


@njit
def _mi_vec(gamma, out, lo_db, step_db, coef, bits):
    for i in range(gamma.size):
        out[i] = mi_kernel(gamma[i], lo_db, step_db, coef, bits)


def _mi_numpy(gamma, table: MiTable):
    lo, step, c, _ = table.kernel_args()
    n = c.shape[1]
    out = np.zeros_like(gamma)
    pos = gamma > 0
    x = np.full_like(gamma, -np.inf)
    x[pos] = 10.0 * np.log10(gamma[pos])
    low = pos & (x < lo)
    out[low] = c[3, 0] * gamma[low] / 10.0 ** (lo / 10.0)
    mid = pos & ~low
    i = np.minimum(((x[mid] - lo) / step).astype(np.int64), n - 1)
    u = np.minimum(x[mid] - (lo + i * step), step)
    out[mid] = ((c[0, i] * u + c[1, i]) * u + c[2, i]) * u + c[3, i]
    return out


def mi(gamma, constellation=16):
    """MI in bits/symbol at linear SNR ``gamma`` (scalar or array)."""
    table = mi_table(constellation)
    g = np.asarray(gamma, float)
    if np.any(g < 0):
        raise ValueError("SNR must be non-negative")
    flat = np.ascontiguousarray(g).ravel()
    if USE_NUMBA:
        out = np.empty_like(flat)
        _mi_vec(flat, out, *table.kernel_args())
    else:
        out = _mi_numpy(flat, table)
    out = out.reshape(g.shape)
    return float(out) if out.ndim == 0 else out


def mi_inverse(rate, constellation=16):
    """Linear SNR at which the MI reaches ``rate`` (bisection on the table)."""
    table = mi_table(constellation)
    rate = float(rate)
    if not (0.0 < rate < table.bits):
        raise ValueError(f"rate must lie in (0, {table.bits}), got {rate}")
    g = mi_inverse_kernel(rate, *table.kernel_args())
    if not math.isfinite(g):
        raise ValueError(f"rate {rate} is not reached on the tabulated SNR range")
    return g


def ergodic_capacity(avg_snr, constellation=16):
    """Average MI over exponentially distributed SNR with mean ``avg_snr``.

    With ``t = e^u`` the exponential average becomes an integral of a smooth
    bump in ``u``; it is split at fixed breakpoints so the adaptive rule sees
    both the bulk near ``u = 0`` and the long low-SNR tail.
    """
    if not avg_snr > 0:
        raise ValueError("avg_snr must be positive")
    table = mi_table(constellation)
    f = lambda u: mi(avg_snr * math.exp(u), table) * math.exp(u - math.exp(u))
    edges = (-60.0, -40.0, -20.0, -8.0, -3.0, 0.0, 1.0, 2.0, 3.0, 4.5)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        total += integrate.quad(f, a, b, limit=200, epsabs=1e-11, epsrel=1e-8)[0]
    return total
