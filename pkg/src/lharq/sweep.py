"""Experiment configuration and SNR sweeps."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import infotheory
from .errormodel import (
    EmpiricalModel,
    ThresholdModel,
    expected_per,
    load_per_table,
    synthetic_per_table,
)
from .fading import DiscreteSnrLaw, FadingParams, correlation_factor
from .policy import (
    ContinuousPolicy,
    RatePolicy,
    RateSet,
    calibrate_thresholds_optimal,
    calibrate_thresholds_per_target,
    continuous_policy,
    default_delta_max,
    tune_delta,
)
from .protocol import (
    MixingConfig,
    make_stream,
    run_amc,
    run_exact_oracle,
    run_ir_harq,
    run_l_harq,
    run_vl_harq,
    throughput,
)

log = logging.getLogger(__name__)

THREADS_ENV = "LHARQ_THREADS"
CONTINUOUS_DELTA_MAX = 100.0
_SCHEME_RE = re.compile(r"^(amc|ir(\d+)(_drop)?|lharq(\d+)|vl(\d+))$")

SWEEP_COLUMNS = ("scheme", "avg_snr_db", "delta", "throughput", "ci_halfwidth",
                 "ergodic_capacity", "drop_rate", "backtrack_fail_rate", "mean_rounds",
                 "n_blocks", "seed", "config_hash")
TUNE_COLUMNS = ("scheme", "avg_snr_db", "delta_hat", "throughput", "ci_halfwidth",
                "config_hash")


class ConfigError(ValueError):
    pass


def parse_scheme(name):
    """``amc``, ``ir4``, ``ir4_drop``, ``lharq2``, ``vl4`` -> (kind, K, dropping)."""
    m = _SCHEME_RE.match(name)
    if not m:
        raise ConfigError(f"unknown scheme {name!r}")
    if m.group(1) == "amc":
        return "amc", 1, False
    if m.group(2):
        return "ir", int(m.group(2)), bool(m.group(3))
    if m.group(4):
        return "lharq", int(m.group(4)), False
    return "vl", int(m.group(5)), False


@dataclass
class SweepConfig:
    schemes: list = field(default_factory=lambda: ["amc", "ir4", "lharq2"])
    snr_db: list = field(default_factory=lambda: [0.0, 10.0, 20.0])
    fd_tau: float = 0.05
    corr: float | None = None
    constellation: list = field(default_factory=lambda: [16])
    rates: object = "continuous"
    calibration: str = "optimal"
    epsilon: float = 0.1
    eps_b: float = 0.1
    log2_f: int = 4
    mixing: str = "closed_form"
    delta_mode: str = "fixed"
    delta: float = 1.0
    delta_max: float | None = None
    n_blocks: int = 100_000
    seed: int = 1
    model: str = "threshold"
    per_table: str | None = None
    synthetic_gap_db: float = 1.0
    synthetic_slope_db: float = 0.4
    synthetic_mix_shift: float = 0.4
    law_est_db: list = field(default_factory=lambda: [8.0, 14.0])
    law_exp_db: list = field(default_factory=lambda: [3.0, 12.0])
    law_prob: list = field(default_factory=lambda: [0.5, 0.5])
    output: str | None = None
    threads: int | None = None

    def __post_init__(self):
        self.validate()

    # ---- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_json(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a flat JSON object")
        return cls.from_dict(d)

    def replace(self, **changes):
        d = dataclasses.asdict(self)
        d.update({k: v for k, v in changes.items() if v is not None})
        return SweepConfig.from_dict(d)

    # ---- checks ------------------------------------------------------------

    def validate(self):
        if isinstance(self.schemes, str):
            self.schemes = [s for s in self.schemes.split(",") if s]
        if not self.schemes:
            raise ConfigError("scheme list is empty")
        for s in self.schemes:
            kind, k, _ = parse_scheme(s)
            if k < 1:
                raise ConfigError(f"scheme {s}: K must be at least 1")
        self.snr_db = [float(x) for x in np.atleast_1d(self.snr_db)]
        if not self.snr_db:
            raise ConfigError("SNR grid is empty")
        self.constellation = [int(c) for c in np.atleast_1d(self.constellation)]
        try:
            for c in self.constellation:
                infotheory.qam(c)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.rates != "continuous":
            try:
                rs = RateSet(tuple(self.rates))
                rs.check_constellation(self.constellation_key)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad rate set: {e}") from None
        if self.corr is None and (self.fd_tau is None or self.fd_tau < 0):
            raise ConfigError("need corr or a non-negative fd_tau")
        if self.corr is not None and not 0 <= self.corr <= 1:
            raise ConfigError("corr must lie in [0, 1]")
        if self.calibration not in ("optimal", "per_target"):
            raise ConfigError("calibration must be 'optimal' or 'per_target'")
        if not 0 < self.epsilon < 1 or not 0 < self.eps_b < 1:
            raise ConfigError("epsilon and eps_b must lie in (0, 1)")
        if self.mixing not in ("closed_form", "discrete", "none"):
            raise ConfigError("mixing must be closed_form, discrete or none")
        if self.delta_mode not in ("fixed", "tuned"):
            raise ConfigError("delta_mode must be 'fixed' or 'tuned'")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if self.delta_max is not None and self.delta_max < 1:
            raise ConfigError("delta_max must be at least 1")
        if self.model not in ("threshold", "empirical", "synthetic"):
            raise ConfigError("model must be threshold, empirical or synthetic")
        if self.model == "empirical" and not self.per_table:
            raise ConfigError("the empirical model needs per_table")
        if self.model != "threshold" and self.rates == "continuous":
            raise ConfigError("tabulated PER models need a discrete rate set")
        if self.model != "threshold" and self.mixing == "closed_form":
            raise ConfigError("closed-form mixing needs the threshold model")
        if int(self.n_blocks) < 1:
            raise ConfigError("n_blocks must be positive")
        self.n_blocks = int(self.n_blocks)
        if self.n_blocks < 10_000:
            log.warning("n_blocks=%d is small; confidence intervals may be unreliable",
                        self.n_blocks)
        if self.log2_f < 0:
            raise ConfigError("log2_f must be non-negative")

    # ---- derived -----------------------------------------------------------

    @property
    def constellation_key(self):
        c = sorted(self.constellation)
        return c[0] if len(c) == 1 else tuple(c)

    @property
    def correlation(self):
        return float(self.corr) if self.corr is not None else correlation_factor(self.fd_tau)

    def fading(self, snr_db):
        return FadingParams.from_db(snr_db, self.correlation)

    def config_hash(self):
        d = dataclasses.asdict(self)
        d.pop("output", None)
        d.pop("threads", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def mixing_config(self):
        return MixingConfig(self.mixing, self.eps_b, 2 ** int(self.log2_f))

    def error_model(self):
        if self.model == "threshold":
            return ThresholdModel(self.constellation_key)
        if self.model == "empirical":
            with open(self.per_table, encoding="utf-8") as fh:
                return load_per_table(fh)
        return synthetic_per_table(self.rates, 2 ** int(self.log2_f), self.constellation_key,
                                   self.synthetic_gap_db, self.synthetic_slope_db,
                                   self.synthetic_mix_shift)

    def law(self):
        est = 10.0 ** (np.asarray(self.law_est_db, float) / 10.0)
        exp = 10.0 ** (np.asarray(self.law_exp_db, float) / 10.0)
        return DiscreteSnrLaw(tuple(est), tuple(exp), tuple(self.law_prob))


def build_policy(cfg: SweepConfig, fading, model):
    """Calibrated AMC policy (delta = cfg.delta) for one average SNR."""
    if cfg.rates == "continuous":
        return continuous_policy(fading, cfg.constellation_key, cfg.delta)
    rs = RateSet(tuple(cfg.rates))
    per = lambda g, r: expected_per(fading, g, r, model)
    if cfg.calibration == "optimal":
        thr = calibrate_thresholds_optimal(per, rs)
    else:
        thr = calibrate_thresholds_per_target(per, rs, cfg.epsilon)
    return RatePolicy(thr, rs, cfg.delta)


def run_scheme(name, cfg, fading, policy, model, stream):
    kind, k, dropping = parse_scheme(name)
    if kind == "amc":
        return run_amc(None, fading, policy, model, stream=stream)
    if kind == "ir":
        return run_ir_harq(None, k, fading, policy, model, dropping=dropping, stream=stream)
    if kind == "lharq":
        return run_l_harq(None, k, fading, policy, model, cfg.mixing_config(), stream=stream)
    return run_vl_harq(None, k, fading, policy, model, stream=stream)


def delta_max_for(cfg: SweepConfig, policy):
    if cfg.delta_max is not None:
        return float(cfg.delta_max)
    if cfg.rates == "continuous":
        return CONTINUOUS_DELTA_MAX
    return default_delta_max(policy.top_threshold, 10.0 ** (min(cfg.snr_db) / 10.0))


def point_seed(cfg: SweepConfig, index):
    return np.random.SeedSequence(int(cfg.seed), spawn_key=(int(index),))


def _row(name, cfg, snr_db, delta, log, cap, h):
    eta, ci = throughput(log)
    ev = log.event_rates()
    return {
        "scheme": name, "avg_snr_db": snr_db, "delta": delta, "throughput": eta,
        "ci_halfwidth": ci, "ergodic_capacity": cap, "drop_rate": ev["drop_rate"],
        "backtrack_fail_rate": ev["backtrack_fail_rate"], "mean_rounds": ev["mean_rounds"],
        "n_blocks": len(log), "seed": cfg.seed, "config_hash": h,
    }


def sweep_point(cfg: SweepConfig, index):
    """All schemes at one average SNR, on one shared channel stream."""
    snr_db = cfg.snr_db[index]
    fading = cfg.fading(snr_db)
    model = cfg.error_model()
    policy = build_policy(cfg, fading, model)
    stream = make_stream(fading, cfg.n_blocks, np.random.default_rng(point_seed(cfg, index)))
    cap = infotheory.ergodic_capacity(fading.avg_snr, cfg.constellation_key)
    h = cfg.config_hash()
    rows = []
    for name in cfg.schemes:
        if cfg.delta_mode == "tuned":
            dmax = delta_max_for(cfg, policy)
            obj = lambda d: throughput(run_scheme(name, cfg, fading, policy.with_delta(d),
                                                  model, stream))[0]
            delta = tune_delta(obj, dmax)
        else:
            delta = cfg.delta
        log_ = run_scheme(name, cfg, fading, policy.with_delta(delta), model, stream)
        rows.append(_row(name, cfg, snr_db, delta, log_, cap, h))
    return rows


def _workers(cfg):
    if cfg.threads:
        return int(cfg.threads)
    env = os.environ.get(THREADS_ENV)
    return max(int(env), 1) if env else 1


def _map_points(fn, cfg):
    idx = list(range(len(cfg.snr_db)))
    n = min(_workers(cfg), len(idx))
    if n <= 1:
        return [fn(cfg, i) for i in idx]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, [cfg] * len(idx), idx))


def _sorted(rows, cfg):
    order = {s: i for i, s in enumerate(cfg.schemes)}
    return sorted(rows, key=lambda r: (order[r["scheme"]], r["avg_snr_db"]))


def run_sweep(cfg: SweepConfig):
    rows = [r for pt in _map_points(sweep_point, cfg) for r in pt]
    return _sorted(rows, cfg)


def tune_point(cfg: SweepConfig, index):
    snr_db = cfg.snr_db[index]
    fading = cfg.fading(snr_db)
    model = cfg.error_model()
    policy = build_policy(cfg, fading, model)
    stream = make_stream(fading, cfg.n_blocks, np.random.default_rng(point_seed(cfg, index)))
    h = cfg.config_hash()
    rows = []
    for name in cfg.schemes:
        dmax = delta_max_for(cfg, policy)
        cache = {}

        def obj(d):
            cache[d] = throughput(run_scheme(name, cfg, fading, policy.with_delta(d), model,
                                             stream))
            return cache[d][0]

        best = tune_delta(obj, dmax)
        eta, ci = cache[best]
        rows.append({"scheme": name, "avg_snr_db": snr_db, "delta_hat": best,
                     "throughput": eta, "ci_halfwidth": ci, "config_hash": h})
    return rows


def run_tune(cfg: SweepConfig):
    rows = [r for pt in _map_points(tune_point, cfg) for r in pt]
    return _sorted(rows, cfg)


def calibrate_rows(cfg: SweepConfig):
    if cfg.rates == "continuous":
        raise ConfigError("calibration needs a discrete rate set")
    model = cfg.error_model()
    rows = []
    for snr_db in cfg.snr_db:
        pol = build_policy(cfg, cfg.fading(snr_db), model)
        for r, t in zip(pol.rates.rates, pol.thresholds):
            rows.append({"avg_snr_db": snr_db, "rate": r,
                         "threshold_db": 10 * math.log10(t) if t > 0 else -math.inf})
    return rows


def oracle_rows(cfg: SweepConfig):
    """Monte Carlo vs exact throughput on the configured finite SNR law."""
    law = cfg.law()
    model = ThresholdModel(cfg.constellation_key)
    if cfg.rates == "continuous":
        policy = ContinuousPolicy(cfg.constellation_key, cfg.delta)
    else:
        rs = RateSet(tuple(cfg.rates))
        # thresholds from the indicator PER: each rate where its MI threshold lies
        thr = [0.0] + [infotheory.mi_inverse(r, cfg.constellation_key) for r in rs.rates[1:]]
        policy = RatePolicy(tuple(thr), rs, cfg.delta)
    rows = []
    for i, name in enumerate(cfg.schemes):
        kind, k, dropping = parse_scheme(name)
        if k > 2:
            raise ConfigError(f"oracle check supports K <= 2, got {name}")
        stream = make_stream(law, cfg.n_blocks, np.random.default_rng(point_seed(cfg, i)))
        mixing = cfg.mixing_config()
        if kind == "vl":
            mc = run_vl_harq(None, k, law, policy, model, stream=stream)
        else:
            mc = run_scheme(name, cfg, FadingParams(1.0, 1.0), policy, model, stream)
        exact = run_exact_oracle(kind, k, law, policy, model, mixing, dropping)
        eta, ci = throughput(mc)
        sigma = ci / 1.959963984540054
        diff = abs(eta - exact)
        ok = diff <= max(3 * sigma, 1e-12) and diff <= 1e-2
        rows.append({"scheme": name, "mc": eta, "ci_halfwidth": ci, "exact": exact,
                     "abs_diff": diff, "pass": ok})
    return rows
