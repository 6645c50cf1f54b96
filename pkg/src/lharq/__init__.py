"""Link-level simulation of AMC, IR-HARQ and layer-coded HARQ over block fading."""
from ._accel import backend
from .fading import FadingParams, DiscreteSnrLaw, correlation_factor, conditional_cdf, marcum_q1
from .infotheory import mi, mi_inverse, mi_table, ergodic_capacity, qam
from .errormodel import ThresholdModel, EmpiricalModel, load_per_table, synthetic_per_table
from .policy import RateSet, RatePolicy, ContinuousPolicy, MixingRateSet, continuous_policy
from .protocol import (
    MixingConfig,
    make_stream,
    run_amc,
    run_ir_harq,
    run_l_harq,
    run_vl_harq,
    run_exact_oracle,
    throughput,
)

__version__ = "0.1.0"
