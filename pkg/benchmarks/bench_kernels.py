"""Time the hot kernels with numba and with the pure-numpy fallback.

Each backend runs in its own interpreter because the switch
(LHARQ_DISABLE_NUMBA) is read at import time.  Usage:

    python3 benchmarks/bench_kernels.py [--blocks 50000] [--repeat 3]
"""
import argparse
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import json, sys, time
import numpy as np
from lharq import _accel
from lharq.fading import FadingParams, marcum_q1
from lharq.infotheory import mi, mi_inverse
from lharq.policy import ContinuousPolicy
from lharq.protocol import make_stream, run_amc, run_ir_harq, run_l_harq, run_vl_harq

n, repeat = int(sys.argv[1]), int(sys.argv[2])
fad = FadingParams.from_db(15.0, 0.95)
grid = np.round(np.arange(-30.0, 60.05, 0.1), 6)
pol = ContinuousPolicy(16, 1.0, tuple(grid), tuple(0.9 * mi(10 ** (grid / 10))))
s = make_stream(fad, n, np.random.default_rng(0))
rng = np.random.default_rng(1)
a, b = rng.uniform(0, 20, (2, 10 ** 5))
g = rng.exponential(30.0, 10 ** 6)

cases = {
    "mi (1e6 SNRs)": lambda: mi(g),
    "marcum_q1 (1e5 pairs)": lambda: marcum_q1(a, b),
    "mi_inverse (1e3 rates)": lambda: [mi_inverse(r) for r in np.linspace(0.01, 3.99, 1000)],
    "amc": lambda: run_amc(None, fad, pol, stream=s),
    "ir4": lambda: run_ir_harq(None, 4, fad, pol, stream=s),
    "lharq4": lambda: run_l_harq(None, 4, fad, pol, stream=s),
    "vl4": lambda: run_vl_harq(None, 4, fad, pol, stream=s),
}
out = {}
for name, fn in cases.items():
    fn()  # warm-up (and JIT compilation)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    out[name] = best
print(json.dumps({"backend": _accel.backend(), "times": out}))
"""


def run(disable, blocks, repeat):
    env = dict(os.environ)
    env.pop("LHARQ_DISABLE_NUMBA", None)
    if disable:
        env["LHARQ_DISABLE_NUMBA"] = "1"
    res = subprocess.run([sys.executable, "-c", WORKER, str(blocks), str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--blocks", type=int, default=50_000, help="blocks per protocol run")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    t0 = time.perf_counter()
    fast = run(False, args.blocks, args.repeat)
    slow = run(True, args.blocks, args.repeat)
    print(f"{'kernel':<24}{'numba [s]':>12}{'numpy [s]':>12}{'speed-up':>10}")
    for name, tf in fast["times"].items():
        ts = slow["times"][name]
        print(f"{name:<24}{tf:>12.4f}{ts:>12.4f}{ts / tf:>10.1f}")
    print(f"(protocol runs use {args.blocks} blocks; best of {args.repeat}; "
          f"total {time.perf_counter() - t0:.0f} s)")


if __name__ == "__main__":
    main()
