"""Time the numba kernels against the pure-numpy reference path.

    python3 benchmarks/bench_kernels.py [--ticks 100000] [--repeat 5]

Each kernel is run once before timing so numba compilation is excluded.
Outputs of the two paths are compared before anything is timed.
"""
import argparse
import timeit

import numpy as np

from predamm.kernels import numba_impl, numpy_impl
from predamm.market_data import synth_gbm


def _cases(ticks):
    v = np.ascontiguousarray(synth_gbm(0, ticks, sigma=0.002).v)
    s = np.linspace(1e-2, np.sqrt(0.5), 2049)
    w = s * s
    pdf = np.ones_like(w)
    return {
        "event_indices": lambda impl: impl.event_indices(v, 1e-4),
        "scan_event": lambda impl: impl.scan_event(v, 0, 0.5),
        "load_branch_integral": lambda impl: impl.load_branch_integral(1.0, 0.5, s, w, pdf, False),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--ticks", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    print(f"{'kernel':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, call in _cases(args.ticks).items():
        a, b = call(numpy_impl), call(numba_impl)
        assert np.allclose(a, b, rtol=1e-12, atol=0), f"{name}: paths disagree"
        t_np = min(timeit.repeat(lambda: call(numpy_impl), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: call(numba_impl), number=1, repeat=args.repeat))
        print(f"{name:<22}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>10.1f}")


if __name__ == "__main__":
    main()
