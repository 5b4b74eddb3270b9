"""Time the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.  Each case
reports the best wall time of N runs per backend and the speedup.
"""
from __future__ import annotations

import argparse
import math
import time

import numpy as np

from abplift import _kernels_py
from abplift.functional import LiftingPoint, _rules, default_orders, mix_coefficients
from abplift.kernels import BASE_BINARY, BASE_SPHERE

try:
    from abplift import _kernels as _compiled
except ImportError:  # pragma: no cover
    _compiled = None

POINTS = {
    2: LiftingPoint(2, (0.5640,), (2.5766,)),
    3: LiftingPoint(3, (0.9844, 0.6478), (1.0183, 0.2470), (4.34,)),
    4: LiftingPoint(4, (0.9968, 0.9568, 0.6939), (1.4496, 0.2052, 0.0989), (3.149, 8.562)),
    5: LiftingPoint(5, (0.9990, 0.9900, 0.9500, 0.7100), (1.60, 0.40, 0.15, 0.07), (2.5, 6.0, 12.0)),
}


def _nested_args(point: LiftingPoint, side: str):
    mc = mix_coefficients(point)
    rules = _rules(default_orders(point.r), point.r, side)
    expo = np.array(point.exp_c_s)
    if side == "binary":
        kind, inv_scale, coef = BASE_BINARY, 1.0, np.array(mc.c)
    else:
        kind, inv_scale, coef = BASE_SPHERE, 1.0 / math.sqrt(2.0 * (1.0 - point.p[0])), np.array(mc.b)
    return (kind, inv_scale, 0.0, coef, expo, [r.nodes for r in rules],
            [r.log_weights for r in rules], [r.weights for r in rules])


def best_of(fn, args, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--gray-n", type=int, default=20)
    args = ap.parse_args()
    if _compiled is None:
        raise SystemExit("compiled extension not built; run pip install -e . first")
    print(f"{'case':<22}{'compiled [ms]':>15}{'numpy [ms]':>13}{'speedup':>10}")
    for r, pt in POINTS.items():
        for side in ("binary", "sphere"):
            a = _nested_args(pt, side)
            tc = best_of(_compiled.nested_log_expect, a, args.repeat)
            tp = best_of(_kernels_py.nested_log_expect, a, args.repeat)
            print(f"{f'level {r} {side}':<22}{1e3 * tc:>15.3f}{1e3 * tp:>13.3f}{tp / tc:>10.2f}")
    n = args.gray_n
    cols = np.ascontiguousarray(np.random.default_rng(0).standard_normal((n, n)).T)
    a = (cols, 1e9, False)
    tc = best_of(_compiled.gray_scan, a, max(1, args.repeat // 2))
    tp = best_of(_kernels_py.gray_scan, a, max(1, args.repeat // 2))
    print(f"{f'gray scan n={n}':<22}{1e3 * tc:>15.3f}{1e3 * tp:>13.3f}{tp / tc:>10.2f}")


if __name__ == "__main__":
    main()
