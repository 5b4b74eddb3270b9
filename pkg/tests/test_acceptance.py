"""End-to-end acceptance checks.

Each test covers one numbered criterion, records a PASS/FAIL line that is
printed in the terminal summary, and then asserts.  Tolerances are fixed by
the criteria; nothing here is loosened to make a run pass.

The level-5 threshold is an overnight job and only runs with ``ABPLIFT_OVERNIGHT=1``.
"""

import itertools
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from abplift.functional import (
    LiftingPoint,
    QuadOrders,
    binary_term,
    inner_binary_closed_form,
    inner_sphere_closed_form,
    sphere_term,
)
from abplift.lab import (
    exhaustive_feasible,
    generate_instance,
    half_crossing,
    local_search,
    naive_feasible,
    satisfiability_curve,
)
from abplift.saddle import NonConvergenceError, SolverSettings, fd_gradient
from abplift.threshold import (
    BracketError,
    MonotonicityError,
    find_threshold,
    restricted_threshold,
)
from conftest import ACCEPTANCE_LINES

OVERNIGHT = os.environ.get("ABPLIFT_OVERNIGHT") == "1"
LOG2 = math.log(2.0)

# reference stationary points, innermost exponent first
LEVEL2_REF = {"alpha": 0.8331, "p": (0.5639,), "q": (2.5764,)}
LEVEL3_REF = {"alpha": 0.7843, "p": (0.9844, 0.6478), "q": (1.0212, 0.2479), "c": (4.33,)}
LEVEL4_REF = {
    "alpha": 0.7777,
    "p": (0.991, 0.942, 0.705),
    "q": (1.860, 0.488, 0.280),
    "c": (2.407, 5.390),
}
LEVEL5_ALPHA = 0.7764


def record(criterion, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


class _Levels:
    """Threshold runs shared by the criteria, computed once and timed cumulatively."""

    def __init__(self):
        self._runs = {}
        self._failed = {}

    def get(self, r):
        if r not in self._runs:
            prev = self.get(r - 1) if r > 2 else None
            start = time.perf_counter()
            res = find_threshold(r, previous=None if prev is None else prev[0])
            spent = time.perf_counter() - start + (prev[1] if prev else 0.0)
            self._runs[r] = (res, spent)
        return self._runs[r]

    def attempt(self, r):
        """Like ``get`` but returns ``(None, message)`` when the solver gives up."""
        if r not in self._failed:
            try:
                return self.get(r)
            except (NonConvergenceError, BracketError, MonotonicityError) as exc:
                self._failed[r] = f"{type(exc).__name__}: {exc}"
        return None, self._failed[r]

    def done(self):
        return {r: v[0] for r, v in sorted(self._runs.items())}


@pytest.fixture(scope="module")
def levels():
    return _Levels()


def _worst(values, ref):
    return max(abs(a - b) for a, b in zip(values, ref))


def test_criterion_1_level_one():
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "abplift.cli", "threshold", "--level", "1", "--kappa", "0",
         "--no-cache", "--out-format", "json"],
        capture_output=True, text=True, check=True,
    )
    spent = time.perf_counter() - start
    err = abs(json.loads(proc.stdout)["alpha_critical"] - 4.0 / math.pi)
    record(1, err <= 1e-6 and spent < 1.0,
           f"|alpha - 4/pi| = {err:.1e}, process time {spent:.2f} s (< 1 s)")


def test_criterion_2_level_two(levels):
    res, spent = levels.get(2)
    pt = res.stationary.point
    da = abs(res.alpha_critical - LEVEL2_REF["alpha"])
    dp = abs(pt.p[0] - LEVEL2_REF["p"][0])
    dq = abs(pt.q_s[0] - LEVEL2_REF["q"][0])
    ok = da <= 5e-4 and dp <= 2e-3 and dq <= 1e-2 and spent < 120.0
    record(2, ok, f"alpha {res.alpha_critical:.6f}, p2 {pt.p[0]:.5f}, qs2 {pt.q_s[0]:.5f}, "
                  f"{spent:.1f} s (< 120 s)")


def test_criterion_3_level_three(levels):
    res, spent = levels.get(3)
    pt = res.stationary.point
    da = abs(res.alpha_critical - LEVEL3_REF["alpha"])
    dpq = max(_worst(pt.p, LEVEL3_REF["p"]), _worst(pt.q_s, LEVEL3_REF["q"]))
    dc = _worst(pt.exp_c_s, LEVEL3_REF["c"])
    ok = da <= 1e-3 and dpq <= 1e-2 and dc <= 5e-2 and spent < 1800.0
    record(3, ok, f"alpha {res.alpha_critical:.6f}, max |p,q dev| {dpq:.4f}, "
                  f"|cs dev| {dc:.4f}, {spent:.1f} s (< 1800 s)")


@pytest.mark.slow
def test_criterion_4_level_four_and_five(levels):
    res, spent = levels.get(4)
    pt = res.stationary.point
    da = abs(res.alpha_critical - LEVEL4_REF["alpha"])
    dev = max(_worst(pt.p, LEVEL4_REF["p"]), _worst(pt.q_s, LEVEL4_REF["q"]),
              _worst(pt.exp_c_s, LEVEL4_REF["c"]))
    ok = da <= 2e-3 and dev <= 2e-2 and spent <= 4 * 3600.0
    detail = (f"level 4 alpha {res.alpha_critical:.5f} (target 0.7777 +- 0.002), "
              f"max parameter dev {dev:.3f} (<= 0.02), {spent:.0f} s")
    if OVERNIGHT:
        r5, spent5 = levels.attempt(5)
        if r5 is None:
            ok = False
            detail += f"; level 5 failed ({spent5})"
        else:
            ok = ok and abs(r5.alpha_critical - LEVEL5_ALPHA) <= 3e-3
            detail += (f"; level 5 alpha {r5.alpha_critical:.5f} (target 0.7764 +- 0.003), "
                       f"{spent5:.0f} s")
    else:
        detail += "; level 5 not run (overnight job, set ABPLIFT_OVERNIGHT=1)"
    record(4, ok, detail)


@pytest.mark.slow
def test_criterion_5_restricted():
    found = {r: restricted_threshold(r).alpha_critical for r in (3, 4)}
    ok = all(abs(a - 0.8331) <= 2e-3 for a in found.values())
    record(5, ok, ", ".join(f"r={r} alpha {a:.6f}" for r, a in found.items()) + " (0.8331 +- 0.002)")


def _random_points(rng, count):
    out = []
    while len(out) < count:
        r = int(rng.integers(2, 6))
        p = np.sort(rng.uniform(0.0, 0.995, r - 1))[::-1]
        q = np.sort(rng.uniform(0.0, 4.0, r - 1))[::-1]
        c = rng.uniform(0.2, 8.0, r - 2)
        out.append(LiftingPoint(r, tuple(p), tuple(q), tuple(c)))
    return out


@pytest.mark.slow
def test_criterion_6_monotonicity(levels):
    runs = {1: find_threshold(1)}
    for r in (2, 3, 4):
        runs[r] = levels.get(r)[0]
    missing = ""
    if OVERNIGHT:
        r5 = levels.attempt(5)[0]
        if r5 is None:
            missing = " (level 5 has no threshold)"
        else:
            runs[5] = r5
    alphas = [runs[r].alpha_critical for r in sorted(runs)]
    chain = all(a > b for a, b in zip(alphas, alphas[1:]))
    brackets = all(res.diagnostics["psi_monotone"] for r, res in runs.items() if r >= 2)
    rng = np.random.default_rng(20240601)
    bad = 0
    for pt in _random_points(rng, 1000):
        if sphere_term(pt, 0.0) > 0.0 or binary_term(pt) < LOG2:
            bad += 1
    levels_used = "".join(str(r) for r in sorted(runs))
    record(6, chain and brackets and bad == 0 and not missing,
           f"alpha decreasing over levels {levels_used}{missing}: {chain}; psi increasing along every "
           f"bisection: {brackets}; term sign violations on 1000 points: {bad}")


# ------------------------------------------------------------- oracles

_LEG_X, _LEG_W = np.polynomial.legendre.leggauss(80)


def _split_legendre(f, kink, half):
    # order-80 Gauss-Legendre on [-half, half], split where the integrand has its kink
    mid = min(max(kink, -half), half)
    total = 0.0
    for a, b in ((-half, mid), (mid, half)):
        if b > a:
            x = 0.5 * (b - a) * _LEG_X + 0.5 * (a + b)
            total += 0.5 * (b - a) * float(_LEG_W @ f(x))
    return total


def _npdf(x):
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _closed_form_error():
    worst = 0.0
    binary_grid = itertools.product((0.3, 1.0, 2.5, 5.0), (0.0, 0.3, 0.6, 0.9, 0.99),
                                    (-2.0, -0.7, 0.0, 1.5, 3.0))
    for c2, q2, z in binary_grid:
        a, s = math.sqrt(q2) * z, math.sqrt(1.0 - q2)
        ref = _split_legendre(lambda h: np.exp(c2 * np.abs(a + s * h)) * _npdf(h), -a / s, 14.0 + c2)
        worst = max(worst, abs(inner_binary_closed_form(c2, q2, z) / ref - 1.0))
    sphere_grid = list(itertools.product((0.5, 2.0, 6.0), (0.2, 1.0), (0.0, 0.5, 0.9),
                                         (0.0, 0.5), (-1.5, 0.0, 2.0, 0.7)))[:100]
    for c2, g, p2, kappa, w in sphere_grid:
        b = c2 / (4.0 * g)
        cc = math.sqrt(p2) * w + kappa
        s = math.sqrt(1.0 - p2)
        ref = _split_legendre(lambda u: np.exp(-b * np.maximum(s * u + cc, 0.0) ** 2) * _npdf(u),
                              -cc / s, 14.0)
        worst = max(worst, abs(inner_sphere_closed_form(c2, g, p2, kappa, w) / ref - 1.0))
    return worst


def _composition_error():
    # unit exponents turn the nested expectation into a single one over the summed field
    worst = 0.0
    big = QuadOrders((120, 160), (120, 160))
    flat = QuadOrders((400,), (400,))
    for p, q in [((0.8, 0.3), (1.3, 0.4)), ((0.95, 0.6), (2.5, 1.1)), ((0.5, 0.1), (0.7, 0.05))]:
        nested = LiftingPoint(3, p, q, (1.0,))
        direct = LiftingPoint(2, (p[1],), (q[1],))
        worst = max(
            worst,
            abs(binary_term(nested, big) - binary_term(direct, flat) - 0.5 * (q[0] - q[1])),
            abs(sphere_term(nested, 0.0, big) - sphere_term(direct, 0.0, flat)),
        )
    return worst


@pytest.mark.slow
def test_criterion_7_oracles(levels):
    closed = _closed_form_error()
    composition = _composition_error()
    settings = SolverSettings()
    grads, curvatures, raw = {}, {}, {}
    for r, res in levels.done().items():
        st = res.stationary
        g = fd_gradient(st.point, res.kappa, st.alpha, settings)
        grads[r] = float(np.max(np.abs(g)))
        prof = st.saddle_profile
        if prof is not None and prof.exponent_curvature:
            curvatures[r] = max(prof.exponent_curvature)
            raw[r] = max(v for k, v in prof.second_differences.items() if k.startswith("v"))
    ok = (closed <= 1e-9 and composition <= 1e-8 and all(g <= 1e-6 for g in grads.values())
          and all(c <= 0.0 for c in curvatures.values()))
    record(7, ok,
           f"closed forms vs order-80 quadrature {closed:.1e} rel; composition {composition:.1e}; "
           "gradient " + ", ".join(f"r={r} {g:.1e}" for r, g in grads.items())
           + "; stationarised exponent curvature "
           + ", ".join(f"r={r} {c:+.2e}" for r, c in curvatures.items())
           + " (raw coordinate second differences "
           + ", ".join(f"r={r} {c:+.2e}" for r, c in raw.items()) + ")")


# ------------------------------------------------------------ empirical


@pytest.mark.slow
def test_criterion_8_empirical():
    start = time.perf_counter()
    mismatches = 0
    mixed = [0, 0]
    for k in range(100):
        n = 4 + k % 9
        inst = generate_instance(n, 0.6 + 0.01 * (k % 40), 0.0, seed=7, trial=k)
        a, b = exhaustive_feasible(inst), naive_feasible(inst)
        mismatches += a.feasible != b.feasible
        mixed[a.feasible] += 1

    n, trials = 25, 400
    alphas = [m / n for m in range(15, 31)]
    curve = satisfiability_curve(n, alphas, trials, seed=0)
    probs = [c.probability for c in curve]
    nonincreasing = all(a >= b for a, b in zip(probs, probs[1:]))
    crossing = half_crossing(curve)
    crosses = crossing is not None and 0.75 <= crossing <= 1.05

    found = total = 0
    trial = 0
    while total < 100:
        inst = generate_instance(15, 0.5, 0.0, seed=11, trial=trial)
        trial += 1
        if not exhaustive_feasible(inst).feasible:
            continue
        total += 1
        found += local_search(inst, seed=trial).feasible
    spent = time.perf_counter() - start
    ok = (mismatches == 0 and nonincreasing and crosses and found >= 0.9 * total
          and spent < 1200.0)
    record(8, ok,
           f"gray vs naive mismatches {mismatches}/100 ({mixed[1]} feasible); n=25 curve "
           f"nonincreasing {nonincreasing}, half crossing {crossing if crossing is None else round(crossing, 4)}; "
           f"local search {found}/{total}; {spent:.0f} s (< 1200 s)")
