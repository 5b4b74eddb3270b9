"""Critical constraint density per lifting level.

At fixed alpha the stationarised functional psi(alpha) is evaluated by a
stationarity solve; its zero is the level-r threshold, with psi > 0 above it.
The search first follows the stationary branch from a starting density with
warm-started solves until psi changes sign (the step size is predicted from
d psi / d alpha = -sphere_term, which holds at a stationary point), then
bisects the resulting bracket.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .functional import LiftingPoint, QuadOrders, level1_threshold, psi_bar, sphere_term
from .quadrature import ParameterError
from .saddle import (
    NonConvergenceError,
    SolverSettings,
    StationaryResult,
    default_seed,
    lift_inner,
    lift_outer,
    lift_resample,
    solve_stationary,
)

DEFAULT_BRACKET = (0.5, 1.5)
# inner-insertion exponents tried when lifting a level-2 solution
_INSERT_EXPONENTS = (2.0, 3.0, 4.0, 6.0)
# exponent spreads tried when lifting a solution of level 3 or more
_RESAMPLE_SPREADS = (1.3, 1.6, 2.0)
# step halvings allowed when a warm-started solve fails
_MAX_HALVINGS = 3
# densities where the generic seeds are known to land on the nontrivial branch
_START_ALPHA = {2: 0.8}


def default_alpha_tol(r: int) -> float:
    if r <= 3:
        return 1e-5
    if r == 4:
        return 1e-4
    return 2e-4


class BracketError(RuntimeError):
    """psi does not change sign inside the admissible density range."""


class MonotonicityError(AssertionError):
    """A property that must hold across densities or levels was violated."""

    def __init__(self, message: str, results=None):
        super().__init__(message)
        self.results = results


@dataclass(frozen=True)
class ThresholdResult:
    r: int
    kappa: float
    alpha_critical: float
    stationary: StationaryResult
    bracket: tuple[float, float]
    psi_residual: float
    diagnostics: dict = field(default_factory=dict)
    restricted: bool = False

    def as_dict(self) -> dict:
        return {
            "r": self.r,
            "kappa": self.kappa,
            "alpha_critical": self.alpha_critical,
            "bracket": list(self.bracket),
            "psi_residual": self.psi_residual,
            "restricted": self.restricted,
            "stationary": self.stationary.as_dict(),
            "diagnostics": self.diagnostics,
        }


@dataclass
class _Branch:
    """Bookkeeping for one threshold search."""

    r: int
    kappa: float
    settings: SolverSettings
    free: bool
    history: list = field(default_factory=list)
    solves: int = 0
    evaluations: int = 0

    def _attempt(self, alpha: float, near: StationaryResult, hessian, profile: bool) -> StationaryResult:
        try:
            res = solve_stationary(
                self.r, self.kappa, alpha, replace(self.settings, seed_point=near.point),
                free_exponents=self.free, hessian=hessian, profile=profile,
            )
        except NonConvergenceError as exc:
            if exc.best is not None:
                self.evaluations += exc.best.evaluations
            raise
        self.solves += 1
        self.evaluations += res.evaluations
        if res.degenerate is not None and near.degenerate is None:
            raise NonConvergenceError(f"branch degenerates at alpha={alpha}: {res.degenerate}", best=res)
        self.history.append((float(alpha), res.psi_value))
        return res

    def solve(self, alpha: float, near: StationaryResult, profile: bool = False,
              depth: int = 0) -> StationaryResult:
        """Stationary point at ``alpha`` on the branch through ``near``.

        A failed warm start is retried with a fresh Hessian, then by
        continuing in half steps from ``near``.
        """
        try:
            return self._attempt(alpha, near, near.hessian, profile)
        except NonConvergenceError:
            pass
        try:
            return self._attempt(alpha, near, None, profile)
        except NonConvergenceError:
            if depth >= _MAX_HALVINGS:
                raise
        mid = self.solve(0.5 * (alpha + near.alpha), near, False, depth + 1)
        return self.solve(alpha, mid, profile, depth + 1)


def _rank(res: StationaryResult) -> tuple:
    prof = res.saddle_profile
    good = res.degenerate is None and (prof is None or prof.maximization_type)
    return (good, res.psi_value)


def candidate_seeds(previous: LiftingPoint) -> list[tuple[str, LiftingPoint, bool]]:
    """Level-(r+1) starting points built from a level-r solution.

    Each entry is ``(label, seed, freeze_first)``; with ``freeze_first`` the
    seed's exponents are held fixed for a first solve over p and q.
    """
    out = [("outer", lift_outer(previous, 1.5), False)]
    if previous.r == 2:
        out += [(f"inner-{c:g}", lift_inner(previous, c), True) for c in _INSERT_EXPONENTS]
    else:
        out += [(f"resample-{s:g}", lift_resample(previous, s), True) for s in _RESAMPLE_SPREADS]
    return out


def multistart(r: int, kappa: float, alpha: float, settings: SolverSettings,
               seeds: Sequence[tuple[str, LiftingPoint, bool]]) -> tuple[StationaryResult, list[dict]]:
    """Solve from every seed and keep the best stationary point.

    Proper (non-degenerate, maximization-type) points are preferred; among
    them the one with the largest psi wins.  Seed solves skip the slow
    fallback iteration so a poor seed costs at most ``max_iters`` Newton steps.
    """
    found: list[tuple[str, StationaryResult]] = []
    report = []
    for label, seed, freeze in seeds:
        try:
            start = seed
            if freeze:
                try:
                    start = solve_stationary(
                        r, kappa, alpha, replace(settings, seed_point=seed), free_exponents=False,
                        profile=False, fallback=False,
                    ).point
                except NonConvergenceError as exc:
                    if exc.best is None:
                        raise
                    start = exc.best.point
            res = solve_stationary(r, kappa, alpha, replace(settings, seed_point=start),
                                   fallback=False)
        except (NonConvergenceError, ValueError) as exc:
            report.append({"seed": label, "converged": False, "error": str(exc)})
            continue
        found.append((label, res))
        report.append({
            "seed": label, "converged": True, "psi": res.psi_value, "degenerate": res.degenerate,
            "maximization_type": res.saddle_profile.maximization_type if res.saddle_profile else None,
            "point": res.point.as_dict(),
        })
    if not found:
        raise NonConvergenceError(f"no seed converged at level {r}, alpha={alpha}")
    best = max(found, key=lambda item: _rank(item[1]))
    for entry in report:
        entry["chosen"] = entry["seed"] == best[0]
    return best[1], report


def _scan_to_sign_change(branch: _Branch, res: StationaryResult, lo: float, hi: float):
    """Follow the branch until psi changes sign; returns the two bracketing solves."""
    alpha = res.alpha
    step_cap = 0.05
    while True:
        psi = res.psi_value
        slope = -sphere_term(res.point, branch.kappa, branch.settings.orders_for(branch.r))
        slope = max(slope, 1e-3)
        delta = -1.3 * psi / slope
        delta = math.copysign(min(max(abs(delta), 2e-4), step_cap), delta if delta else -1.0)
        nxt = None
        for _ in range(2):
            target = alpha + delta
            if not lo <= target <= hi:
                target = min(max(target, lo), hi)
                if target == alpha:
                    raise BracketError(
                        f"psi keeps sign {np.sign(psi):+.0f} up to the bracket edge {alpha}"
                    )
            try:
                nxt = branch.solve(target, res)
                break
            except NonConvergenceError:
                delta *= 0.5
        if nxt is None:
            raise NonConvergenceError(
                f"could not continue the level-{branch.r} branch beyond alpha={alpha:.6f}", best=res
            )
        if np.sign(nxt.psi_value) != np.sign(psi) or nxt.psi_value == 0.0:
            return (res, nxt) if res.alpha < nxt.alpha else (nxt, res)
        res, alpha = nxt, nxt.alpha


def _check_monotone(history: list, r: int) -> bool:
    pts = sorted(history)
    for (a0, p0), (a1, p1) in zip(pts, pts[1:]):
        if a1 > a0 and p1 < p0:
            return False
    return True


def _search(branch: _Branch, first: StationaryResult, alpha_tol: float, bracket,
            diagnostics: dict, restricted: bool) -> ThresholdResult:
    lo_res, hi_res = _scan_to_sign_change(branch, first, *bracket)
    if not lo_res.psi_value <= 0.0 <= hi_res.psi_value:
        raise MonotonicityError(
            f"psi decreases across [{lo_res.alpha}, {hi_res.alpha}] at level {branch.r}"
        )
    while hi_res.alpha - lo_res.alpha > alpha_tol:
        mid = 0.5 * (lo_res.alpha + hi_res.alpha)
        near = lo_res if abs(lo_res.psi_value) < abs(hi_res.psi_value) else hi_res
        res = branch.solve(mid, near)
        if res.psi_value < 0.0:
            lo_res = res
        else:
            hi_res = res
    alpha_c = 0.5 * (lo_res.alpha + hi_res.alpha)
    near = lo_res if abs(lo_res.psi_value) < abs(hi_res.psi_value) else hi_res
    final = branch.solve(alpha_c, near, profile=True)
    monotone = _check_monotone(branch.history, branch.r)
    if not monotone:
        raise MonotonicityError(f"psi is not increasing in alpha along the level-{branch.r} search")
    orders = branch.settings.orders_for(branch.r)
    coarse = orders.halved()
    consistency = abs(
        psi_bar(final.point, branch.kappa, alpha_c, coarse) - final.psi_value
    )
    diagnostics.update({
        "quad_orders": orders.as_dict(),
        "half_order_consistency": consistency,
        "stationary_solves": branch.solves,
        "functional_evaluations": branch.evaluations,
        "psi_history": [[a, p] for a, p in sorted(branch.history)],
        "psi_monotone": monotone,
        "alpha_tol": alpha_tol,
    })
    return ThresholdResult(
        r=branch.r,
        kappa=branch.kappa,
        alpha_critical=alpha_c,
        stationary=final,
        bracket=(lo_res.alpha, hi_res.alpha),
        psi_residual=abs(final.psi_value),
        diagnostics=diagnostics,
        restricted=restricted,
    )


def _clamp(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def find_threshold(r: int, kappa: float = 0.0, settings: SolverSettings = SolverSettings(),
                   alpha_tol: Optional[float] = None, *, bracket: tuple[float, float] = DEFAULT_BRACKET,
                   previous: Optional["ThresholdResult"] = None,
                   start_alpha: Optional[float] = None) -> ThresholdResult:
    """Level-r critical density.

    ``previous`` is the level-(r-1) result used to seed the search (it is
    computed when omitted); ``settings.seed_point``, when given, is used as
    the sole starting point instead.
    """
    t0 = time.perf_counter()
    if alpha_tol is None:
        alpha_tol = default_alpha_tol(r)
    if alpha_tol < 1e-5:
        raise ParameterError("alpha_tol must be at least 1e-5")
    lo, hi = bracket
    if not 0.0 < lo < hi:
        raise ParameterError(f"invalid bracket {bracket}")
    if r == 1:
        alpha_c = level1_threshold(kappa)
        st = solve_stationary(1, kappa, alpha_c)
        return ThresholdResult(
            r=1, kappa=kappa, alpha_critical=alpha_c, stationary=st,
            bracket=(alpha_c - alpha_tol, alpha_c + alpha_tol), psi_residual=abs(st.psi_value),
            diagnostics={"closed_form": True, "wall_time": time.perf_counter() - t0},
        )
    if r < 1:
        raise ParameterError(f"level must be >= 1, got {r}")
    branch = _Branch(r, kappa, settings, free=True)
    diagnostics: dict = {}
    def start(default: float) -> float:
        return _clamp(start_alpha if start_alpha is not None else default, lo, hi)

    if settings.seed_point is not None:
        a0 = start(_START_ALPHA.get(r, 0.5 * (lo + hi)))
        first = solve_stationary(r, kappa, a0, settings)
        diagnostics["seeds"] = [{"seed": "user", "psi": first.psi_value, "chosen": True}]
    elif r == 2:
        a0 = start(_START_ALPHA[2])
        first = solve_stationary(2, kappa, a0, replace(settings, seed_point=default_seed(2)))
        diagnostics["seeds"] = [{"seed": "default", "psi": first.psi_value, "chosen": True}]
    else:
        if previous is None or previous.r != r - 1:
            previous = find_threshold(r - 1, kappa, settings, None, bracket=bracket)
        a0 = start(previous.alpha_critical)
        prev_point = previous.stationary.point
        if previous.stationary.alpha != a0:
            prev_point = solve_stationary(
                r - 1, kappa, a0, replace(settings, seed_point=prev_point)
            ).point
        first, report = multistart(r, kappa, a0, settings, candidate_seeds(prev_point))
        diagnostics["seeds"] = report
    branch.history.append((first.alpha, first.psi_value))
    branch.solves += 1
    branch.evaluations += first.evaluations
    if first.degenerate is not None:
        warnings.warn(f"level-{r} branch starts at a degenerate point: {first.degenerate}")
    result = _search(branch, first, alpha_tol, (lo, hi), diagnostics, restricted=False)
    result.diagnostics["wall_time"] = time.perf_counter() - t0
    return result


def restricted_threshold(r: int, kappa: float = 0.0, settings: SolverSettings = SolverSettings(),
                         alpha_tol: Optional[float] = None, *,
                         bracket: tuple[float, float] = DEFAULT_BRACKET,
                         probe_exponents: Sequence[float] = (0.5, 0.9)) -> ThresholdResult:
    """Threshold with the exponents held in the decreasing regime.

    Every scaled exponent is pinned at 1, the edge of the decreasing regime,
    and only p and q are solved for.  At the located density the stationarised
    functional is also evaluated with all exponents at each value in
    ``probe_exponents``; the diagnostics record whether the pinned value is the
    largest, i.e. whether the constrained maximum sits on the edge.
    """
    t0 = time.perf_counter()
    if r < 2:
        raise ParameterError("the restricted problem needs r >= 2")
    if alpha_tol is None:
        alpha_tol = default_alpha_tol(min(r, 3))
    if r == 2:
        res = find_threshold(2, kappa, settings, alpha_tol, bracket=bracket)
        return replace(res, restricted=True)
    a0 = _START_ALPHA[2]
    base = solve_stationary(2, kappa, a0, replace(settings, seed_point=default_seed(2))).point
    seed = base
    while seed.r < r:
        seed = lift_inner(seed, 1.0)
    branch = _Branch(r, kappa, settings, free=False)
    first = solve_stationary(r, kappa, a0, replace(settings, seed_point=seed), free_exponents=False)
    branch.history.append((first.alpha, first.psi_value))
    diagnostics: dict = {"pinned_exponent": 1.0}
    result = _search(branch, first, alpha_tol, bracket, diagnostics, restricted=True)
    probes = []
    for c in probe_exponents:
        pt = replace(result.stationary.point, exp_c_s=(float(c),) * (r - 2))
        # below 1 the maximiser slides toward merged levels, so the budget is
        # capped; an unconverged value still bounds the maximum from below
        probe_settings = replace(settings, seed_point=pt, max_iters=15)
        try:
            pr = solve_stationary(r, kappa, result.alpha_critical, probe_settings,
                                  free_exponents=False, profile=False, fallback=False)
        except NonConvergenceError as exc:
            pr = exc.best
        if pr is None:
            probes.append({"exponent": c, "psi": None, "converged": False})
        else:
            probes.append({"exponent": c, "psi": pr.psi_value, "converged": pr.converged})
    edge = result.stationary.psi_value
    # probes near merged levels differ from the edge by quadrature noise only
    slack = max(1e-6, result.diagnostics["half_order_consistency"])
    result.diagnostics["exponent_probes"] = probes
    result.diagnostics["edge_is_max"] = all(
        p["psi"] is None or p["psi"] <= edge + slack for p in probes
    )
    result.diagnostics["wall_time"] = time.perf_counter() - t0
    return result


def sweep_levels(max_r: int, kappa: float = 0.0, settings: SolverSettings = SolverSettings(),
                 alpha_tols: Optional[dict[int, float]] = None) -> list[ThresholdResult]:
    """Thresholds for levels 1..max_r, each level seeded from the one below."""
    if max_r < 1:
        raise ParameterError("max_r must be >= 1")
    if max_r > 5:
        warnings.warn("levels above 5 are unsupported; cost grows as order^(r-1)")
    alpha_tols = alpha_tols or {}
    results: list[ThresholdResult] = []
    prev = None
    for r in range(1, max_r + 1):
        res = find_threshold(r, kappa, settings, alpha_tols.get(r), previous=prev)
        results.append(res)
        prev = res if r >= 2 else None
    alphas = [res.alpha_critical for res in results]
    if any(b > a for a, b in zip(alphas, alphas[1:])):
        raise MonotonicityError(f"thresholds increase with level: {alphas}", results)
    return results
