"""Stationary points of the lifted functional at fixed (r, kappa, alpha).

The search runs in unconstrained coordinates:

* ``p_k = p_{k-1} * sigmoid(t_k)`` with ``p_1 = 1`` (stick breaking),
* ``q_2 = exp(u_2)`` and ``q_k = q_{k-1} * sigmoid(u_k)``,
* ``c_k = exp(v_k)``,

so every iterate satisfies the ordering constraints.  Gradient and Hessian
are central finite differences of ``psi_bar`` in these coordinates.  The
stationarity system is solved by Newton steps with a backtracking line search
on ``|grad|^2``, falling back to a Levenberg-Marquardt solve of the same
system when Newton stalls.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit, logit

from .functional import (
    DomainError,
    Level1Point,
    LiftingPoint,
    QuadOrders,
    default_orders,
    level1_gamma,
    level1_psi,
    psi_bar,
)
from .quadrature import EvaluationError, ParameterError

# transformed coordinates beyond this magnitude put sigmoid/exp in saturation
_COORD_LIMIT = 30.0
# relative separation below which two levels count as merged or a level as vanished
_DEGENERATE_GAP = 1e-3


class NonConvergenceError(RuntimeError):
    """The stationarity solve stopped before reaching the gradient tolerance."""

    def __init__(self, message: str, best: Optional["StationaryResult"] = None):
        super().__init__(message)
        self.best = best


class BoundaryError(DomainError):
    """An iterate left the interior of the parameter domain."""


@dataclass(frozen=True)
class SolverSettings:
    fd_step: float = 1e-4
    grad_tol: float = 1e-6
    max_iters: int = 40
    # one set of orders, or a mapping from level to orders
    quad_orders: Optional[Union[QuadOrders, Mapping[int, QuadOrders]]] = None
    seed_point: Optional[LiftingPoint] = None

    def __post_init__(self) -> None:
        if not 0.0 < self.fd_step < 1e-2:
            raise ParameterError(f"fd_step must lie in (0, 1e-2), got {self.fd_step}")
        if not self.grad_tol > 0.0:
            raise ParameterError(f"grad_tol must be positive, got {self.grad_tol}")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be at least 1")

    def orders_for(self, r: int) -> QuadOrders:
        spec = self.quad_orders
        if isinstance(spec, Mapping):
            spec = spec.get(r)
        if spec is not None and spec.levels == r - 1:
            return spec
        return default_orders(r)


@dataclass(frozen=True)
class SaddleProfile:
    """Curvature of psi_bar at a stationary point.

    ``second_differences`` holds the raw central second difference along each
    transformed coordinate.  ``exponent_curvature`` holds the eigenvalues of
    the exponent block after the p and q coordinates are held stationary
    (the Schur complement of the Hessian); these are the second differences
    of the stationarised functional along the exponent directions.
    """

    second_differences: dict[str, float]
    exponent_curvature: tuple[float, ...]
    tolerance: float

    @property
    def maximization_type(self) -> bool:
        return all(v <= self.tolerance for v in self.exponent_curvature)

    @property
    def signs(self) -> dict[str, int]:
        return {k: int(np.sign(v)) for k, v in self.second_differences.items()}

    def as_dict(self) -> dict:
        return {
            "second_differences": dict(self.second_differences),
            "exponent_curvature": list(self.exponent_curvature),
            "maximization_type": self.maximization_type,
        }


@dataclass(frozen=True)
class StationaryResult:
    point: LiftingPoint | Level1Point
    psi_value: float
    grad_residual: float
    saddle_profile: Optional[SaddleProfile]
    iterations: int
    alpha: float
    kappa: float
    converged: bool = True
    degenerate: Optional[str] = None
    frozen_exponents: bool = False
    orders: Optional[QuadOrders] = None
    evaluations: int = 0
    gradient: tuple[float, ...] = ()
    wall_time: float = 0.0
    hessian: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def r(self) -> int:
        return 1 if isinstance(self.point, Level1Point) else self.point.r

    def as_dict(self) -> dict:
        if isinstance(self.point, Level1Point):
            point = {"gamma_sq": self.point.gamma_sq}
        else:
            point = self.point.as_dict()
        return {
            "r": self.r,
            "alpha": self.alpha,
            "kappa": self.kappa,
            "point": point,
            "psi_value": self.psi_value,
            "grad_residual": self.grad_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "degenerate": self.degenerate,
            "frozen_exponents": self.frozen_exponents,
            "saddle_profile": None if self.saddle_profile is None else self.saddle_profile.as_dict(),
            "evaluations": self.evaluations,
        }


# ------------------------------------------------------------ coordinates


def coordinate_names(r: int, free_exponents: bool = True) -> list[str]:
    names = [f"t{k}" for k in range(2, r + 1)] + [f"u{k}" for k in range(2, r + 1)]
    if free_exponents:
        names += [f"v{k}" for k in range(3, r + 1)]
    return names


def encode(point: LiftingPoint, free_exponents: bool = True) -> np.ndarray:
    """Transformed coordinates of ``point``; infinite entries mark boundary points."""
    p, q = point.p, point.q_s
    with np.errstate(divide="ignore", invalid="ignore"):
        t = [logit(p[0])] + [logit(p[k] / p[k - 1]) if p[k - 1] > 0 else -np.inf for k in range(1, len(p))]
        u = [math.log(q[0]) if q[0] > 0 else -np.inf]
        u += [logit(q[k] / q[k - 1]) if q[k - 1] > 0 else -np.inf for k in range(1, len(q))]
    v = [math.log(c) for c in point.exp_c_s] if free_exponents else []
    return np.array(t + u + v, dtype=float)


def decode(theta: np.ndarray, r: int, frozen: Sequence[float] | None = None) -> LiftingPoint:
    n = r - 1
    theta = np.asarray(theta, dtype=float)
    p, prev = [], 1.0
    for k in range(n):
        prev = prev * float(expit(theta[k]))
        p.append(prev)
    q = [math.exp(theta[n])]
    for k in range(1, n):
        q.append(q[-1] * float(expit(theta[n + k])))
    if frozen is None:
        c = [math.exp(v) for v in theta[2 * n:]]
    else:
        c = list(frozen)
    return LiftingPoint(r, p, q, c)


# ------------------------------------------------------ finite differences


class _Objective:
    """psi_bar in transformed coordinates, with an evaluation counter."""

    def __init__(self, r, kappa, alpha, orders, frozen=None):
        self.r, self.kappa, self.alpha, self.orders = r, kappa, alpha, orders
        self.frozen = frozen
        self.calls = 0

    def __call__(self, theta: np.ndarray) -> float:
        if not np.all(np.isfinite(theta)) or np.max(np.abs(theta)) > _COORD_LIMIT + 1.0:
            raise BoundaryError("iterate left the interior of the parameter domain")
        self.calls += 1
        return psi_bar(decode(theta, self.r, self.frozen), self.kappa, self.alpha, self.orders)


def _grad(f: Callable, x: np.ndarray, h: float) -> np.ndarray:
    g = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def _grad_hess(f: Callable, x: np.ndarray, h: float):
    n = x.size
    f0 = f(x)
    g = np.empty(n)
    H = np.empty((n, n))
    eye = np.eye(n) * h
    for i in range(n):
        fp, fm = f(x + eye[i]), f(x - eye[i])
        g[i] = (fp - fm) / (2.0 * h)
        H[i, i] = (fp - 2.0 * f0 + fm) / (h * h)
    for i in range(n):
        for j in range(i + 1, n):
            H[i, j] = H[j, i] = (
                f(x + eye[i] + eye[j])
                - f(x + eye[i] - eye[j])
                - f(x - eye[i] + eye[j])
                + f(x - eye[i] - eye[j])
            ) / (4.0 * h * h)
    return f0, g, H


def _check_interior(theta: np.ndarray, h: float) -> None:
    if not np.all(np.isfinite(theta)):
        raise DomainError("point lies on the boundary of the parameter domain")
    if np.max(np.abs(theta)) + 2.0 * h > _COORD_LIMIT:
        raise DomainError("point is too close to the boundary for central differences")


def fd_gradient(point: LiftingPoint, kappa: float, alpha: float, settings: SolverSettings,
                free_exponents: bool = True) -> np.ndarray:
    """Central-difference gradient of psi_bar in transformed coordinates."""
    theta = encode(point, free_exponents)
    _check_interior(theta, settings.fd_step)
    frozen = None if free_exponents else point.exp_c_s
    f = _Objective(point.r, kappa, alpha, settings.orders_for(point.r), frozen)
    return _grad(f, theta, settings.fd_step)


def fd_hessian(point: LiftingPoint, kappa: float, alpha: float, settings: SolverSettings,
               free_exponents: bool = True) -> np.ndarray:
    theta = encode(point, free_exponents)
    _check_interior(theta, settings.fd_step)
    frozen = None if free_exponents else point.exp_c_s
    f = _Objective(point.r, kappa, alpha, settings.orders_for(point.r), frozen)
    return _grad_hess(f, theta, settings.fd_step)[2]


def saddle_profile(H: np.ndarray, r: int, free_exponents: bool, tol: float) -> SaddleProfile:
    names = coordinate_names(r, free_exponents)
    diag = {name: float(H[i, i]) for i, name in enumerate(names)}
    ne = r - 2 if free_exponents else 0
    if ne == 0:
        return SaddleProfile(diag, (), tol)
    A, B, C = H[:-ne, :-ne], H[:-ne, -ne:], H[-ne:, -ne:]
    try:
        S = C - B.T @ np.linalg.solve(A, B)
    except np.linalg.LinAlgError:
        S = C - B.T @ np.linalg.lstsq(A, B, rcond=None)[0]
    S = 0.5 * (S + S.T)
    return SaddleProfile(diag, tuple(float(v) for v in np.linalg.eigvalsh(S)), tol)


def degeneracy(point: LiftingPoint) -> Optional[str]:
    """Describe a merged or vanishing level, or None for a proper level-r point."""
    r = point.r
    p, q = point.p, point.q_s
    for k in range(1, r - 1):
        if q[k - 1] - q[k] < _DEGENERATE_GAP * max(1.0, q[k - 1]):
            return f"qs{k + 1} and qs{k + 2} coincide"
        if p[k - 1] - p[k] < _DEGENERATE_GAP:
            return f"p{k + 1} and p{k + 2} coincide"
    if q[-1] < _DEGENERATE_GAP:
        return f"qs{r} vanishes"
    if p[-1] < _DEGENERATE_GAP:
        return f"p{r} vanishes"
    cs = point.exp_c_s
    for k in range(len(cs) - 1):
        if abs(cs[k + 1] - cs[k]) < _DEGENERATE_GAP * max(cs[k], cs[k + 1]):
            return f"cs{k + 3} and cs{k + 4} coincide"
    for k, c in enumerate(cs):
        if abs(c - 1.0) < _DEGENERATE_GAP:
            return f"cs{k + 3} is 1, the level merges with its neighbour"
        if c < _DEGENERATE_GAP:
            return f"cs{k + 3} vanishes"
    return None


# ------------------------------------------------------------------ solver


def _newton(f, x, settings, H=None):
    """Damped Newton iteration on grad psi = 0.

    A supplied Hessian is reused with Broyden updates (only gradients are
    recomputed); a fresh finite-difference Hessian is formed at the start
    when none is given and whenever the reused one stops making progress.
    Returns ``(x, f0, g, H, iterations, converged, fresh)`` where ``fresh``
    tells whether ``H`` is an exact finite-difference Hessian at ``x``.
    """
    h = settings.fd_step
    if H is None:
        f0, g, H = _grad_hess(f, x, h)
        fresh = True
    else:
        f0, g = f(x), _grad(f, x, h)
        fresh = False
    it = 0
    while it < settings.max_iters:
        if float(np.max(np.abs(g))) <= settings.grad_tol:
            return x, f0, g, H, it, True, fresh
        # minimum-norm step: flat directions (merged levels) are left alone
        d = np.linalg.lstsq(H, -g, rcond=1e-9)[0]
        if not np.all(np.isfinite(d)):
            d = -g
        # cap the step so a near-singular Hessian cannot throw the iterate into saturation
        scale = float(np.max(np.abs(d)))
        if scale > 2.0:
            d *= 2.0 / scale
        merit = float(g @ g)
        lam, accepted = 1.0, False
        while lam >= 1.0 / 64.0:
            xn = x + lam * d
            try:
                gn = _grad(f, xn, h)
            except (BoundaryError, EvaluationError):
                lam *= 0.5
                continue
            if float(gn @ gn) < (1.0 - 1e-4 * lam) * merit:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            if fresh:
                break
            f0, g, H = _grad_hess(f, x, h)
            fresh = True
            continue
        step, dg = xn - x, gn - g
        x, g = xn, gn
        f0 = f(x)
        it += 1
        if float(gn @ gn) > 0.25 * merit and not fresh:
            # slow progress with an inherited Hessian: rebuild it
            f0, g, H = _grad_hess(f, x, h)
            fresh = True
        else:
            H = H + np.outer(dg - H @ step, step) / float(step @ step)
            fresh = False
    return x, f0, g, H, it, float(np.max(np.abs(g))) <= settings.grad_tol, fresh


def _levenberg(f, x, settings):
    h = settings.fd_step
    cache: dict[bytes, tuple] = {}

    def gh(z):
        key = z.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = _grad_hess(f, z, h)
        return cache[key]

    res = least_squares(
        lambda z: gh(z)[1],
        x,
        jac=lambda z: gh(z)[2],
        method="lm",
        xtol=1e-14,
        ftol=1e-15,
        gtol=1e-15,
        max_nfev=4 * settings.max_iters,
    )
    return res.x, int(res.nfev)


def solve_stationary(r: int, kappa: float, alpha: float, settings: SolverSettings = SolverSettings(),
                     *, free_exponents: bool = True, hessian: Optional[np.ndarray] = None,
                     profile: bool = True, fallback: bool = True) -> StationaryResult:
    """Locate a stationary point of psi_bar, starting from ``settings.seed_point``.

    With ``free_exponents=False`` the exponents of the seed are held fixed and
    only p and q are solved for.  ``hessian`` (in transformed coordinates) is
    an optional warm start for the Newton matrix, typically the Hessian of a
    nearby solve.  With ``profile=False`` the closing finite-difference
    Hessian is skipped when the iteration did not already produce one, and
    ``saddle_profile`` is left empty.  ``fallback=False`` skips the
    Levenberg-Marquardt retry after a failed Newton run, which bounds the
    cost at ``max_iters`` Newton steps.

    Raises :class:`NonConvergenceError` (carrying the best iterate) when the
    gradient tolerance is not met.
    """
    start = time.perf_counter()
    if r == 1:
        g = level1_gamma(kappa, alpha)
        pt = Level1Point(g)
        return StationaryResult(
            point=pt, psi_value=level1_psi(pt, kappa, alpha), grad_residual=0.0,
            saddle_profile=None, iterations=0, alpha=alpha, kappa=kappa,
            wall_time=time.perf_counter() - start,
        )
    if r < 1:
        raise ParameterError(f"level must be >= 1, got {r}")
    seed = settings.seed_point
    if seed is None:
        seed = default_seed(r)
    if seed.r != r:
        raise ParameterError(f"seed is a level-{seed.r} point, expected level {r}")
    orders = settings.orders_for(r)
    frozen = None if free_exponents else seed.exp_c_s
    f = _Objective(r, kappa, alpha, orders, frozen)
    x0 = encode(seed, free_exponents)
    _check_interior(x0, settings.fd_step)
    if hessian is not None and np.shape(hessian) != (x0.size, x0.size):
        hessian = None
    try:
        x, f0, g, H, iters, ok, fresh = _newton(f, x0, settings, hessian)
    except (BoundaryError, EvaluationError) as exc:
        raise NonConvergenceError(f"level {r} solve at alpha={alpha} failed: {exc}") from exc
    if not ok and fallback:
        try:
            x_lm, nfev = _levenberg(f, x, settings)
            f0, g, H = _grad_hess(f, x_lm, settings.fd_step)
            x, iters, fresh = x_lm, iters + nfev, True
            ok = float(np.max(np.abs(g))) <= settings.grad_tol
            if not ok:
                x, f0, g, H, more, ok, fresh = _newton(f, x, settings, H)
                iters += more
        except (BoundaryError, EvaluationError, np.linalg.LinAlgError, ValueError):
            pass
    if profile and not fresh:
        f0, g, H = _grad_hess(f, x, settings.fd_step)
        fresh = True
    point = decode(x, r, frozen)
    result = StationaryResult(
        point=point,
        psi_value=float(f0),
        grad_residual=float(np.max(np.abs(g))),
        saddle_profile=saddle_profile(H, r, free_exponents, settings.grad_tol) if fresh else None,
        iterations=iters,
        alpha=float(alpha),
        kappa=float(kappa),
        converged=ok,
        degenerate=degeneracy(point),
        frozen_exponents=not free_exponents,
        orders=orders,
        evaluations=f.calls,
        gradient=tuple(float(v) for v in g),
        wall_time=time.perf_counter() - start,
        hessian=H,
    )
    if not ok:
        raise NonConvergenceError(
            f"level {r} solve at alpha={alpha} stopped with |grad|={result.grad_residual:.2e}",
            best=result,
        )
    return result


# ------------------------------------------------------------------ seeds


def default_seed(r: int) -> LiftingPoint:
    """Generic interior starting point for a level-r solve."""
    if r == 2:
        return LiftingPoint(2, (0.5,), (2.0,))
    p = [1.0 - 0.5 ** (r - k) for k in range(1, r)]
    p[-1] = min(p[-1], 0.6)
    q = [2.0 * 0.5 ** k for k in range(r - 1)]
    c = [2.0 * (k + 1) for k in range(r - 2)]
    return LiftingPoint(r, p, q, c)


def lift_outer(point: LiftingPoint, exponent: float = 1.5) -> LiftingPoint:
    """Append a new outermost level below the current one.

    The new coordinates are ``p_{r+1} = 0.9 p_r``, ``q_{r+1} = 0.5 q_r`` and a
    new exponent ``exponent``.
    """
    return LiftingPoint(
        point.r + 1,
        point.p + (0.9 * point.p[-1],),
        point.q_s + (0.5 * point.q_s[-1],),
        point.exp_c_s + (exponent,),
    )


def lift_inner(point: LiftingPoint, exponent: float = 1.5) -> LiftingPoint:
    """Insert a new innermost level above the current one.

    ``p_2`` moves halfway towards 1, ``q_2`` doubles, and the new innermost
    exponent is ``exponent``; the old levels shift outwards unchanged.
    """
    p2 = 1.0 - 0.5 * (1.0 - point.p[0])
    return LiftingPoint(
        point.r + 1,
        (p2,) + point.p,
        (2.0 * point.q_s[0],) + point.q_s,
        (exponent,) + point.exp_c_s,
    )


def lift_resample(point: LiftingPoint, spread: float = 1.3) -> LiftingPoint:
    """Stretch the overlap profile of ``point`` over one more level.

    The sequence (1, p_2, ..., p_r) is interpolated linearly at r + 1 equally
    spaced positions, so the first and last entries are kept; q is interpolated
    the same way on a log scale.  The exponents are spread geometrically by a
    factor ``spread`` on either side of their (log-interpolated) old values.
    Needs ``point.r >= 3`` and positive q.
    """
    if point.r < 3:
        raise ParameterError("resampling needs at least one exponent to spread")
    if min(point.q_s) <= 0.0:
        raise ParameterError("resampling needs positive q values")
    r = point.r + 1
    p_old = np.array((1.0,) + point.p)
    p = np.interp(np.linspace(0.0, p_old.size - 1, r), np.arange(p_old.size), p_old)[1:]
    q_old = np.log(point.q_s)
    q = np.exp(np.interp(np.linspace(0.0, q_old.size - 1, r - 1), np.arange(q_old.size), q_old))
    c_old = np.log(point.exp_c_s)
    grid = np.linspace(0.0, c_old.size - 1, r - 2)
    c = np.exp(np.interp(grid, np.arange(c_old.size), c_old)) * np.geomspace(1.0 / spread, spread, r - 2)
    return LiftingPoint(r, tuple(p), tuple(q), tuple(c))


def embed_equal_neighbours(point: LiftingPoint, r: int, exponent: float = 1.0) -> LiftingPoint:
    """Represent ``point`` at level ``r`` by repeating its outermost overlaps.

    The added levels carry zero mixing, so psi_bar is unchanged for any value
    of the added exponents.
    """
    extra = r - point.r
    if extra < 0:
        raise ParameterError("target level is below the point's level")
    return LiftingPoint(
        r,
        point.p + (point.p[-1],) * extra,
        point.q_s + (point.q_s[-1],) * extra,
        point.exp_c_s + (exponent,) * extra,
    )


def with_exponents(point: LiftingPoint, exponents: Sequence[float]) -> LiftingPoint:
    return replace(point, exp_c_s=tuple(float(c) for c in exponents))
