"""The scaled level-r lifted functional and its closed-form pieces.

A level-r point carries overlaps ``p = (p_2..p_r)``, scaled overlaps
``q_s = (q_2..q_r)`` and scaled exponents ``exp_c_s = (c_3..c_r)``.  With the
boundary values ``p_1 = 1`` and ``p_{r+1} = q_{r+1} = 0`` the functional is

    psi = quadratic - binary - alpha * sphere

where ``binary`` and ``sphere`` are nested log-moment expectations over
independent standard normals, one per level, with the exponents applied from
the innermost level outwards.  Positive ``psi`` means alpha lies above the
level-r critical density.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import kernels
from .quadrature import (
    EvaluationError,
    ParameterError,
    QuadratureRule,
    gaussian_max_square_moment,
    log_half_erfc,
    make_hermite_rule,
)

_SQRT2 = math.sqrt(2.0)
_LOG2 = math.log(2.0)


class DomainError(ValueError):
    """A lifting point violates one of its ordering or range constraints."""


@dataclass(frozen=True)
class LiftingPoint:
    """Free parameters of a level-r functional (``r >= 2``)."""

    r: int
    p: tuple[float, ...]
    q_s: tuple[float, ...]
    exp_c_s: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "p", tuple(float(v) for v in self.p))
        object.__setattr__(self, "q_s", tuple(float(v) for v in self.q_s))
        object.__setattr__(self, "exp_c_s", tuple(float(v) for v in self.exp_c_s))
        r = self.r
        if isinstance(r, bool) or not isinstance(r, (int, np.integer)) or r < 2:
            raise DomainError(f"level r must be an integer >= 2, got {r!r}")
        if len(self.p) != r - 1 or len(self.q_s) != r - 1 or len(self.exp_c_s) != r - 2:
            raise DomainError(
                f"level {r} needs {r - 1} p values, {r - 1} q_s values and "
                f"{r - 2} exponents; got {len(self.p)}, {len(self.q_s)}, {len(self.exp_c_s)}"
            )
        values = self.p + self.q_s + self.exp_c_s
        if not all(math.isfinite(v) for v in values):
            raise DomainError("all parameters must be finite")
        if not self.p[0] < 1.0:
            raise DomainError(f"p2 must be < 1, got {self.p[0]}")
        if self.p[-1] < 0.0:
            raise DomainError(f"p{r} must be >= 0, got {self.p[-1]}")
        for k in range(1, r - 1):
            if self.p[k] > self.p[k - 1]:
                raise DomainError(f"p{k + 2} = {self.p[k]} exceeds p{k + 1} = {self.p[k - 1]}")
            if self.q_s[k] > self.q_s[k - 1]:
                raise DomainError(
                    f"qs{k + 2} = {self.q_s[k]} exceeds qs{k + 1} = {self.q_s[k - 1]}"
                )
        if self.q_s[-1] < 0.0:
            raise DomainError(f"qs{r} must be >= 0, got {self.q_s[-1]}")
        for k, c in enumerate(self.exp_c_s):
            if not c > 0.0:
                raise DomainError(f"cs{k + 3} must be > 0, got {c}")

    @classmethod
    def zero(cls, r: int = 2, exponent: float = 1.0) -> "LiftingPoint":
        """The point with every overlap at zero."""
        return cls(r, (0.0,) * (r - 1), (0.0,) * (r - 1), (exponent,) * (r - 2))

    def as_dict(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for k, v in enumerate(self.p):
            out[f"p{k + 2}"] = v
        for k, v in enumerate(self.q_s):
            out[f"qs{k + 2}"] = v
        for k, v in enumerate(self.exp_c_s):
            out[f"cs{k + 3}"] = v
        return out


@dataclass(frozen=True)
class Level1Point:
    gamma_sq: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.gamma_sq) and self.gamma_sq > 0.0):
            raise DomainError(f"gamma_sq must be positive, got {self.gamma_sq}")


@dataclass(frozen=True)
class MixCoefficients:
    """Per-level field scales, innermost level first."""

    b: tuple[float, ...]
    c: tuple[float, ...]


@dataclass(frozen=True)
class QuadOrders:
    """Per-level quadrature orders for the two nested expectations, innermost first."""

    binary: tuple[int, ...]
    sphere: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "binary", tuple(int(v) for v in self.binary))
        object.__setattr__(self, "sphere", tuple(int(v) for v in self.sphere))
        if len(self.binary) != len(self.sphere) or not self.binary:
            raise ParameterError("binary and sphere orders need the same nonzero length")

    @property
    def levels(self) -> int:
        return len(self.binary)

    def halved(self) -> "QuadOrders":
        return QuadOrders(
            tuple(max(2, o // 2) for o in self.binary), tuple(max(2, o // 2) for o in self.sphere)
        )

    @classmethod
    def uniform(cls, order: int, r: int) -> "QuadOrders":
        return cls((order,) * (r - 1), (order,) * (r - 1))

    def as_dict(self) -> dict[str, list[int]]:
        return {"binary": list(self.binary), "sphere": list(self.sphere)}


# Orders chosen by a convergence study at the reference points of each level:
# the outermost binary level resolves a rounded |x| kink and needs many nodes,
# while the innermost sphere level resolves an erfc edge of width sqrt(1 - p2).
_DEFAULT_ORDERS = {
    2: QuadOrders((256,), (128,)),
    3: QuadOrders((32, 192), (128, 96)),
    4: QuadOrders((24, 24, 160), (128, 96, 64)),
    5: QuadOrders((20, 20, 20, 128), (40, 24, 24, 24)),
}


def default_orders(r: int) -> QuadOrders:
    """Default per-level orders for level ``r`` (levels above 5 reuse the level-5 shape)."""
    if r < 2:
        raise ParameterError("quadrature orders exist only for r >= 2")
    if r in _DEFAULT_ORDERS:
        return _DEFAULT_ORDERS[r]
    base = _DEFAULT_ORDERS[5]
    extra = r - 5
    return QuadOrders(
        (base.binary[0],) * extra + base.binary, (base.sphere[0],) * extra + base.sphere
    )


OrderSpec = Union[int, QuadratureRule, Sequence[Union[int, QuadratureRule]], QuadOrders, None]


def _rules(spec, r: int, side: str) -> list[QuadratureRule]:
    levels = r - 1
    if spec is None:
        spec = default_orders(r)
    if isinstance(spec, QuadOrders):
        if spec.levels != levels:
            raise ParameterError(f"level {r} needs {levels} orders per side, got {spec.levels}")
        spec = spec.binary if side == "binary" else spec.sphere
    if isinstance(spec, (QuadratureRule, int, np.integer)):
        spec = [spec] * levels
    spec = list(spec)
    if len(spec) != levels:
        raise ParameterError(f"level {r} needs {levels} rules, got {len(spec)}")
    return [s if isinstance(s, QuadratureRule) else make_hermite_rule(s) for s in spec]


def mix_coefficients(point: LiftingPoint) -> MixCoefficients:
    pp = (1.0,) + point.p + (0.0,)
    qq = point.q_s + (0.0,)
    b = tuple(math.sqrt(max(pp[k] - pp[k + 1], 0.0)) for k in range(1, point.r))
    c = tuple(math.sqrt(max(qq[k] - qq[k + 1], 0.0)) for k in range(point.r - 1))
    return MixCoefficients(b=b, c=c)


def _nested(kind, inv_scale, shift, coef, expo, rules) -> float:
    value, bad_level, bad_node = kernels.nested_log_expect(
        kind,
        inv_scale,
        shift,
        np.asarray(coef, dtype=float),
        np.asarray(expo, dtype=float),
        [r.nodes for r in rules],
        [r.log_weights for r in rules],
        [r.weights for r in rules],
    )
    if bad_level >= 0:
        raise EvaluationError(
            f"non-finite value at nesting depth {bad_level}, node {bad_node!r}",
            node=bad_node,
            depth=bad_level,
        )
    return float(value)


def binary_term(point: LiftingPoint, rule: OrderSpec = None) -> float:
    """Nested log-moment of ``2 cosh`` of the binary-side field."""
    mix = mix_coefficients(point)
    return _nested(
        kernels.BASE_BINARY, 1.0, 0.0, mix.c, point.exp_c_s, _rules(rule, point.r, "binary")
    )


def sphere_term(point: LiftingPoint, kappa: float = 0.0, rule: OrderSpec = None) -> float:
    """Nested log-moment of ``erfc/2`` of the sphere-side field; never positive."""
    mix = mix_coefficients(point)
    inv_scale = 1.0 / (_SQRT2 * math.sqrt(1.0 - point.p[0]))
    return _nested(
        kernels.BASE_SPHERE,
        inv_scale,
        float(kappa),
        mix.b,
        point.exp_c_s,
        _rules(rule, point.r, "sphere"),
    )


def quadratic_term(point: LiftingPoint) -> float:
    pp = (1.0,) + point.p + (0.0,)
    qq = (0.0,) + point.q_s + (0.0,)
    total = 0.5 * (1.0 - point.p[0]) * point.q_s[0]
    for k in range(3, point.r + 1):
        total += 0.5 * (pp[k - 2] * qq[k - 2] - pp[k - 1] * qq[k - 1]) * point.exp_c_s[k - 3]
    return total


@dataclass(frozen=True)
class PsiTerms:
    quadratic: float
    binary: float
    sphere: float
    alpha: float

    @property
    def psi(self) -> float:
        return self.quadratic - self.binary - self.alpha * self.sphere


def psi_terms(point: LiftingPoint, kappa: float, alpha: float, rule: OrderSpec = None) -> PsiTerms:
    if not alpha > 0.0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    return PsiTerms(
        quadratic=quadratic_term(point),
        binary=binary_term(point, rule),
        sphere=sphere_term(point, kappa, rule),
        alpha=float(alpha),
    )


def psi_bar(point: LiftingPoint, kappa: float, alpha: float, rule: OrderSpec = None) -> float:
    """Scaled level-r functional; its zero in ``alpha`` is the level-r threshold."""
    return psi_terms(point, kappa, alpha, rule).psi


# ---------------------------------------------------------------- level one


def level1_psi(point: Level1Point, kappa: float, alpha: float) -> float:
    g = point.gamma_sq
    return -math.sqrt(2.0 / math.pi) + g + alpha * gaussian_max_square_moment(kappa) / (4.0 * g)


def level1_gamma(kappa: float, alpha: float) -> float:
    """Minimiser of ``level1_psi`` over ``gamma_sq``."""
    return 0.5 * math.sqrt(alpha * gaussian_max_square_moment(kappa))


def level1_threshold(kappa: float) -> float:
    moment = gaussian_max_square_moment(kappa)
    if moment == 0.0:
        return math.inf
    return 2.0 / (math.pi * moment)


# ------------------------------------------------ finite-exponent inner forms


def inner_binary_closed_form(c2: float, q2: float, z: float) -> float:
    """``E_h exp(c2 |sqrt(q2) z + sqrt(1 - q2) h|)`` in closed form."""
    if not c2 > 0.0 or not 0.0 <= q2 < 1.0:
        raise ParameterError("need c2 > 0 and 0 <= q2 < 1")
    s = math.sqrt(1.0 - q2)
    a = math.sqrt(q2) * z
    base = 0.5 * (c2 * s) ** 2 + _LOG2
    lo = base - c2 * a + log_half_erfc(-(c2 * s - a / s) / _SQRT2)
    hi = base + c2 * a + log_half_erfc(-(c2 * s + a / s) / _SQRT2)
    return 0.5 * math.exp(np.logaddexp(lo, hi))


def inner_sphere_closed_form(c2: float, gamma_sq: float, p2: float, kappa: float, w: float) -> float:
    """``E_u exp(-B max(sqrt(1 - p2) u + C, 0)^2)`` with ``B = c2/(4 gamma_sq)``, ``C = sqrt(p2) w + kappa``."""
    if not c2 > 0.0 or not gamma_sq > 0.0 or not 0.0 <= p2 < 1.0:
        raise ParameterError("need c2 > 0, gamma_sq > 0 and 0 <= p2 < 1")
    b = c2 / (4.0 * gamma_sq)
    cc = math.sqrt(p2) * w + kappa
    s2 = 1.0 - p2
    h = -cc / math.sqrt(s2)
    d = 2.0 * s2 * b + 1.0
    log_zd = -b * cc * cc / d - 0.5 * math.log(d) + log_half_erfc(h / math.sqrt(2.0 * d))
    log_zu = log_half_erfc(-h / _SQRT2)
    return math.exp(log_zd) + math.exp(log_zu)
