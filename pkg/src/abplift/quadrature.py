"""Expectations against the standard normal measure.

Gauss-Hermite rules are built for the weight exp(-x^2/2)/sqrt(2*pi), so that

    E f(h) ~= sum_i w_i f(x_i),    sum_i w_i = 1.

Nodes come from the Golub-Welsch eigenproblem of the probabilists' Hermite
Jacobi matrix.  Weights are accumulated in the log domain from the orthonormal
three-term recurrence, which keeps orders up to 512 free of overflow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import erfc, erfcx, logsumexp

MAX_ORDER = 512

_LOG2 = math.log(2.0)
# past this point erfc(x) is evaluated through its scaled form
_ERFC_TAIL = 6.0


class ParameterError(ValueError):
    """Raised when an argument lies outside its documented domain."""


class EvaluationError(ArithmeticError):
    """Raised when an integrand produces a non-finite value at a node."""

    def __init__(self, message: str, node: float | None = None, depth: int | None = None):
        super().__init__(message)
        self.node = node
        self.depth = depth


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights for E over a standard normal variable."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        for arr in (self.nodes, self.weights, self.log_weights):
            arr.setflags(write=False)


_RULE_CACHE: dict[int, QuadratureRule] = {}


def _hermite_log_weights(x: np.ndarray) -> np.ndarray:
    # w_i = 1 / sum_k p_k(x_i)^2 for the orthonormal He_k / sqrt(k!)
    q = x.size
    log_scale = np.zeros(q)
    acc = np.ones(q)
    p_prev = np.zeros(q)
    p = np.ones(q)
    for k in range(1, q):
        p_next = (x * p - math.sqrt(k - 1) * p_prev) / math.sqrt(k)
        p_prev, p = p, p_next
        acc += p * p
        big = acc > 1e200
        if big.any():
            s = np.sqrt(acc[big])
            p[big] /= s
            p_prev[big] /= s
            log_scale[big] += np.log(acc[big])
            acc[big] = 1.0
    return -(log_scale + np.log(acc))


def make_hermite_rule(order: int) -> QuadratureRule:
    """Gauss-Hermite rule for the standard normal weight.

    Parameters
    ----------
    order : int
        Number of nodes, ``1 <= order <= 512``.  The rule integrates
        polynomials of degree ``2*order - 1`` exactly.

    Returns
    -------
    QuadratureRule
        Symmetric nodes, weights normalised to sum to one, and the matching
        log-weights (finite even where the linear weight underflows).
    """
    if isinstance(order, bool) or not isinstance(order, (int, np.integer)):
        raise ParameterError(f"order must be an integer, got {order!r}")
    order = int(order)
    if not 1 <= order <= MAX_ORDER:
        raise ParameterError(f"order must lie in [1, {MAX_ORDER}], got {order}")
    cached = _RULE_CACHE.get(order)
    if cached is not None:
        return cached
    if order == 1:
        x = np.zeros(1)
        lw = np.zeros(1)
    else:
        off = np.sqrt(np.arange(1, order, dtype=float))
        x = eigh_tridiagonal(np.zeros(order), off, eigvals_only=True)
        x = 0.5 * (x - x[::-1])
        lw = _hermite_log_weights(x)
        lw = 0.5 * (lw + lw[::-1])
        lw -= logsumexp(lw)
    w = np.exp(lw)
    w /= w.sum()
    rule = QuadratureRule(order=order, nodes=x, weights=w, log_weights=lw)
    _RULE_CACHE[order] = rule
    return rule


def _checked(values, rule: QuadratureRule) -> np.ndarray:
    vals = np.asarray(values, dtype=float)
    if vals.shape == ():
        vals = np.full(rule.order, float(vals))
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.argmax(bad))
        raise EvaluationError(
            f"integrand is not finite at node {rule.nodes[i]!r}", node=float(rule.nodes[i])
        )
    return vals


def expect_1d(f: Callable[[np.ndarray], np.ndarray], rule: QuadratureRule) -> float:
    """E f(h) for standard normal h.  ``f`` is called once on the node array."""
    vals = _checked(f(rule.nodes), rule)
    return float(math.fsum(rule.weights * vals))


def log_expect_1d(logf: Callable[[np.ndarray], np.ndarray], rule: QuadratureRule) -> float:
    """log E exp(logf(h)), summed with a max shift so large exponents do not overflow."""
    vals = _checked(logf(rule.nodes), rule)
    z = vals + rule.log_weights
    top = float(np.max(z))
    return top + math.log(math.fsum(np.exp(z - top)))


def log_two_cosh(z):
    """log(2 cosh z), evaluated as |z| + log1p(exp(-2|z|))."""
    a = np.abs(np.asarray(z, dtype=float))
    out = a + np.log1p(np.exp(-2.0 * a))
    return float(out) if out.ndim == 0 else out


def log_half_erfc(x):
    """log(erfc(x) / 2), finite for all real ``x``.

    For ``x > 6`` the value is assembled as ``-x^2 + log(erfcx(x)) - log 2``
    from the scaled complementary error function, so it stays accurate long
    after ``erfc`` itself underflows.
    """
    xa = np.asarray(x, dtype=float)
    out = np.empty_like(xa)
    tail = xa > _ERFC_TAIL
    neg = xa < 0.0
    mid = ~tail & ~neg
    if mid.any():
        out[mid] = np.log(erfc(xa[mid])) - _LOG2
    if neg.any():
        out[neg] = np.log1p(-0.5 * erfc(-xa[neg]))
    if tail.any():
        xt = xa[tail]
        out[tail] = -xt * xt + np.log(erfcx(xt)) - _LOG2
    return float(out) if out.ndim == 0 else out


def gaussian_max_square_moment(kappa: float) -> float:
    """E max(kappa + u, 0)^2 for standard normal u."""
    kappa = float(kappa)
    if not math.isfinite(kappa):
        raise ParameterError("kappa must be finite")
    return (
        kappa * math.exp(-0.5 * kappa * kappa) / math.sqrt(2.0 * math.pi)
        + (kappa * kappa + 1.0) * 0.5 * math.erfc(-kappa / math.sqrt(2.0))
    )
