"""Pure-numpy versions of the compiled kernels, with identical signatures."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp

from .quadrature import log_half_erfc as _log_half_erfc
from .quadrature import log_two_cosh as _log_two_cosh

BASE_BINARY = 0
BASE_SPHERE = 1

# cap on the number of doubles held by one evaluation slab
_SLAB = 1 << 21
# low bits enumerated as one vectorised block in the Gray scan
_GRAY_BLOCK = 12


def log_two_cosh_array(z):
    return np.asarray(_log_two_cosh(np.asarray(z, dtype=float)), dtype=float).reshape(-1)


def log_half_erfc_array(x):
    return np.asarray(_log_half_erfc(np.asarray(x, dtype=float)), dtype=float).reshape(-1)


def _base(kind, inv_scale, shift, y):
    if kind == BASE_BINARY:
        return _log_two_cosh(y)
    return _log_half_erfc((y + shift) * inv_scale)


def _inner_values(kind, inv_scale, shift, coef, expo, nodes, log_weights, outer):
    # phi_{L-1} at every outer field value, with the inner levels as tensor axes
    L = len(coef)
    if L == 1:
        return _base(kind, inv_scale, shift, outer)
    field = outer.reshape((1,) * (L - 1) + (-1,))
    for k in range(L - 1):
        shape = [1] * L
        shape[k] = nodes[k].size
        field = field + coef[k] * nodes[k].reshape(shape)
    val = np.asarray(_base(kind, inv_scale, shift, field))
    for k in range(L - 1):
        shape = [1] * (L - k)
        shape[0] = nodes[k].size
        val = logsumexp(expo[k] * val + log_weights[k].reshape(shape), axis=0) / expo[k]
    return val


def nested_log_expect(kind, inv_scale, shift, coef, expo, nodes, log_weights, weights):
    """Same contract as the compiled kernel; returns ``(value, bad_level, bad_node)``.

    A non-finite value is only seen after the whole nest is evaluated, so
    ``bad_level`` is always the outermost level here.
    """
    coef = np.asarray(coef, dtype=float)
    expo = np.asarray(expo, dtype=float)
    L = coef.size
    if L < 1 or expo.size != L - 1:
        raise ValueError("inconsistent nesting depth")
    nodes = [np.asarray(a, dtype=float) for a in nodes]
    log_weights = [np.asarray(a, dtype=float) for a in log_weights]
    w_out = np.asarray(weights[L - 1], dtype=float)
    h_out = nodes[L - 1]
    n_out = h_out.size
    if kind == BASE_BINARY:
        lo = n_out // 2
        w_use = 2.0 * w_out[lo:]
        if n_out % 2:
            w_use[0] = w_out[lo]
        h_use = h_out[lo:]
    else:
        w_use, h_use = w_out, h_out
    inner = int(np.prod([a.size for a in nodes[:-1]])) if L > 1 else 1
    step = max(1, _SLAB // max(inner, 1))
    parts = []
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for s in range(0, h_use.size, step):
            vals = _inner_values(
                kind, inv_scale, shift, coef, expo, nodes, log_weights, coef[-1] * h_use[s:s + step]
            )
            bad = ~np.isfinite(vals)
            if bad.any():
                return float("nan"), L - 1, float(h_use[s + int(np.argmax(bad))])
            parts.append(vals)
    vals = np.concatenate(parts)
    return math.fsum(w_use * vals), -1, 0.0


def _gray_low_table(cols_low):
    # partial sums over the low bits in Gray order, starting from all +1
    b, m = cols_low.shape
    size = 1 << b
    table = np.empty((size, m))
    y = cols_low.sum(axis=0)
    table[0] = y
    state = 0
    for k in range(1, size):
        j = (k & -k).bit_length() - 1
        state ^= 1 << j
        y = y + (-2.0 if (state >> j) & 1 else 2.0) * cols_low[j]
        table[k] = y
    return table


def gray_scan(cols, thr, stop_at_witness=True):
    """Blocked Gray-code walk: the same visiting order as the compiled scan."""
    cols = np.ascontiguousarray(cols, dtype=float)
    n, m = cols.shape
    if n < 1 or n > 40:
        raise ValueError("dimension out of range for exhaustive scan")
    if m < 1:
        raise ValueError("need at least one constraint")
    b = min(n, _GRAY_BLOCK)
    low = _gray_low_table(cols[:b])
    size = 1 << b
    high_cols = cols[b:]
    y_high = high_cols.sum(axis=0) if n > b else np.zeros(m)
    state = 0
    witness, best_prefix, best_step, checked = -1, -1, 0, 0
    best_min = -math.inf
    y_last = None
    for kh in range(1 << (n - b)):
        if kh:
            j = (kh & -kh).bit_length() - 1
            state ^= 1 << j
            y_high = y_high + (-2.0 if (state >> j) & 1 else 2.0) * high_cols[j]
        block = low if kh % 2 == 0 else low[::-1]
        y = y_high + block
        ok = y >= thr
        full = ok.all(axis=1)
        pref = np.where(full, m, np.argmin(ok, axis=1))
        worst = y.min(axis=1)
        base = kh * size
        top = int(pref.max())
        hit = int(np.argmax(full)) if full.any() else -1
        if stop_at_witness and hit >= 0:
            upto = hit + 1
            top = int(pref[:upto].max())
            if top > best_prefix:
                best_prefix, best_step = top, base + int(np.argmax(pref[:upto] == top))
            best_min = max(best_min, float(worst[:upto].max()))
            return base + hit, best_prefix, best_step, best_min, checked + upto, y[hit].copy()
        best_min = max(best_min, float(worst.max()))
        if top > best_prefix:
            best_prefix, best_step = top, base + int(np.argmax(pref == top))
        if hit >= 0 and witness < 0:
            witness = base + hit
        checked += size
        y_last = y[-1]
    return witness, best_prefix, best_step, best_min, checked, np.array(y_last, dtype=float)
