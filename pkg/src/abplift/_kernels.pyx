# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: nested log-expectations and Gray-code feasibility scans."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, fabs, sqrt, erfc, INFINITY, isfinite
from libc.stdlib cimport malloc, free
from scipy.special.cython_special cimport erfcx

cdef extern from *:
    int __builtin_ctzll(unsigned long long) nogil

cnp.import_array()

cdef enum:
    MAX_LEVELS = 16

cdef double LOG2 = 0.6931471805599453
cdef double ERFC_TAIL = 6.0

BASE_BINARY = 0
BASE_SPHERE = 1


cdef inline double c_log_two_cosh(double z) nogil:
    cdef double a = fabs(z)
    return a + log1p(exp(-2.0 * a))


cdef inline double c_log_half_erfc(double x) nogil:
    if x < 0.0:
        return log1p(-0.5 * erfc(-x))
    if x <= ERFC_TAIL:
        return log(erfc(x)) - LOG2
    return -x * x + log(erfcx(x)) - LOG2


cdef struct Nest:
    int levels
    int kind
    double inv_scale   # 1/(sqrt(2) * sqrt(1 - p2)) on the sphere side
    double shift       # kappa on the sphere side
    double coef[MAX_LEVELS]
    double expo[MAX_LEVELS]
    int order[MAX_LEVELS]
    double *nodes[MAX_LEVELS]
    double *logw[MAX_LEVELS]
    double *buf[MAX_LEVELS]
    int bad_level
    double bad_node


cdef inline double base_value(Nest *ctx, double y) nogil:
    if ctx.kind == 0:
        return c_log_two_cosh(y)
    return c_log_half_erfc((y + ctx.shift) * ctx.inv_scale)


cdef double lse_buffer(double *z, int n, double m) nogil:
    cdef int i
    cdef double top = z[0], acc = 0.0
    for i in range(1, n):
        if z[i] > top:
            top = z[i]
    for i in range(n):
        acc += exp(z[i] - top)
    return (top + log(acc)) / m


cdef void flag_bad(Nest *ctx, int lvl, double *z, int n) nogil:
    cdef int i
    if ctx.bad_level >= 0:
        return
    for i in range(n):
        if not isfinite(z[i]):
            ctx.bad_level = lvl
            ctx.bad_node = ctx.nodes[lvl][i]
            return


cdef double level_value(Nest *ctx, int j, double x) nogil:
    # phi_j(x) for j >= 1:  (1/m) log sum_i w_i exp(m * phi_{j-1}(x + c h_i))
    cdef int lvl = j - 1
    cdef int i, n = ctx.order[lvl]
    cdef double c = ctx.coef[lvl]
    cdef double m = ctx.expo[lvl]
    cdef double *z = ctx.buf[lvl]
    cdef double *h = ctx.nodes[lvl]
    cdef double *lw = ctx.logw[lvl]
    cdef double a, out
    # the innermost level is written as flat loops so the compiler can vectorise them
    if lvl == 0:
        if ctx.kind == 0:
            for i in range(n):
                a = fabs(x + c * h[i])
                z[i] = m * (a + log1p(exp(-2.0 * a))) + lw[i]
        else:
            for i in range(n):
                z[i] = m * c_log_half_erfc((x + c * h[i] + ctx.shift) * ctx.inv_scale) + lw[i]
    else:
        for i in range(n):
            z[i] = m * level_value(ctx, lvl, x + c * h[i]) + lw[i]
            if ctx.bad_level >= 0:
                return z[i]
    out = lse_buffer(z, n, m)
    if not isfinite(out):
        flag_bad(ctx, lvl, z, n)
    return out


def nested_log_expect(int kind, double inv_scale, double shift,
                      double[::1] coef, double[::1] expo,
                      list nodes, list log_weights, list weights):
    """Outer expectation of the nested log-moment recursion.

    Returns ``(value, bad_level, bad_node)``; ``bad_level`` is -1 on success.
    ``weights`` are the linear weights of the outermost rule only.
    """
    cdef Nest ctx
    cdef int L = coef.shape[0]
    cdef int k, i, n_out, half
    cdef double val, total, comp, y, t, c_out, wgt
    cdef double[::1] nd, lw, wout
    if L < 1 or L > MAX_LEVELS or expo.shape[0] != L - 1:
        raise ValueError("inconsistent nesting depth")
    ctx.levels = L
    ctx.kind = kind
    ctx.inv_scale = inv_scale
    ctx.shift = shift
    ctx.bad_level = -1
    ctx.bad_node = 0.0
    keep = []
    for k in range(L):
        nd = np.array(nodes[k], dtype=np.float64)
        lw = np.array(log_weights[k], dtype=np.float64)
        keep.append((nd, lw))
        ctx.coef[k] = coef[k]
        ctx.order[k] = nd.shape[0]
        ctx.nodes[k] = &nd[0]
        ctx.logw[k] = &lw[0]
        ctx.buf[k] = NULL
        if k < L - 1:
            ctx.expo[k] = expo[k]
    wout = np.array(weights[L - 1], dtype=np.float64)
    nd = keep[L - 1][0]
    n_out = nd.shape[0]
    c_out = coef[L - 1]
    try:
        for k in range(L - 1):
            ctx.buf[k] = <double *> malloc(ctx.order[k] * sizeof(double))
            if ctx.buf[k] == NULL:
                raise MemoryError()
        total = 0.0
        comp = 0.0
        # the binary side is even in the outer field, so fold the symmetric rule
        half = n_out // 2 if kind == 0 else 0
        with nogil:
            for i in range(half, n_out):
                y = c_out * ctx.nodes[L - 1][i]
                if L == 1:
                    val = base_value(&ctx, y)
                    if not isfinite(val) and ctx.bad_level < 0:
                        ctx.bad_level = 0
                        ctx.bad_node = ctx.nodes[0][i]
                else:
                    val = level_value(&ctx, L - 1, y)
                if ctx.bad_level >= 0:
                    break
                wgt = wout[i]
                if kind == 0 and (2 * i != n_out - 1):
                    wgt = 2.0 * wgt
                # Kahan summation keeps the outer accumulation order-independent to ~1 ulp
                y = wgt * val - comp
                t = total + y
                comp = (t - total) - y
                total = t
    finally:
        for k in range(L - 1):
            if ctx.buf[k] != NULL:
                free(ctx.buf[k])
    if ctx.bad_level >= 0:
        return float("nan"), ctx.bad_level, ctx.bad_node
    return total, -1, 0.0


def log_two_cosh_array(double[::1] z):
    cdef Py_ssize_t i, n = z.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = c_log_two_cosh(z[i])
    return out


def log_half_erfc_array(double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = c_log_half_erfc(x[i])
    return out


def gray_scan(const double[:, ::1] cols, double thr, bint stop_at_witness=True):
    """Walk all sign vectors in reflected Gray-code order.

    ``cols`` holds the constraint matrix transposed (n rows of length m), so a
    single flip touches one contiguous row.  Step ``k`` flips bit ``ctz(k)``
    and the sign vector after step ``k`` has bits ``k ^ (k >> 1)`` set to -1.

    Returns ``(witness_step, best_prefix, best_step, best_min, checked, y)``
    where ``best_prefix`` is the longest run of leading rows satisfied by any
    visited vector, ``best_step`` the first step attaining it, ``best_min``
    the largest smallest entry of the running product over visited vectors,
    ``witness_step`` is -1 if no vector satisfies every row and ``y`` is the
    running product at the last visited vector.
    """
    cdef int n = cols.shape[0]
    cdef int m = cols.shape[1]
    cdef long long total = (<long long> 1) << n
    cdef long long k, witness = -1, best_step = 0, checked = 0
    cdef int i, j, pref, best_prefix = -1
    cdef double s, low, best_min = -INFINITY
    cdef long long state = 0
    if n < 1 or n > 40:
        raise ValueError("dimension out of range for exhaustive scan")
    if m < 1:
        raise ValueError("need at least one constraint")
    y_arr = np.zeros(m)
    cdef double[::1] y = y_arr
    cdef const double *col
    for j in range(n):
        for i in range(m):
            y[i] += cols[j, i]
    cdef double *yp = &y[0]
    with nogil:
        k = 0
        while True:
            checked += 1
            # both checks stop at the first entry that rules out an improvement
            pref = 0
            while pref < m and yp[pref] >= thr:
                pref += 1
            if pref > best_prefix:
                best_prefix = pref
                best_step = k
            i = 0
            while i < m and yp[i] > best_min:
                i += 1
            if i == m:
                low = yp[0]
                for i in range(1, m):
                    if yp[i] < low:
                        low = yp[i]
                best_min = low
            if pref == m and witness < 0:
                witness = k
                if stop_at_witness:
                    break
            k += 1
            if k >= total:
                break
            j = __builtin_ctzll(<unsigned long long> k)
            state ^= (<long long> 1) << j
            # bit set means sigma_j = -1
            s = -2.0 if (state >> j) & 1 else 2.0
            col = &cols[j, 0]
            for i in range(m):
                yp[i] += s * col[i]
    return witness, best_prefix, best_step, best_min, checked, y_arr
