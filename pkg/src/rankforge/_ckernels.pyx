# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Signatures mirror :mod:`rankforge._pykernels`."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expm1, log1p, sqrt, tanh

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def layernorm_forward(const double[:, ::1] x, const double[::1] gain,
                      const double[::1] bias, double eps):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    y_arr = np.empty((rows, n))
    xhat_arr = np.empty((rows, n))
    rstd_arr = np.empty(rows)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mean, var, d, r
    for i in range(rows):
        mean = 0.0
        for j in range(n):
            mean += x[i, j]
        mean /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mean
            var += d * d
        var /= n
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            d = (x[i, j] - mean) * r
            xhat[i, j] = d
            y[i, j] = d * gain[j] + bias[j]
    return y_arr, xhat_arr, rstd_arr


def layernorm_backward(const double[:, ::1] dy, const double[:, ::1] xhat,
                       const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t rows = dy.shape[0], n = dy.shape[1], i, j
    dx_arr = np.empty((rows, n))
    dgain_arr = np.zeros(n)
    dbias_arr = np.zeros(n)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    cdef double s1, s2, g, scale
    for i in range(rows):
        s1 = 0.0
        s2 = 0.0
        for j in range(n):
            g = dy[i, j] * gain[j]
            s1 += g
            s2 += g * xhat[i, j]
            dgain[j] += dy[i, j] * xhat[i, j]
            dbias[j] += dy[i, j]
        scale = rstd[i] / n
        for j in range(n):
            g = dy[i, j] * gain[j]
            dx[i, j] = scale * (n * g - s1 - xhat[i, j] * s2)
    return dx_arr, dgain_arr, dbias_arr


def softmax_forward(const double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    y_arr = np.empty((rows, n))
    cdef double[:, ::1] y = y_arr
    cdef double top, total, e
    for i in range(rows):
        top = x[i, 0]
        for j in range(1, n):
            if x[i, j] > top:
                top = x[i, j]
        total = 0.0
        for j in range(n):
            e = exp(x[i, j] - top)
            y[i, j] = e
            total += e
        for j in range(n):
            y[i, j] /= total
    return y_arr


def softmax_backward(const double[:, ::1] y, const double[:, ::1] dy):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    dx_arr = np.empty((rows, n))
    cdef double[:, ::1] dx = dx_arr
    cdef double dot
    for i in range(rows):
        dot = 0.0
        for j in range(n):
            dot += dy[i, j] * y[i, j]
        for j in range(n):
            dx[i, j] = y[i, j] * (dy[i, j] - dot)
    return dx_arr


def attention_forward(const double[:, :, ::1] q, const double[:, :, ::1] k,
                      const double[:, :, ::1] v, const double[:, ::1] bias, int heads):
    cdef Py_ssize_t n_batch = q.shape[0], lq = q.shape[1], dim = q.shape[2], lk = k.shape[1]
    cdef Py_ssize_t dh = dim // heads, n, h, i, j, t, o
    out_arr = np.zeros((n_batch, lq, dim))
    p_arr = np.empty((n_batch, heads, lq, lk))
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, :, ::1] p = p_arr
    cdef double s, top, total, w, sc = 1.0 / sqrt(<double>dh)
    for n in range(n_batch):
        for h in range(heads):
            o = h * dh
            for i in range(lq):
                top = -1e300
                for j in range(lk):
                    s = 0.0
                    for t in range(dh):
                        s = s + q[n, i, o + t] * k[n, j, o + t]
                    s = s * sc + bias[n, j]
                    p[n, h, i, j] = s
                    if s > top:
                        top = s
                total = 0.0
                for j in range(lk):
                    w = exp(p[n, h, i, j] - top)
                    p[n, h, i, j] = w
                    total = total + w
                for j in range(lk):
                    w = p[n, h, i, j] / total
                    p[n, h, i, j] = w
                    for t in range(dh):
                        out[n, i, o + t] += w * v[n, j, o + t]
    return out_arr, p_arr


def attention_backward(const double[:, :, ::1] dout, const double[:, :, ::1] q,
                       const double[:, :, ::1] k, const double[:, :, ::1] v,
                       const double[:, :, :, ::1] p, int heads):
    cdef Py_ssize_t n_batch = q.shape[0], lq = q.shape[1], dim = q.shape[2], lk = k.shape[1]
    cdef Py_ssize_t dh = dim // heads, n, h, i, j, t, o
    dq_arr = np.zeros((n_batch, lq, dim))
    dk_arr = np.zeros((n_batch, lk, dim))
    dv_arr = np.zeros((n_batch, lk, dim))
    cdef double[:, :, ::1] dq = dq_arr
    cdef double[:, :, ::1] dk = dk_arr
    cdef double[:, :, ::1] dv = dv_arr
    dp_arr = np.empty(lk)
    cdef double[::1] dp = dp_arr
    cdef double s, acc, w, sc = 1.0 / sqrt(<double>dh)
    for n in range(n_batch):
        for h in range(heads):
            o = h * dh
            for i in range(lq):
                acc = 0.0
                for j in range(lk):
                    w = p[n, h, i, j]
                    s = 0.0
                    for t in range(dh):
                        s = s + dout[n, i, o + t] * v[n, j, o + t]
                        dv[n, j, o + t] += w * dout[n, i, o + t]
                    dp[j] = s
                    acc = acc + w * s
                for j in range(lk):
                    w = p[n, h, i, j] * (dp[j] - acc) * sc
                    if w != 0.0:
                        for t in range(dh):
                            dq[n, i, o + t] += w * k[n, j, o + t]
                            dk[n, j, o + t] += w * q[n, i, o + t]
    return dq_arr, dk_arr, dv_arr


def scatter_add_rows(double[:, ::1] out, const cnp.int64_t[::1] index,
                     const double[:, ::1] src):
    cdef Py_ssize_t rows = src.shape[0], n = src.shape[1], i, j, r
    cdef Py_ssize_t limit = out.shape[0]
    for i in range(rows):
        r = index[i]
        if r < 0 or r >= limit:
            raise IndexError(f"row index {r} out of range for {limit} rows")
        for j in range(n):
            out[r, j] += src[i, j]


cdef inline double softplus(double x) nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def point_ce(const double[::1] labels, const double[::1] scores):
    cdef Py_ssize_t m = labels.shape[0], j
    grad_arr = np.empty(m)
    cdef double[::1] grad = grad_arr
    cdef double value = 0.0
    for j in range(m):
        if labels[j] > 0:
            value += softplus(-scores[j])
        else:
            value += softplus(scores[j])
        grad[j] = sigmoid(scores[j]) - labels[j]
    return value, grad_arr


def pair_logistic(const double[::1] labels, const double[::1] scores):
    cdef Py_ssize_t m = labels.shape[0], j, k
    grad_arr = np.zeros(m)
    cdef double[::1] grad = grad_arr
    cdef double value = 0.0, d, w
    for j in range(m):
        for k in range(m):
            if labels[j] > labels[k]:
                d = scores[k] - scores[j]
                value += softplus(d)
                w = sigmoid(d)
                grad[j] -= w
                grad[k] += w
    return value, grad_arr


cdef void _log_softmax(const double[::1] scores, double[::1] logp):
    cdef Py_ssize_t m = scores.shape[0], j, top_j = 0
    cdef double top = scores[0], rest = 0.0, lse
    for j in range(1, m):
        if scores[j] > top:
            top = scores[j]
            top_j = j
    for j in range(m):
        if j != top_j:
            rest += exp(scores[j] - top)
    # log1p keeps relative precision when the top score dominates
    lse = log1p(rest)
    for j in range(m):
        logp[j] = (scores[j] - top) - lse


def softmax_ce(const double[::1] labels, const double[::1] scores):
    return poly1_softmax_ce(labels, scores, 0.0)


def poly1_softmax_ce(const double[::1] labels, const double[::1] scores, double epsilon):
    cdef Py_ssize_t m = labels.shape[0], j
    grad_arr = np.zeros(m)
    cdef double[::1] grad = grad_arr
    cdef double total = 0.0, value = 0.0, weighted = 0.0, poly = 0.0, p, gap
    for j in range(m):
        total += labels[j]
    if total <= 0.0:
        return 0.0, grad_arr
    logp_arr = np.empty(m)
    cdef double[::1] logp = logp_arr
    _log_softmax(scores, logp)
    for j in range(m):
        value -= labels[j] * logp[j]
        if labels[j] == total:
            # all the label mass on one item: total * (p - 1) without cancellation
            grad[j] = total * expm1(logp[j])
        else:
            grad[j] = total * exp(logp[j]) - labels[j]
    if epsilon == 0.0:
        return value, grad_arr
    for j in range(m):
        weighted += labels[j] * exp(logp[j])
        poly -= labels[j] * expm1(logp[j])
    value += epsilon * poly
    for j in range(m):
        p = exp(logp[j])
        if labels[j] == total:
            gap = total * expm1(logp[j])
        else:
            gap = weighted - labels[j]
        grad[j] += epsilon * p * gap
    return value, grad_arr
