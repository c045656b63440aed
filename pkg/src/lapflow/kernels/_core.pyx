# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel core: fused single-pass versions of the hot loops.

Same API as ``numpy_backend``. Rows are processed with OpenMP, but only
when the workload is large enough to amortize the parallel region; small
inputs (the common case for coarse pyramid scales) run serially to avoid
fighting the BLAS threads for the cores.
"""

import numpy as np

cimport cython
cimport numpy as cnp
cimport openmp
from cython.parallel cimport prange
from libc.math cimport exp, tanh, sqrt, INFINITY

cnp.import_array()

ctypedef fused floating:
    float
    double

cdef Py_ssize_t PARALLEL_THRESHOLD = 1 << 16


cdef inline int _threads_for(Py_ssize_t work) noexcept:
    if work < PARALLEL_THRESHOLD:
        return 1
    return openmp.omp_get_max_threads()


def masked_softmax_fw(floating[:, ::1] x, floating[:, ::1] mask):
    rows = x.shape[0]
    n = x.shape[1]
    out_arr = np.empty((rows, n), dtype=np.asarray(x).dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t R = rows, N = n, M = mask.shape[0]
    cdef Py_ssize_t i, j, mi, lim
    cdef floating zmax, s, z
    cdef int bad = 0
    cdef int prefix_form = 1
    cdef int nt = _threads_for(R * N)

    # block-causal masks allow a leading span of keys per row and block the
    # rest; detect that shape once and run a branch-free kernel on it
    limits_arr = np.empty(M, dtype=np.intp)
    cdef Py_ssize_t[::1] limits = limits_arr
    for mi in range(M):
        lim = 0
        while lim < N and mask[mi, lim] == 0.0:
            lim += 1
        limits[mi] = lim
        for j in range(lim, N):
            if mask[mi, j] == mask[mi, j]:  # not NaN
                if mask[mi, j] != -INFINITY:
                    prefix_form = 0
            else:
                prefix_form = 0

    if prefix_form:
        for i in prange(R, nogil=True, schedule='static', num_threads=nt):
            lim = limits[i % M]
            if lim == 0:
                bad = 1
                continue
            zmax = x[i, 0]
            for j in range(1, lim):
                if x[i, j] > zmax:
                    zmax = x[i, j]
            s = 0.0
            for j in range(lim):
                out[i, j] = exp(x[i, j] - zmax)
                s = s + out[i, j]
            for j in range(lim):
                out[i, j] = out[i, j] / s
            for j in range(lim, N):
                out[i, j] = 0.0
        if bad:
            raise ValueError("softmax row is fully masked")
        return out_arr

    for i in prange(R, nogil=True, schedule='static', num_threads=nt):
        mi = i % M
        zmax = -INFINITY
        for j in range(N):
            z = x[i, j] + mask[mi, j]
            if z > zmax:
                zmax = z
        if zmax == -INFINITY:
            bad = 1
            continue
        s = 0.0
        for j in range(N):
            z = x[i, j] + mask[mi, j]
            if z == -INFINITY:
                out[i, j] = 0.0
            else:
                out[i, j] = exp(z - zmax)
                s = s + out[i, j]
        for j in range(N):
            out[i, j] = out[i, j] / s
    if bad:
        raise ValueError("softmax row is fully masked")
    return out_arr


def softmax_bw(floating[:, ::1] p, floating[:, ::1] g):
    rows = p.shape[0]
    n = p.shape[1]
    out_arr = np.empty((rows, n), dtype=np.asarray(p).dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t R = rows, N = n
    cdef Py_ssize_t i, j
    cdef floating dot
    cdef int nt = _threads_for(R * N)
    for i in prange(R, nogil=True, schedule='static', num_threads=nt):
        dot = 0.0
        for j in range(N):
            dot = dot + g[i, j] * p[i, j]
        for j in range(N):
            out[i, j] = p[i, j] * (g[i, j] - dot)
    return out_arr


def layernorm_fw(floating[:, ::1] x, double eps):
    rows = x.shape[0]
    n = x.shape[1]
    dt = np.asarray(x).dtype
    y_arr = np.empty((rows, n), dtype=dt)
    inv_arr = np.empty((rows, 1), dtype=dt)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] inv = inv_arr
    cdef Py_ssize_t R = rows, N = n
    cdef Py_ssize_t i, j
    cdef floating mu, var, d, istd
    cdef int nt = _threads_for(R * N)
    for i in prange(R, nogil=True, schedule='static', num_threads=nt):
        mu = 0.0
        for j in range(N):
            mu = mu + x[i, j]
        mu = mu / N
        var = 0.0
        for j in range(N):
            d = x[i, j] - mu
            var = var + d * d
        var = var / N
        istd = <floating>(1.0 / sqrt(var + eps))
        inv[i, 0] = istd
        for j in range(N):
            y[i, j] = (x[i, j] - mu) * istd
    return y_arr, inv_arr


def layernorm_bw(floating[:, ::1] y, floating[:, ::1] inv_std,
                 floating[:, ::1] g):
    rows = y.shape[0]
    n = y.shape[1]
    out_arr = np.empty((rows, n), dtype=np.asarray(y).dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t R = rows, N = n
    cdef Py_ssize_t i, j
    cdef floating gm, gym, istd
    cdef int nt = _threads_for(R * N)
    for i in prange(R, nogil=True, schedule='static', num_threads=nt):
        gm = 0.0
        gym = 0.0
        for j in range(N):
            gm = gm + g[i, j]
            gym = gym + g[i, j] * y[i, j]
        gm = gm / N
        gym = gym / N
        istd = inv_std[i, 0]
        for j in range(N):
            out[i, j] = istd * (g[i, j] - gm - y[i, j] * gym)
    return out_arr


cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu_fw(floating[::1] x):
    n = x.shape[0]
    out_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] out = out_arr
    cdef Py_ssize_t N = n, i
    cdef floating t, v
    cdef int nt = _threads_for(N)
    for i in prange(N, nogil=True, schedule='static', num_threads=nt):
        v = x[i]
        t = <floating>tanh(GELU_C * (v + 0.044715 * v * v * v))
        out[i] = <floating>0.5 * v * (<floating>1.0 + t)
    return out_arr


def gelu_bw(floating[::1] x, floating[::1] g):
    n = x.shape[0]
    out_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] out = out_arr
    cdef Py_ssize_t N = n, i
    cdef floating t, v, sech2, dinner
    cdef int nt = _threads_for(N)
    for i in prange(N, nogil=True, schedule='static', num_threads=nt):
        v = x[i]
        t = <floating>tanh(GELU_C * (v + 0.044715 * v * v * v))
        sech2 = <floating>1.0 - t * t
        dinner = <floating>(GELU_C) * (<floating>1.0 + <floating>(3.0 * 0.044715) * v * v)
        out[i] = g[i] * (<floating>0.5 * (<floating>1.0 + t)
                         + <floating>0.5 * v * sech2 * dinner)
    return out_arr


def silu_fw(floating[::1] x):
    n = x.shape[0]
    out_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] out = out_arr
    cdef Py_ssize_t N = n, i
    cdef floating s
    cdef int nt = _threads_for(N)
    for i in prange(N, nogil=True, schedule='static', num_threads=nt):
        s = <floating>(1.0 / (1.0 + exp(-x[i])))
        out[i] = x[i] * s
    return out_arr


def silu_bw(floating[::1] x, floating[::1] g):
    n = x.shape[0]
    out_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] out = out_arr
    cdef Py_ssize_t N = n, i
    cdef floating s
    cdef int nt = _threads_for(N)
    for i in prange(N, nogil=True, schedule='static', num_threads=nt):
        s = <floating>(1.0 / (1.0 + exp(-x[i])))
        out[i] = g[i] * (s * (<floating>1.0 + x[i] * (<floating>1.0 - s)))
    return out_arr


def adamw_update(floating[::1] p, floating[::1] grad,
                 floating[::1] m, floating[::1] v,
                 double lr, double beta1, double beta2, double eps,
                 double weight_decay, double bc1, double bc2):
    cdef Py_ssize_t N = p.shape[0], i
    cdef floating mhat, vhat
    cdef int nt = _threads_for(N)
    for i in prange(N, nogil=True, schedule='static', num_threads=nt):
        m[i] = <floating>beta1 * m[i] + <floating>(1.0 - beta1) * grad[i]
        v[i] = <floating>beta2 * v[i] + <floating>(1.0 - beta2) * grad[i] * grad[i]
        mhat = m[i] / <floating>bc1
        vhat = v[i] / <floating>bc2
        if weight_decay != 0.0:
            p[i] = p[i] - <floating>(lr * weight_decay) * p[i]
        p[i] = p[i] - <floating>lr * mhat / (<floating>sqrt(vhat) + <floating>eps)
