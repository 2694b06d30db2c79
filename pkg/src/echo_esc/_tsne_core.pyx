# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled t-SNE kernels.  Contract identical to ``_tsne_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs, INFINITY

cnp.import_array()

cdef double LN2 = 0.6931471805599453


def conditional_p(sqdist, double perplexity, double tol=1e-5, int max_iter=200):
    cdef double[:, ::1] D = np.ascontiguousarray(sqdist, dtype=np.float64)
    cdef Py_ssize_t m = D.shape[0]
    P_arr = np.zeros((m, m), dtype=np.float64)
    beta_arr = np.ones(m, dtype=np.float64)
    ent_arr = np.zeros(m, dtype=np.float64)
    conv_arr = np.zeros(m, dtype=np.bool_)
    cdef double[:, ::1] P = P_arr
    cdef double[::1] beta = beta_arr
    cdef double[::1] ent = ent_arr
    cdef cnp.npy_bool[::1] conv = conv_arr
    cdef double target = log(perplexity) / LN2
    cdef Py_ssize_t i, j
    cdef int it
    cdef double dmin, b, lo, hi, s, sd, h, diff, v

    for i in range(m):
        dmin = INFINITY
        for j in range(m):
            if j != i and D[i, j] < dmin:
                dmin = D[i, j]
        b = 1.0
        lo = 0.0
        hi = INFINITY
        for it in range(max_iter):
            s = 0.0
            sd = 0.0
            for j in range(m):
                if j == i:
                    P[i, j] = 0.0
                    continue
                v = exp(-(D[i, j] - dmin) * b)
                P[i, j] = v
                s += v
                sd += (D[i, j] - dmin) * v
            h = (log(s) + b * sd / s) / LN2
            for j in range(m):
                P[i, j] /= s
            ent[i] = h
            beta[i] = b
            diff = h - target
            if fabs(diff) < tol:
                conv[i] = True
                break
            if diff > 0:
                lo = b
                if hi == INFINITY:
                    b = b * 2.0
                else:
                    b = (b + hi) / 2.0
            else:
                hi = b
                b = (b + lo) / 2.0
    return P_arr, beta_arr, ent_arr, conv_arr


def kl_gradient(P_in, Y_in, double exaggeration=1.0):
    cdef double[:, ::1] P = np.ascontiguousarray(P_in, dtype=np.float64)
    cdef double[:, ::1] Y = np.ascontiguousarray(Y_in, dtype=np.float64)
    cdef Py_ssize_t m = Y.shape[0]
    cdef Py_ssize_t dim = Y.shape[1]
    grad_arr = np.zeros((m, dim), dtype=np.float64)
    num_arr = np.empty((m, m), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    cdef double[:, ::1] num = num_arr
    cdef Py_ssize_t i, j, k
    cdef double d2, t, Z = 0.0, kl = 0.0, q, w, p

    for i in range(m):
        num[i, i] = 0.0
        for j in range(i + 1, m):
            d2 = 0.0
            for k in range(dim):
                t = Y[i, k] - Y[j, k]
                d2 += t * t
            t = 1.0 / (1.0 + d2)
            num[i, j] = t
            num[j, i] = t
            Z += 2.0 * t
    for i in range(m):
        for j in range(m):
            if j == i:
                continue
            q = num[i, j] / Z
            p = P[i, j]
            if p > 0:
                kl += p * log(p / q)
            w = (exaggeration * p - q) * num[i, j]
            for k in range(dim):
                grad[i, k] += 4.0 * w * (Y[i, k] - Y[j, k])
    return grad_arr, kl
