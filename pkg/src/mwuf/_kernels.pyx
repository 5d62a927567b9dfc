# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: row scatter-add, row-sparse Adam and tie-aware rank AUC.

Every routine mirrors ``_kernels_py`` operation for operation so both backends
produce bit-identical results on the same inputs.
"""
cimport cython
from cython cimport floating
from libc.math cimport sqrt, sqrtf

import numpy as np


def scatter_add_rows(floating[:, ::1] dst, const long long[::1] index, const floating[:, ::1] src):
    cdef Py_ssize_t n = index.shape[0]
    cdef Py_ssize_t k = dst.shape[1]
    cdef Py_ssize_t i, j, r
    for i in range(n):
        r = index[i]
        for j in range(k):
            dst[r, j] = dst[r, j] + src[i, j]


def sparse_adam_rows(floating[:, ::1] param, const floating[:, ::1] grad,
                     floating[:, ::1] m, floating[:, ::1] v,
                     const long long[::1] rows,
                     double lr, double beta1, double beta2, double eps,
                     double bias1, double bias2):
    cdef floating b1 = <floating>beta1
    cdef floating b2 = <floating>beta2
    cdef floating c1 = <floating>(1.0 - beta1)
    cdef floating c2 = <floating>(1.0 - beta2)
    cdef floating step = <floating>lr
    cdef floating e = <floating>eps
    cdef floating bc1 = <floating>bias1
    cdef floating bc2 = <floating>bias2
    cdef floating g, mm, vv, denom
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t k = param.shape[1]
    cdef Py_ssize_t i, j, r
    for i in range(n):
        r = rows[i]
        for j in range(k):
            g = grad[r, j]
            mm = b1 * m[r, j] + c1 * g
            vv = b2 * v[r, j] + c2 * g * g
            m[r, j] = mm
            v[r, j] = vv
            if floating is float:
                denom = sqrtf(vv / bc2) + e
            else:
                denom = sqrt(vv / bc2) + e
            param[r, j] = param[r, j] - step * (mm / bc1) / denom


def rank_auc_sorted(const double[::1] scores, const signed char[::1] labels):
    """AUC from scores sorted ascending; tied runs share their average rank."""
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t i = 0, j, t
    cdef double rank_sum = 0.0, avg
    cdef long long n_pos = 0, pos_in_run
    while i < n:
        j = i
        pos_in_run = 0
        while j < n and scores[j] == scores[i]:
            pos_in_run += labels[j]
            j += 1
        # ranks i+1 .. j averaged
        avg = 0.5 * (<double>(i + 1) + <double>j)
        rank_sum += avg * pos_in_run
        n_pos += pos_in_run
        i = j
    cdef long long n_neg = n - n_pos
    return (rank_sum - 0.5 * n_pos * (n_pos + 1)) / (<double>n_pos * <double>n_neg)
