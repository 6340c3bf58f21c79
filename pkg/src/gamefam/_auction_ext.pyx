# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled batch simulator for the two-stage quality-weighted GSP auction.

Mirrors :mod:`gamefam._auction_py` exactly; see that module for semantics.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, INFINITY

cnp.import_array()

cdef enum:
    MAXP = 64


cdef inline void _rank(const double* e, const double* q, int p, double r,
                       int* order, int* n_part) noexcept nogil:
    # participants sorted by descending e, ties to lower index (insertion sort)
    cdef int i, j, k, cnt = 0
    for i in range(p):
        if q[i] > 0.0 and e[i] >= r:
            j = cnt
            while j > 0 and e[order[j - 1]] < e[i]:
                order[j] = order[j - 1]
                j -= 1
            order[j] = i
            cnt += 1
    n_part[0] = cnt


cdef inline double _settle(const double* e, const double* q, const double* theta,
                           int p, double r, const double* ctr, int slots,
                           double* payoff) noexcept nogil:
    cdef int order[MAXP]
    cdef int n_part, k, i, n_alloc
    cdef double nxt, price, revenue = 0.0
    for i in range(p):
        payoff[i] = 0.0
    _rank(e, q, p, r, order, &n_part)
    n_alloc = n_part if n_part < slots else slots
    for k in range(n_alloc):
        i = order[k]
        nxt = e[order[k + 1]] if k + 1 < n_part else r
        if nxt < r:
            nxt = r
        price = nxt / q[i]
        payoff[i] = ctr[k] * (theta[i] - price)
        revenue += ctr[k] * price
    return revenue


cdef inline cnp.int64_t _best_response(int i, const cnp.int64_t* bid0, const double* q,
                                const double* theta, int p, double r,
                                const double* ctr, int slots) noexcept nogil:
    cdef double e_opp[MAXP]
    cdef int j, pos
    cdef cnp.int64_t b, bmax, best_b = 0
    cdef double eb, nxt, util, best_u = -INFINITY
    for j in range(p):
        if j != i and q[j] > 0.0 and q[j] * bid0[j] >= r:
            e_opp[j] = q[j] * bid0[j]
        else:
            e_opp[j] = -INFINITY
    bmax = <cnp.int64_t>floor(theta[i])
    if bmax < 0:
        bmax = 0
    for b in range(bmax + 1):
        eb = q[i] * b
        util = 0.0
        if q[i] > 0.0 and eb >= r:
            pos = 0
            nxt = -INFINITY
            for j in range(p):
                if j == i or e_opp[j] == -INFINITY:
                    continue
                if e_opp[j] > eb or (e_opp[j] == eb and j < i):
                    pos += 1
                elif e_opp[j] > nxt:
                    nxt = e_opp[j]
            if pos < slots:
                if nxt < r:
                    nxt = r
                util = ctr[pos] * (theta[i] - nxt / q[i])
        if util > best_u:
            best_u = util
            best_b = b
    return best_b


def simulate_batch(const double[:, ::1] q, const double[:, ::1] theta,
                   const cnp.int64_t[:, ::1] offsets,
                   const unsigned char[:, ::1] updates,
                   const unsigned char[:, ::1] coins,
                   const double[::1] reserve, const double[::1] ctr):
    cdef Py_ssize_t n = q.shape[0]
    cdef int p = <int>q.shape[1]
    cdef int slots = <int>ctr.shape[0]
    if p > MAXP:
        raise ValueError(f"at most {MAXP} players supported")
    payoff_arr = np.zeros((n, p), dtype=np.float64)
    revenue_arr = np.zeros(n, dtype=np.float64)
    final_arr = np.zeros((n, p), dtype=np.int64)
    cdef double[:, ::1] payoff = payoff_arr
    cdef double[::1] revenue = revenue_arr
    cdef cnp.int64_t[:, ::1] final = final_arr
    cdef cnp.int64_t bid0[MAXP]
    cdef double e[MAXP]
    cdef Py_ssize_t s
    cdef int i
    cdef cnp.int64_t b
    with nogil:
        for s in range(n):
            for i in range(p):
                b = <cnp.int64_t>floor(theta[s, i]) - offsets[s, i]
                bid0[i] = b if b > 0 else 0
            for i in range(p):
                if updates[s, i] and coins[s, i]:
                    final[s, i] = _best_response(i, bid0, &q[s, 0], &theta[s, 0],
                                                 p, reserve[s], &ctr[0], slots)
                else:
                    final[s, i] = bid0[i]
                e[i] = q[s, i] * final[s, i]
            revenue[s] = _settle(e, &q[s, 0], &theta[s, 0], p, reserve[s],
                                 &ctr[0], slots, &payoff[s, 0])
    return payoff_arr, revenue_arr, final_arr
