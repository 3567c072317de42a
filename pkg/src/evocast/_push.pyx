# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled forward-push kernel for personalized-walk scoring.

Keeps the exact push schedule of the pure fallback (FIFO queue, push while
residual >= eps * degree) so both backends return bitwise-equal scores.
"""

import numpy as np

cimport numpy as cnp


def forward_push(cnp.int64_t[::1] indptr, cnp.int64_t[::1] indices,
                 Py_ssize_t seed, double alpha, double eps):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    p_arr = np.zeros(n, dtype=np.float64)
    r_arr = np.zeros(n, dtype=np.float64)
    inq_arr = np.zeros(n, dtype=np.uint8)
    cdef double[::1] p = p_arr
    cdef double[::1] r = r_arr
    cdef cnp.uint8_t[::1] in_queue = inq_arr

    cdef Py_ssize_t cap = 1024 if n < 1024 else n
    queue_arr = np.empty(cap, dtype=np.int64)
    cdef cnp.int64_t[::1] queue = queue_arr

    cdef Py_ssize_t head = 0, tail = 0
    cdef Py_ssize_t v, u, i, deg
    cdef double rv, inc

    r[seed] = 1.0
    queue[0] = seed
    tail = 1
    in_queue[seed] = 1

    while head < tail:
        v = queue[head]
        head += 1
        in_queue[v] = 0
        deg = indptr[v + 1] - indptr[v]
        rv = r[v]
        if rv < eps * deg:
            continue
        p[v] += alpha * rv
        r[v] = 0.0
        inc = (1.0 - alpha) * rv / deg
        for i in range(indptr[v], indptr[v + 1]):
            u = indices[i]
            r[u] += inc
            if in_queue[u] == 0 and r[u] >= eps * (indptr[u + 1] - indptr[u]):
                if tail == cap:
                    if head > 0:
                        # compact the consumed prefix before growing
                        queue_arr[: tail - head] = queue_arr[head:tail]
                        tail -= head
                        head = 0
                    if tail == cap:
                        cap *= 2
                        new_queue = np.empty(cap, dtype=np.int64)
                        new_queue[:tail] = queue_arr[:tail]
                        queue_arr = new_queue
                        queue = queue_arr
                queue[tail] = u
                tail += 1
                in_queue[u] = 1
    return p_arr
