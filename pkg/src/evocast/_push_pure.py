"""Pure-Python forward-push kernel; mirrors the compiled version exactly.

Both implementations must run the identical push schedule (FIFO queue,
push while residual >= eps * degree) so their outputs agree bitwise.
"""

from __future__ import annotations

import numpy as np


def forward_push(indptr, indices, seed, alpha, eps):
    """Approximate personalized-walk scores by local residual pushing.

    Returns a dense float64 score array p with sum(p) <= 1 and
    |p[v] - exact[v]| <= eps * degree(v) on undirected graphs.
    """
    n = len(indptr) - 1
    p = np.zeros(n, dtype=np.float64)
    r = np.zeros(n, dtype=np.float64)
    in_queue = np.zeros(n, dtype=bool)

    r[seed] = 1.0
    queue = [int(seed)]
    in_queue[seed] = True
    head = 0
    while head < len(queue):
        v = queue[head]
        head += 1
        in_queue[v] = False
        deg = int(indptr[v + 1] - indptr[v])
        rv = float(r[v])
        if rv < eps * deg:
            continue
        p[v] += alpha * rv
        r[v] = 0.0
        inc = (1.0 - alpha) * rv / deg
        for u in indices[indptr[v]:indptr[v + 1]]:
            u = int(u)
            r[u] += inc
            if not in_queue[u] and r[u] >= eps * (indptr[u + 1] - indptr[u]):
                queue.append(u)
                in_queue[u] = True
    return p
