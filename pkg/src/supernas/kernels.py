"""Hot numeric kernels with a numba path and a pure-numpy path.

Each kernel exists twice: ``*_nb`` (explicit loops, compiled with numba when
available) and ``*_np`` (vectorised numpy).  The public name binds to the
numba variant when the numba backend is active.  Both variants are always
importable so the benchmark and tests can compare them.
"""

import numpy as np

from ._backend import HAS_NUMBA, njit

__all__ = [
    "scan_forward",
    "scan_backward",
    "domination_matrix",
    "nondominated_ranks",
    "hv3d_sorted",
]


# ---------------------------------------------------------------------------
# linear state recurrence  h_t = A h_{t-1} + u_t,  h_{-1} = 0
# ---------------------------------------------------------------------------


@njit
def scan_forward_nb(u, A):
    B, P, n = u.shape
    h = np.empty((B, P, n))
    for b in range(B):
        for i in range(n):
            h[b, 0, i] = u[b, 0, i]
        for t in range(1, P):
            for i in range(n):
                acc = u[b, t, i]
                for j in range(n):
                    acc += A[i, j] * h[b, t - 1, j]
                h[b, t, i] = acc
    return h


def scan_forward_np(u, A):
    B, P, n = u.shape
    h = np.empty((B, P, n))
    h[:, 0] = u[:, 0]
    At = A.T
    for t in range(1, P):
        h[:, t] = u[:, t] + h[:, t - 1] @ At
    return h


@njit
def scan_backward_nb(gh, h, A):
    # gh: direct dL/dh_t; returns (dL/du, dL/dA)
    B, P, n = gh.shape
    du = np.empty((B, P, n))
    dA = np.zeros((n, n))
    g = np.empty(n)
    g_prev = np.empty(n)
    for b in range(B):
        for i in range(n):
            g[i] = gh[b, P - 1, i]
        for t in range(P - 1, -1, -1):
            for i in range(n):
                du[b, t, i] = g[i]
            if t == 0:
                break
            for i in range(n):
                gi = g[i]
                for j in range(n):
                    dA[i, j] += gi * h[b, t - 1, j]
            for j in range(n):
                acc = gh[b, t - 1, j]
                for i in range(n):
                    acc += g[i] * A[i, j]
                g_prev[j] = acc
            for j in range(n):
                g[j] = g_prev[j]
    return du, dA


def scan_backward_np(gh, h, A):
    B, P, n = gh.shape
    du = np.empty((B, P, n))
    dA = np.zeros((n, n))
    g = gh[:, P - 1].copy()
    for t in range(P - 1, 0, -1):
        du[:, t] = g
        dA += g.T @ h[:, t - 1]
        g = gh[:, t - 1] + g @ A
    du[:, 0] = g
    return du, dA


# ---------------------------------------------------------------------------
# Pareto dominance (all objectives minimised)
# ---------------------------------------------------------------------------


@njit
def domination_matrix_nb(F):
    N, M = F.shape
    D = np.zeros((N, N), dtype=np.bool_)
    for i in range(N):
        for j in range(N):
            if i == j:
                continue
            le = True
            lt = False
            for k in range(M):
                if F[i, k] > F[j, k]:
                    le = False
                    break
                if F[i, k] < F[j, k]:
                    lt = True
            D[i, j] = le and lt
    return D


def domination_matrix_np(F):
    le = np.all(F[:, None, :] <= F[None, :, :], axis=2)
    lt = np.any(F[:, None, :] < F[None, :, :], axis=2)
    return le & lt


@njit
def nondominated_ranks_nb(F):
    D = domination_matrix_nb(F)
    N = F.shape[0]
    count = np.zeros(N, dtype=np.int64)
    for i in range(N):
        for j in range(N):
            if D[j, i]:
                count[i] += 1
    rank = np.full(N, -1, dtype=np.int64)
    current = np.empty(N, dtype=np.int64)
    n_cur = 0
    for i in range(N):
        if count[i] == 0:
            rank[i] = 0
            current[n_cur] = i
            n_cur += 1
    r = 0
    nxt = np.empty(N, dtype=np.int64)
    while n_cur > 0:
        n_nxt = 0
        for a in range(n_cur):
            i = current[a]
            for j in range(N):
                if D[i, j]:
                    count[j] -= 1
                    if count[j] == 0:
                        rank[j] = r + 1
                        nxt[n_nxt] = j
                        n_nxt += 1
        r += 1
        for a in range(n_nxt):
            current[a] = nxt[a]
        n_cur = n_nxt
    return rank


def nondominated_ranks_np(F):
    D = domination_matrix_np(F)
    N = F.shape[0]
    count = D.sum(axis=0).astype(np.int64)
    rank = np.full(N, -1, dtype=np.int64)
    current = np.flatnonzero(count == 0)
    r = 0
    while current.size:
        rank[current] = r
        count -= D[current].sum(axis=0)
        count[current] = -1
        current = np.flatnonzero(count == 0)
        r += 1
    return rank


# ---------------------------------------------------------------------------
# exact 3-objective hypervolume by slab sweep
# ---------------------------------------------------------------------------


@njit
def hv3d_sorted_nb(P, ref):
    # P sorted by third objective ascending, every row strictly below ref
    n = P.shape[0]
    xs = np.empty(n)
    ys = np.empty(n)
    total = 0.0
    for k in range(n):
        # insert point k into the 2-D set (kept sorted by x)
        pos = k
        while pos > 0 and xs[pos - 1] > P[k, 0]:
            xs[pos] = xs[pos - 1]
            ys[pos] = ys[pos - 1]
            pos -= 1
        xs[pos] = P[k, 0]
        ys[pos] = P[k, 1]
        z_next = ref[2] if k == n - 1 else P[k + 1, 2]
        dz = z_next - P[k, 2]
        if dz <= 0.0:
            continue
        area = 0.0
        ymin = ref[1]
        for a in range(k + 1):
            if ys[a] < ymin:
                area += (ref[0] - xs[a]) * (ymin - ys[a])
                ymin = ys[a]
        total += area * dz
    return total


def _hv2d_np(xy, ref):
    order = np.lexsort((xy[:, 1], xy[:, 0]))
    xy = xy[order]
    ymin = np.minimum.accumulate(xy[:, 1])
    prev = np.concatenate(([ref[1]], ymin[:-1]))
    gain = np.clip(prev - xy[:, 1], 0.0, None)
    return float(np.sum((ref[0] - xy[:, 0]) * gain))


def hv3d_sorted_np(P, ref):
    n = P.shape[0]
    z_next = np.append(P[1:, 2], ref[2])
    dz = z_next - P[:, 2]
    total = 0.0
    for k in range(n):
        if dz[k] <= 0.0:
            continue
        total += _hv2d_np(P[: k + 1, :2], ref) * dz[k]
    return total


if HAS_NUMBA:
    scan_forward = scan_forward_nb
    scan_backward = scan_backward_nb
    domination_matrix = domination_matrix_nb
    nondominated_ranks = nondominated_ranks_nb
    hv3d_sorted = hv3d_sorted_nb
else:
    scan_forward = scan_forward_np
    scan_backward = scan_backward_np
    domination_matrix = domination_matrix_np
    nondominated_ranks = nondominated_ranks_np
    hv3d_sorted = hv3d_sorted_np
