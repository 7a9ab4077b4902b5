# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: ELU-MLP forward/backward and dense linear assignment.

Mirrors :mod:`flowmatch._pure` function for function. Matrices are C-contiguous
float64; weights are stored ``(fan_out, fan_in)`` so a layer is ``h @ W.T + b``.
"""

import numpy as np

from libc.math cimport exp, expm1, INFINITY
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemm


cdef inline void _gemm(const double* A, const double* B, double* C,
                       int m, int n, int k, bint trans_a, bint trans_b,
                       double beta) noexcept nogil:
    # Row-major C[m, n] = op(A)[m, k] @ op(B)[k, n] + beta * C, expressed as the
    # column-major product C^T = op(B)^T @ op(A)^T.
    cdef char ta = b'T' if trans_b else b'N'
    cdef char tb = b'T' if trans_a else b'N'
    cdef int lda = k if trans_b else n
    cdef int ldb = m if trans_a else k
    cdef int ldc = n
    cdef double alpha = 1.0
    dgemm(&ta, &tb, &n, &m, &k, &alpha, <double*>B, &lda, <double*>A, &ldb,
          &beta, C, &ldc)


cdef void _forward(list weights, list biases, double[:, ::1] x, list pre, list post):
    cdef Py_ssize_t n_layers = len(weights)
    cdef Py_ssize_t layer, i, j
    cdef double[:, ::1] w, h, z, a
    cdef double[::1] b
    cdef int m = x.shape[0]
    h = x
    for layer in range(n_layers):
        w = weights[layer]
        b = biases[layer]
        z = np.empty((m, w.shape[0]))
        for i in range(m):
            for j in range(w.shape[0]):
                z[i, j] = b[j]
        _gemm(&h[0, 0], &w[0, 0], &z[0, 0], m, w.shape[0], w.shape[1], False, True, 1.0)
        pre.append(z)
        if layer < n_layers - 1:
            a = np.empty_like(z)
            for i in range(m):
                for j in range(z.shape[1]):
                    a[i, j] = z[i, j] if z[i, j] > 0.0 else expm1(z[i, j])
            post.append(a)
            h = a
        else:
            post.append(z)


def mlp_forward(list weights, list biases, double[:, ::1] x):
    cdef list pre = [], post = []
    _forward(weights, biases, x, pre, post)
    return np.asarray(post[len(post) - 1])


def mlp_loss_grad(list weights, list biases, double[:, ::1] x,
                  double[:, ::1] target, double[::1] sample_weight,
                  list grad_w, list grad_b):
    """Weighted mean squared residual; gradients are written into grad_w/grad_b.

    Returns ``(loss, per_sample_residual_sq)``.
    """
    cdef list pre = [], post = []
    _forward(weights, biases, x, pre, post)
    cdef Py_ssize_t n_layers = len(weights)
    cdef int m = x.shape[0]
    cdef double[:, ::1] out = post[n_layers - 1]
    cdef int d = out.shape[1]
    cdef double[:, ::1] g = np.empty((m, d))
    cdef double[:, ::1] g_prev, h, w, z, a, gw
    cdef double[::1] gb
    cdef double[::1] res_sq = np.empty(m)
    cdef double loss = 0.0, r, s, scale
    cdef Py_ssize_t i, j, layer
    for i in range(m):
        s = 0.0
        scale = 2.0 * sample_weight[i] / m
        for j in range(d):
            r = out[i, j] - target[i, j]
            s += r * r
            g[i, j] = scale * r
        res_sq[i] = s
        loss += sample_weight[i] * s
    loss /= m

    for layer in range(n_layers - 1, -1, -1):
        h = x if layer == 0 else post[layer - 1]
        w = weights[layer]
        gw = grad_w[layer]
        gb = grad_b[layer]
        _gemm(&g[0, 0], &h[0, 0], &gw[0, 0], w.shape[0], w.shape[1], m, True, False, 0.0)
        for j in range(w.shape[0]):
            s = 0.0
            for i in range(m):
                s += g[i, j]
            gb[j] = s
        if layer > 0:
            g_prev = np.empty((m, w.shape[1]))
            _gemm(&g[0, 0], &w[0, 0], &g_prev[0, 0], m, w.shape[1], w.shape[0], False, False, 0.0)
            z = pre[layer - 1]
            a = post[layer - 1]
            for i in range(m):
                for j in range(w.shape[1]):
                    if z[i, j] <= 0.0:
                        g_prev[i, j] *= a[i, j] + 1.0
            g = g_prev
    return loss, np.asarray(res_sq)


def lap_solve(double[:, ::1] cost):
    """Minimum-cost perfect matching by shortest augmenting paths.

    Returns ``(col4row, u, v)`` with dual potentials satisfying
    ``cost[i, j] - u[i] - v[j] >= 0`` and equality on matched pairs.
    Raises ValueError if no finite perfect matching exists.
    """
    cdef Py_ssize_t n = cost.shape[0]
    if cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    u_arr = np.zeros(n)
    v_arr = np.zeros(n)
    col4row_arr = np.full(n, -1, dtype=np.intp)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef Py_ssize_t[::1] col4row = col4row_arr
    cdef Py_ssize_t* row4col = <Py_ssize_t*>malloc(n * sizeof(Py_ssize_t))
    cdef Py_ssize_t* path = <Py_ssize_t*>malloc(n * sizeof(Py_ssize_t))
    cdef Py_ssize_t* remaining = <Py_ssize_t*>malloc(n * sizeof(Py_ssize_t))
    cdef double* shortest = <double*>malloc(n * sizeof(double))
    cdef char* sr = <char*>malloc(n)
    cdef char* sc = <char*>malloc(n)
    cdef Py_ssize_t cur, i, j, it, index, sink, num_remaining, tmp
    cdef double min_val, lowest, r
    cdef bint failed = False
    try:
        for j in range(n):
            row4col[j] = -1
        with nogil:
            for cur in range(n):
                num_remaining = n
                for it in range(n):
                    remaining[it] = n - 1 - it
                    sr[it] = 0
                    sc[it] = 0
                    shortest[it] = INFINITY
                min_val = 0.0
                sink = -1
                i = cur
                while sink == -1:
                    sr[i] = 1
                    index = -1
                    lowest = INFINITY
                    for it in range(num_remaining):
                        j = remaining[it]
                        r = min_val + cost[i, j] - u[i] - v[j]
                        if r < shortest[j]:
                            path[j] = i
                            shortest[j] = r
                        if shortest[j] < lowest or (shortest[j] == lowest and row4col[j] == -1):
                            lowest = shortest[j]
                            index = it
                    min_val = lowest
                    if min_val == INFINITY or index == -1:
                        failed = True
                        break
                    j = remaining[index]
                    if row4col[j] == -1:
                        sink = j
                    else:
                        i = row4col[j]
                    sc[j] = 1
                    num_remaining -= 1
                    remaining[index] = remaining[num_remaining]
                if failed:
                    break
                u[cur] += min_val
                for i in range(n):
                    if sr[i] and i != cur:
                        u[i] += min_val - shortest[col4row[i]]
                for j in range(n):
                    if sc[j]:
                        v[j] -= min_val - shortest[j]
                j = sink
                while True:
                    i = path[j]
                    row4col[j] = i
                    tmp = col4row[i]
                    col4row[i] = j
                    j = tmp
                    if i == cur:
                        break
    finally:
        free(row4col)
        free(path)
        free(remaining)
        free(shortest)
        free(sr)
        free(sc)
    if failed:
        raise ValueError("cost matrix admits no finite perfect matching")
    return col4row_arr, u_arr, v_arr


def lex_min_matching(const unsigned char[:, ::1] tight, match_in):
    """Lexicographically smallest perfect matching inside a bipartite graph.

    ``tight`` is the adjacency matrix and ``match_in`` any perfect matching
    in it. Rows are fixed in order; each takes the smallest column that still
    admits a completion, found by BFS over alternating paths.
    """
    cdef Py_ssize_t n = tight.shape[0]
    match_arr = np.array(match_in, dtype=np.intp)
    cdef Py_ssize_t[::1] match = match_arr
    counts = np.asarray(tight).sum(axis=1)
    indptr_arr = np.zeros(n + 1, dtype=np.intp)
    np.cumsum(counts, out=indptr_arr[1:])
    indices_arr = np.nonzero(np.asarray(tight))[1].astype(np.intp)
    cdef Py_ssize_t[::1] indptr = indptr_arr
    cdef Py_ssize_t[::1] indices = indices_arr
    row_of_arr = np.empty(n, dtype=np.intp)
    row_of_arr[match_arr] = np.arange(n)
    cdef Py_ssize_t[::1] row_of = row_of_arr
    cdef Py_ssize_t[::1] seen = np.zeros(n, dtype=np.intp)
    cdef Py_ssize_t[::1] parent_row = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] parent_col = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] queue = np.empty(n, dtype=np.intp)
    cdef unsigned char[::1] fixed_col = np.zeros(n, dtype=np.uint8)
    cdef Py_ssize_t i, e, e2, j, c, a, r, free, start, head, tail, found, stamp = 0
    with nogil:
        for i in range(n):
            for e in range(indptr[i], indptr[i + 1]):
                j = indices[e]
                if j >= match[i]:
                    break
                if fixed_col[j]:
                    continue
                stamp += 1
                free = match[i]
                start = row_of[j]
                seen[j] = stamp
                parent_row[start] = -1
                head = 0
                tail = 1
                queue[0] = start
                found = -1
                while head < tail and found == -1:
                    a = queue[head]
                    head += 1
                    for e2 in range(indptr[a], indptr[a + 1]):
                        c = indices[e2]
                        if fixed_col[c] or seen[c] == stamp:
                            continue
                        if c == free:
                            found = a
                            break
                        seen[c] = stamp
                        r = row_of[c]
                        parent_row[r] = a
                        parent_col[r] = c
                        queue[tail] = r
                        tail += 1
                if found != -1:
                    a = found
                    c = free
                    while True:
                        match[a] = c
                        row_of[c] = a
                        if parent_row[a] == -1:
                            break
                        c = parent_col[a]
                        a = parent_row[a]
                    match[i] = j
                    row_of[j] = i
                    break
            fixed_col[match[i]] = 1
    return match_arr
