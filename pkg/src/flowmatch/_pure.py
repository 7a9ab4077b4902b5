"""Pure numpy implementations of the compiled kernels in ``_core.pyx``.

Same signatures and semantics; used when the extension is not built or when
``FLOWMATCH_PURE_PYTHON=1`` is set.
"""

from collections import deque

import numpy as np


def _elu(z):
    return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))


def _forward(weights, biases, x):
    pre, post = [], []
    h = x
    last = len(weights) - 1
    for layer, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w.T + b
        pre.append(z)
        h = _elu(z) if layer < last else z
        post.append(h)
    return pre, post


def mlp_forward(weights, biases, x):
    return _forward(weights, biases, x)[1][-1]


def mlp_loss_grad(weights, biases, x, target, sample_weight, grad_w, grad_b):
    pre, post = _forward(weights, biases, x)
    m = x.shape[0]
    resid = post[-1] - target
    res_sq = np.einsum("ij,ij->i", resid, resid)
    loss = float(sample_weight @ res_sq) / m
    g = (2.0 / m) * sample_weight[:, None] * resid
    for layer in range(len(weights) - 1, -1, -1):
        h = x if layer == 0 else post[layer - 1]
        np.matmul(g.T, h, out=grad_w[layer])
        np.sum(g, axis=0, out=grad_b[layer])
        if layer > 0:
            g = g @ weights[layer]
            z = pre[layer - 1]
            g = np.where(z > 0.0, g, g * (post[layer - 1] + 1.0))
    return loss, res_sq


def lap_solve(cost):
    """Shortest-augmenting-path assignment with row-vectorised Dijkstra sweeps."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    u = np.zeros(n)
    v = np.zeros(n)
    col4row = np.full(n, -1, dtype=np.intp)
    row4col = np.full(n, -1, dtype=np.intp)
    path = np.zeros(n, dtype=np.intp)
    for cur in range(n):
        shortest = np.full(n, np.inf)
        remaining = np.ones(n, dtype=bool)
        sr = np.zeros(n, dtype=bool)
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            sr[i] = True
            r = min_val + cost[i] - u[i] - v
            better = remaining & (r < shortest)
            path[better] = i
            shortest[better] = r[better]
            cand = np.where(remaining, shortest, np.inf)
            lowest = cand.min()
            if not np.isfinite(lowest):
                raise ValueError("cost matrix admits no finite perfect matching")
            ties = np.flatnonzero(cand == lowest)
            free = ties[row4col[ties] == -1]
            j = int(free[0]) if free.size else int(ties[0])
            min_val = lowest
            remaining[j] = False
            if row4col[j] == -1:
                sink = j
            else:
                i = int(row4col[j])
        u[cur] += min_val
        others = sr.copy()
        others[cur] = False
        idx = np.flatnonzero(others)
        u[idx] += min_val - shortest[col4row[idx]]
        scanned = ~remaining
        v[scanned] -= min_val - shortest[scanned]
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, int(col4row[i])
            if i == cur:
                break
    return col4row, u, v


def lex_min_matching(tight, match_in):
    """Lexicographically smallest perfect matching inside the graph ``tight``."""
    n = tight.shape[0]
    match = np.array(match_in, dtype=np.intp)
    rows, cols = np.nonzero(tight)
    splits = np.searchsorted(rows, np.arange(1, n))
    adj = [a.tolist() for a in np.split(cols, splits)]
    row_of = np.empty(n, dtype=np.intp)
    row_of[match] = np.arange(n)
    fixed_col = np.zeros(n, dtype=bool)
    for i in range(n):
        for j in adj[i]:
            if j >= match[i]:
                break
            if fixed_col[j]:
                continue
            free, start = match[i], row_of[j]
            parent = {start: None}
            seen = {j}
            queue = deque([start])
            found = None
            while queue and found is None:
                a = queue.popleft()
                for c in adj[a]:
                    if fixed_col[c] or c in seen:
                        continue
                    if c == free:
                        found = a
                        break
                    seen.add(c)
                    parent[row_of[c]] = (a, c)
                    queue.append(row_of[c])
            if found is not None:
                a, c = found, free
                while True:
                    match[a] = c
                    row_of[c] = a
                    if parent[a] is None:
                        break
                    a, c = parent[a]
                match[i] = j
                row_of[j] = i
                break
        fixed_col[match[i]] = True
    return match
