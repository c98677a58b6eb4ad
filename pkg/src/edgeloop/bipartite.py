"""Tolerance-limited bipartite matching between two sets of pixels."""

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree


def pixel_coords(mask):
    """(n, 2) array of (row, col) for the true pixels of ``mask``, raster order."""
    return np.argwhere(np.asarray(mask, dtype=bool))


def candidate_pairs(left, right, tol):
    """All (i, j, dist) with ``|left[i] - right[j]| <= tol``, sorted by i then dist then j."""
    if len(left) == 0 or len(right) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    tl = cKDTree(left)
    tr = cKDTree(right)
    sdm = tl.sparse_distance_matrix(tr, tol + 1e-9, output_type="coo_matrix")
    i, j = sdm.row.astype(np.int64), sdm.col.astype(np.int64)
    d = np.hypot(*(left[i] - right[j]).T) if len(i) else np.zeros(0)
    # sparse_distance_matrix drops exact zero distances; add coincident pixels back
    lset = {tuple(p): n for n, p in enumerate(left.tolist())}
    zi, zj = [], []
    for n, p in enumerate(right.tolist()):
        m = lset.get(tuple(p))
        if m is not None:
            zi.append(m)
            zj.append(n)
    if zi:
        i = np.concatenate([i, np.array(zi, np.int64)])
        j = np.concatenate([j, np.array(zj, np.int64)])
        d = np.concatenate([d, np.zeros(len(zi))])
    keep = d <= tol
    i, j, d = i[keep], j[keep], d[keep]
    # zero-distance pairs may appear twice if the tree also reported them
    order = np.lexsort((j, d, i))
    i, j, d = i[order], j[order], d[order]
    if len(i):
        uniq = np.ones(len(i), dtype=bool)
        uniq[1:] = (i[1:] != i[:-1]) | (j[1:] != j[:-1])
        i, j, d = i[uniq], j[uniq], d[uniq]
    return i, j, d


def max_matching(n_left, n_right, i, j):
    """Maximum-cardinality matching (Hopcroft-Karp); returns right partner per left or -1."""
    if n_left == 0 or n_right == 0 or len(i) == 0:
        return np.full(n_left, -1, dtype=np.int64)
    g = csr_matrix((np.ones(len(i), dtype=np.int8), (i, j)), shape=(n_left, n_right))
    return maximum_bipartite_matching(g, perm_type="column").astype(np.int64)


def ordered_matching(n_left, n_right, i, j, order):
    """Maximum-cardinality matching that prefers earlier left vertices.

    Left vertices are processed in ``order``; each first tries its candidates
    in the given adjacency order (nearest first), then an augmenting-path
    search.  Augmenting never unmatches a left vertex, so every vertex that
    is matched when visited stays matched.
    """
    adj = [[] for _ in range(n_left)]
    for a, b in zip(i.tolist(), j.tolist()):
        adj[a].append(b)
    match_l = [-1] * n_left
    match_r = [-1] * n_right
    stamp = [0] * n_right
    cur = 0
    for u in order:
        u = int(u)
        if not adj[u]:
            continue
        free = next((v for v in adj[u] if match_r[v] == -1), -1)
        if free >= 0:
            match_l[u] = free
            match_r[free] = u
            continue
        cur += 1
        # iterative DFS for an augmenting path from u
        stack = [(u, 0)]
        path = []
        found = -1
        while stack:
            x, k = stack[-1]
            if k >= len(adj[x]):
                stack.pop()
                if path:
                    path.pop()
                continue
            stack[-1] = (x, k + 1)
            v = adj[x][k]
            if stamp[v] == cur:
                continue
            stamp[v] = cur
            path.append(v)
            if match_r[v] == -1:
                found = v
                break
            stack.append((match_r[v], 0))
        if found < 0:
            continue
        # path holds the right vertices visited along the current DFS branch
        lefts = [s[0] for s in stack]
        for x, v in zip(lefts, path):
            match_l[x] = v
            match_r[v] = x
    return np.array(match_l, dtype=np.int64)
