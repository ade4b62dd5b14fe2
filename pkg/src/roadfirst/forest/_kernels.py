"""Compiled inner loops: CART growth, ensemble prediction, interventional TreeSHAP.

Trees are flat arrays. ``feature[i] == -1`` marks a leaf; internal nodes send
``x[feature] < threshold`` left and everything else right.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, nogil=True)
def _splitmix(state):
    state = state + _GOLDEN
    z = state
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True, nogil=True)
def _below(state, n):
    # uniform integer in [0, n) from the top 53 bits
    state, z = _splitmix(state)
    u = np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    k = np.int64(u * n)
    if k >= n:
        k = n - 1
    return state, k


@njit(cache=True, nogil=True)
def build_tree(X, y, max_depth, min_leaf, n_sub, state):
    """Grow one CART tree on ``X`` (rows already bootstrapped).

    At each node ``n_sub`` features are drawn without replacement, visited in
    ascending index order, and every midpoint between consecutive distinct
    values is scored; the first strict improvement wins, so ties resolve to
    the lower feature index and then the lower threshold.
    """
    n, p = X.shape
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    counts = np.zeros((cap, 2), dtype=np.int64)

    idx = np.arange(n)
    perm = np.arange(p)
    chosen = np.empty(n_sub, dtype=np.int64)
    vals = np.empty(n)
    buf = np.empty(n, dtype=np.int64)

    st_node = np.empty(cap, dtype=np.int64)
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    st_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        depth = st_depth[top]
        m = hi - lo
        c1 = 0
        for i in range(lo, hi):
            c1 += y[idx[i]]
        c0 = m - c1
        counts[node, 0] = c0
        counts[node, 1] = c1
        if c0 == 0 or c1 == 0 or m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue

        for j in range(n_sub):
            state, r = _below(state, p - j)
            r += j
            tmp = perm[j]
            perm[j] = perm[r]
            perm[r] = tmp
        for j in range(n_sub):
            chosen[j] = perm[j]
        chosen.sort()

        parent_score = (c0 * c0 + c1 * c1) / m
        best_score = parent_score
        best_f = -1
        best_t = 0.0
        for jf in range(n_sub):
            f = chosen[jf]
            for i in range(m):
                vals[i] = X[idx[lo + i], f]
            order = np.argsort(vals[:m], kind="mergesort")
            l1 = 0
            for i in range(m - 1):
                l1 += y[idx[lo + order[i]]]
                nl = i + 1
                a = vals[order[i]]
                b = vals[order[i + 1]]
                if a == b or nl < min_leaf or m - nl < min_leaf:
                    continue
                l0 = nl - l1
                r1 = c1 - l1
                r0 = (m - nl) - r1
                score = (l0 * l0 + l1 * l1) / nl + (r0 * r0 + r1 * r1) / (m - nl)
                if score > best_score:
                    best_score = score
                    best_f = f
                    t = 0.5 * (a + b)
                    if t <= a:
                        t = b
                    best_t = t

        if best_f < 0 or best_score <= parent_score * (1.0 + 1e-12):
            continue

        nl = 0
        nr = 0
        for i in range(lo, hi):
            if X[idx[i], best_f] < best_t:
                idx[lo + nl] = idx[i]
                nl += 1
            else:
                buf[nr] = idx[i]
                nr += 1
        for i in range(nr):
            idx[lo + nl + i] = buf[i]

        feature[node] = best_f
        threshold[node] = best_t
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        # right pushed first so the left subtree is expanded first
        st_node[top] = rc
        st_lo[top] = lo + nl
        st_hi[top] = hi
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lc
        st_lo[top] = lo
        st_hi[top] = lo + nl
        st_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), counts[:n_nodes].copy())


@njit(cache=True, nogil=True)
def leaf_index(X, feature, threshold, left, right, root):
    out = np.empty(X.shape[0], dtype=np.int64)
    for r in range(X.shape[0]):
        node = root
        while feature[node] >= 0:
            if X[r, feature[node]] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = node
    return out


@njit(cache=True, nogil=True)
def predict_mean(X, feature, threshold, left, right, value, roots):
    """Mean over trees of the leaf value reached by each row (nodes concatenated)."""
    n_rows = X.shape[0]
    out = np.zeros(n_rows)
    n_trees = roots.shape[0]
    for r in range(n_rows):
        acc = 0.0
        for t in range(n_trees):
            node = roots[t]
            while feature[node] >= 0:
                if X[r, feature[node]] < threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            acc += value[node]
        out[r] = acc / n_trees
    return out


_VISIT = 0
_SET = 1


@njit(cache=True, nogil=True)
def _shap_one(x, Z, rows, feature, threshold, left, right, value, root,
              assign, path, w_pos, w_neg, scale, phi, stack):
    # stack entries: (kind, node_or_feature, lo_or_value, hi_or_slot, n_a, n_b)
    top = 0
    stack[0, 0] = _VISIT
    stack[0, 1] = root
    stack[0, 2] = 0
    stack[0, 3] = Z.shape[0]
    stack[0, 4] = 0
    stack[0, 5] = 0
    top = 1
    while top > 0:
        top -= 1
        kind = stack[top, 0]
        if kind == _SET:
            f = stack[top, 1]
            assign[f] = stack[top, 2]
            if stack[top, 3] >= 0:
                path[stack[top, 3]] = f
            continue
        node = stack[top, 1]
        lo = stack[top, 2]
        hi = stack[top, 3]
        n_a = stack[top, 4]
        n_b = stack[top, 5]
        f = feature[node]
        if f < 0:
            if n_a + n_b == 0:
                continue
            v = value[node] * scale * (hi - lo)
            wa = w_pos[n_a, n_b] * v
            wb = w_neg[n_a, n_b] * v
            for k in range(n_a + n_b):
                g = path[k]
                if assign[g] == 1:
                    phi[g] += wa
                else:
                    phi[g] -= wb
            continue
        t = threshold[node]
        x_left = x[f] < t
        x_child = left[node] if x_left else right[node]
        z_child = right[node] if x_left else left[node]
        a = assign[f]
        if a == 1:
            stack[top, 0] = _VISIT
            stack[top, 1] = x_child
            top += 1
            continue
        # background rows [lo, mid) follow x at this node, [mid, hi) do not
        mid = lo
        for i in range(lo, hi):
            if (Z[rows[i], f] < t) == x_left:
                tmp = rows[mid]
                rows[mid] = rows[i]
                rows[i] = tmp
                mid += 1
        if a == 2:
            if hi > mid:
                stack[top, 0] = _VISIT
                stack[top, 1] = z_child
                stack[top, 2] = mid
                stack[top, 3] = hi
                stack[top, 4] = n_a
                stack[top, 5] = n_b
                top += 1
            if mid > lo:
                stack[top, 0] = _VISIT
                stack[top, 1] = x_child
                stack[top, 2] = lo
                stack[top, 3] = mid
                stack[top, 4] = n_a
                stack[top, 5] = n_b
                top += 1
            continue
        if hi > mid:
            # pushed in reverse: set f->x, visit x side, set f->z, visit z side, clear f
            stack[top, 0] = _SET
            stack[top, 1] = f
            stack[top, 2] = 0
            stack[top, 3] = -1
            top += 1
            stack[top, 0] = _VISIT
            stack[top, 1] = z_child
            stack[top, 2] = mid
            stack[top, 3] = hi
            stack[top, 4] = n_a
            stack[top, 5] = n_b + 1
            top += 1
            stack[top, 0] = _SET
            stack[top, 1] = f
            stack[top, 2] = 2
            stack[top, 3] = -1
            top += 1
            stack[top, 0] = _VISIT
            stack[top, 1] = x_child
            stack[top, 2] = mid
            stack[top, 3] = hi
            stack[top, 4] = n_a + 1
            stack[top, 5] = n_b
            top += 1
            stack[top, 0] = _SET
            stack[top, 1] = f
            stack[top, 2] = 1
            stack[top, 3] = n_a + n_b
            top += 1
        if mid > lo:
            stack[top, 0] = _VISIT
            stack[top, 1] = x_child
            stack[top, 2] = lo
            stack[top, 3] = mid
            stack[top, 4] = n_a
            stack[top, 5] = n_b
            top += 1


@njit(cache=True, nogil=True)
def tree_shap_rows(X, Z, feature, threshold, left, right, value, root, w_pos, w_neg):
    """Interventional Shapley values of one tree for each row of ``X`` against background ``Z``.

    For a background row z, a node whose feature sends x and z different
    ways forks into an "x side" and a "z side". A leaf reached with features
    A taken from x and B from z pays ``+v (|A|-1)! |B|! / (|A|+|B|)!`` to each
    member of A and ``-v |A|! (|B|-1)! / (|A|+|B|)!`` to each member of B.
    Background rows sharing the same fork state travel together, so each
    distinct state is walked once per explained row.
    """
    n_rows, p = X.shape
    phi = np.zeros((n_rows, p))
    assign = np.zeros(p, dtype=np.int64)
    path = np.zeros(p + 1, dtype=np.int64)
    rows = np.arange(Z.shape[0])
    stack = np.zeros((6 * feature.shape[0] + 6, 6), dtype=np.int64)
    scale = 1.0 / Z.shape[0]
    for r in range(n_rows):
        _shap_one(X[r], Z, rows, feature, threshold, left, right, value, root,
                  assign, path, w_pos, w_neg, scale, phi[r], stack)
    return phi
