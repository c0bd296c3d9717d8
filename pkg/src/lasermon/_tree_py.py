"""Pure-numpy split search and tree traversal.

Mirrors ``_tree_core.pyx`` operation for operation: sums are accumulated
sequentially (``cumsum``) in node order and candidate scores use the same
expression, so both backends pick bit-identical splits.

Score of a split is ``S_l**2 / n_l + S_r**2 / n_r`` (larger is better), which
is the total sum of squares minus the summed child SSE.
"""
from __future__ import annotations

import numpy as np

NO_SPLIT = (-1, 0.0, -np.inf)


def best_split(X, y, idx, features, min_leaf):
    n = len(idx)
    best_f, best_t, best_score = NO_SPLIT
    if n < 2:
        return best_f, best_t, best_score
    y_node = y[idx]
    sizes_l = np.arange(1, n, dtype=float)
    sizes_r = n - sizes_l
    valid_size = (sizes_l >= min_leaf) & (sizes_r >= min_leaf)
    for f in features:
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs_s = xs[order]
        csum = np.cumsum(y_node[order])
        total = csum[-1]
        left = csum[:-1]
        right = total - left
        score = left * left / sizes_l + right * right / sizes_r
        ok = valid_size & (xs_s[:-1] < xs_s[1:])
        if not ok.any():
            continue
        score = np.where(ok, score, -np.inf)
        i = int(np.argmax(score))
        if score[i] > best_score:
            lo, hi = xs_s[i], xs_s[i + 1]
            thr = lo / 2.0 + hi / 2.0
            if thr >= hi or thr < lo:
                thr = lo
            best_f, best_t, best_score = int(f), float(thr), float(score[i])
    return best_f, best_t, best_score


def random_split(X, y, idx, features, u, min_leaf):
    n = len(idx)
    best_f, best_t, best_score = NO_SPLIT
    if n < 2:
        return best_f, best_t, best_score
    y_node = y[idx]
    total = np.cumsum(y_node)[-1]
    for j, f in enumerate(features):
        xs = X[idx, f]
        lo, hi = xs.min(), xs.max()
        if not hi > lo:
            continue
        thr = lo + u[j] * (hi - lo)
        if thr >= hi:
            thr = lo
        mask = xs <= thr
        n_l = int(np.count_nonzero(mask))
        n_r = n - n_l
        if n_l < min_leaf or n_r < min_leaf:
            continue
        s_l = np.cumsum(np.where(mask, y_node, 0.0))[-1]
        s_r = total - s_l
        score = s_l * s_l / float(n_l) + s_r * s_r / float(n_r)
        if score > best_score:
            best_f, best_t, best_score = int(f), float(thr), float(score)
    return best_f, best_t, best_score


def predict_tree(feature, threshold, left, right, value, X):
    node = np.zeros(X.shape[0], dtype=np.intp)
    rows = np.arange(X.shape[0])
    active = feature[node] >= 0
    while active.any():
        r = rows[active]
        nd = node[r]
        go_left = X[r, feature[nd]] <= threshold[nd]
        node[r] = np.where(go_left, left[nd], right[nd])
        active = feature[node] >= 0
    return value[node].astype(float)
