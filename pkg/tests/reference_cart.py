"""Plain weighted CART / random forest used as the Q = I reference.

Written independently of ``rfgls.glstree``: the split value is the local
within-node variance reduction computed by brute force for every gap, and
leaf values are weighted node means.  It follows the same level-wise growth,
leaf-count rule, per-tree random streams and tie-break as the library so the
two can be compared split for split.
"""
import numpy as np

TIE_RTOL = 1e-10


def tree_stream(seed, t):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t,)))


def _node_gain(x, y, w, idx, c):
    left = idx[x[idx] < c]
    right = idx[x[idx] >= c]
    WL, WR = w[left].sum(), w[right].sum()
    if WL <= 0 or WR <= 0:
        return None
    WP = WL + WR
    SL, SR = (w[left] * y[left]).sum(), (w[right] * y[right]).sum()
    # weighted SS_parent - SS_left - SS_right, over the parent size
    return (SL**2 / WL + SR**2 / WR - (SL + SR) ** 2 / WP) / len(idx)


def _best(X, y, w, idx, feats):
    best = None
    for d in sorted(int(f) for f in feats):
        vals = np.unique(X[idx, d])
        if vals.size < 2:
            continue
        cand = []
        for a, b in zip(vals[:-1], vals[1:]):
            c = 0.5 * (a + b)
            g = _node_gain(X[:, d], y, w, idx, c)
            if g is not None:
                cand.append((c, g))
        if not cand:
            continue
        vmax = max(g for _, g in cand)
        c, g = next((c, g) for c, g in cand if g >= vmax - TIE_RTOL * abs(vmax))
        if best is None or g > best[2] + TIE_RTOL * abs(best[2]):
            best = (d, c, g)
    return best


def grow(X, y, w, t_n, t_c, m_try, rng):
    """Returns (splits, leaves): splits maps node id -> (d, c, left, right); leaves maps id -> value."""
    n, D = X.shape
    t_n = n if t_n is None else t_n
    splits = {}
    partition = [(0, np.arange(n))]
    next_id = 1
    final = set()
    while len(partition) < t_n and any(len(ix) > t_c and nid not in final for nid, ix in partition):
        total = len(partition)
        nxt = []
        for nid, ix in partition:
            if len(ix) <= t_c or total >= t_n or nid in final:
                nxt.append((nid, ix))
                continue
            feats = rng.choice(D, size=m_try, replace=False)
            b = _best(X, y, w, ix, feats)
            if b is None:
                final.add(nid)
                nxt.append((nid, ix))
                continue
            d, c, _ = b
            lid, rid = next_id, next_id + 1
            next_id += 2
            splits[nid] = (d, c, lid, rid)
            nxt.append((lid, ix[X[ix, d] < c]))
            nxt.append((rid, ix[X[ix, d] >= c]))
            total += 1
        if len(nxt) == len(partition):
            break
        partition = nxt
    leaves = {nid: float((w[ix] * y[ix]).sum() / w[ix].sum()) for nid, ix in partition}
    return splits, leaves


def predict(tree, X):
    splits, leaves = tree
    out = np.empty(len(X))
    for i, x in enumerate(X):
        node = 0
        while node in splits:
            d, c, left, right = splits[node]
            node = left if x[d] < c else right
        out[i] = leaves[node]
    return out


def forest(X, y, n_tree, t_n, t_c, m_try, seed, bootstrap=False):
    n = len(y)
    trees = []
    for t in range(n_tree):
        rng = tree_stream(seed, t)
        w = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float) if bootstrap else np.ones(n)
        trees.append(grow(X, y, w, t_n, t_c, m_try, rng))
    return trees


def predict_forest(trees, X):
    return np.mean([predict(t, X) for t in trees], axis=0)
