"""Squared-error CART trees and bagged forests on dense numpy arrays.

Binary classification reuses the regression criterion on 0/1 targets: the
variance of a 0/1 node is half its Gini impurity, so the chosen splits are
the same and leaf means are class fractions.

The grower is a numba kernel working on an index array that is partitioned
in place, node by node.  Per-split feature subsampling draws from a
splitmix64 stream seeded by the caller, so a tree is a pure function of
``(X, y, hyperparameters, seed)``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np


@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return self.value[node]

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=float),
        )


@numba.njit(cache=True)
def _splitmix(state):
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _node_best_split(X, y, idx, start, end, feats, min_leaf):
    """Best split of rows ``idx[start:end]`` over ``feats``: (feature, threshold, sse).

    Feature -1 means no admissible split.  Ties keep the earlier feature and
    then the lower threshold.
    """
    n = end - start
    best_f, best_thr, best_sse = -1, 0.0, np.inf
    if n < 2 or n < 2 * min_leaf:
        return best_f, best_thr, best_sse
    mean = 0.0
    for i in range(start, end):
        mean += y[idx[i]]
    mean /= n
    tot = 0.0
    totsq = 0.0
    for i in range(start, end):
        c = y[idx[i]] - mean
        tot += c
        totsq += c * c
    vals = np.empty(n)
    ys = np.empty(n)
    for f in feats:
        for i in range(n):
            vals[i] = X[idx[start + i], f]
        order = np.argsort(vals, kind="mergesort")
        for i in range(n):
            ys[i] = y[idx[start + order[i]]] - mean
        s = 0.0
        q = 0.0
        for i in range(n - 1):
            s += ys[i]
            q += ys[i] * ys[i]
            nl = i + 1
            nr = n - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            lo = vals[order[i]]
            hi = vals[order[i + 1]]
            if not hi > lo:
                continue
            sse = (q - s * s / nl) + ((totsq - q) - (tot - s) * (tot - s) / nr)
            if sse < best_sse:
                best_sse = sse
                best_f = f
                thr = lo + (hi - lo) / 2.0
                if not thr < hi:
                    thr = lo
                best_thr = thr
    return best_f, best_thr, best_sse


@numba.njit(cache=True, nogil=True)
def _grow(X, y, max_depth, min_leaf, k, seed):
    n, d = X.shape
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    idx = np.arange(n)
    scratch = np.empty(n, dtype=np.int64)
    perm = np.arange(d)
    state = np.array([np.uint64(seed)], dtype=np.uint64)

    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0], st_start[0], st_end[0], st_depth[0] = 0, 0, n, 0
    top = 1
    count = 1
    s = 0.0
    for i in range(n):
        s += y[i]
    value[0] = s / n

    while top > 0:
        top -= 1
        node, start, end, depth = st_node[top], st_start[top], st_end[top], st_depth[top]
        if max_depth >= 0 and depth >= max_depth:
            continue
        ymin, ymax = np.inf, -np.inf
        for i in range(start, end):
            v = y[idx[i]]
            ymin = min(ymin, v)
            ymax = max(ymax, v)
        if ymax == ymin:
            continue
        if k < d:
            # partial Fisher-Yates, then ascending order for deterministic tie-breaking
            for j in range(k):
                r = j + np.int64(_splitmix(state) % np.uint64(d - j))
                perm[j], perm[r] = perm[r], perm[j]
            feats = np.sort(perm[:k].copy())
        else:
            feats = np.arange(d)
        f, thr, sse = _node_best_split(X, y, idx, start, end, feats, min_leaf)
        if f < 0:
            continue
        mean = 0.0
        for i in range(start, end):
            mean += y[idx[i]]
        mean /= end - start
        parent = 0.0
        for i in range(start, end):
            c = y[idx[i]] - mean
            parent += c * c
        if not sse < parent * (1.0 - 1e-12):
            continue
        # stable partition of idx[start:end]
        nl = 0
        for i in range(start, end):
            if X[idx[i], f] <= thr:
                nl += 1
        a, b = start, start + nl
        for i in range(start, end):
            r = idx[i]
            if X[r, f] <= thr:
                scratch[a] = r
                a += 1
            else:
                scratch[b] = r
                b += 1
        for i in range(start, end):
            idx[i] = scratch[i]
        mid = start + nl
        feature[node] = f
        threshold[node] = thr
        li, ri = count, count + 1
        count += 2
        left[node], right[node] = li, ri
        sl = 0.0
        for i in range(start, mid):
            sl += y[idx[i]]
        value[li] = sl / (mid - start)
        sr = 0.0
        for i in range(mid, end):
            sr += y[idx[i]]
        value[ri] = sr / (end - mid)
        # right pushed first so the left subtree is numbered first (preorder)
        st_node[top], st_start[top], st_end[top], st_depth[top] = ri, mid, end, depth + 1
        top += 1
        st_node[top], st_start[top], st_end[top], st_depth[top] = li, start, mid, depth + 1
        top += 1
    return feature[:count], threshold[:count], left[:count], right[:count], value[:count]


def best_split(X: np.ndarray, y: np.ndarray, features, min_leaf: int = 1):
    """Best (feature, threshold, sse) over ``features`` for all rows, or None."""
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    f, thr, sse = _node_best_split(X, y, np.arange(len(y)), 0, len(y),
                                   np.asarray(features, dtype=np.int64), int(min_leaf))
    return None if f < 0 else (int(f), float(thr), float(sse))


def build_tree(X: np.ndarray, y: np.ndarray, max_depth: Optional[int] = None,
               min_leaf: int = 1, max_features: Optional[int] = None, seed: int = 0) -> Tree:
    """Grow one tree depth-first; nodes are numbered in preorder."""
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    n, d = X.shape
    if n == 0:
        raise ValueError("cannot grow a tree on zero rows")
    if len(y) != n:
        raise ValueError("X and y differ in length")
    k = d if max_features is None else max(1, min(d, int(max_features)))
    parts = _grow(X, y, -1 if max_depth is None else int(max_depth), int(min_leaf), k,
                  np.uint64(seed % (1 << 64)))
    return Tree(*(np.array(p) for p in parts))


def resolve_max_features(spec, d: int) -> Optional[int]:
    if spec is None or spec == "all":
        return None
    if spec == "sqrt":
        return max(1, int(np.sqrt(d)))
    if isinstance(spec, float) and 0 < spec <= 1:
        return max(1, int(round(spec * d)))
    return int(spec)


def fit_trees(X: np.ndarray, y: np.ndarray, n_trees: int, seed: int, max_depth=None,
              min_leaf: int = 1, feature_subsample="sqrt", threads: int = 1) -> list:
    """Bagged trees; tree ``t`` draws from child ``t`` of the seed sequence."""
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if len(X) == 0:
        raise ValueError("cannot fit a forest on zero rows")
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    mf = resolve_max_features(feature_subsample, X.shape[1])

    def one(t):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t,)))
        boot = rng.integers(0, len(X), size=len(X))
        split_seed = int(rng.integers(0, 1 << 63))
        return build_tree(X[boot], y[boot], max_depth, min_leaf, mf, split_seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, range(n_trees)))
    return [one(t) for t in range(n_trees)]
