"""Random forest of depth-limited regression trees.

Features are quantile-binned once per forest (at most ``n_bins`` bins) and
trees are grown level by level from bin histograms, so one tree costs a few
passes over the bootstrap sample. Each tree sees a bootstrap resample
(multinomial counts, no copying) and draws ``mtry`` candidate features per
node. Binary labels give probability forests.

Trees are stored heap-style: node ``k`` has children ``2k+1`` and ``2k+2``;
a negative feature index marks a leaf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np


def _bin_edges(col: np.ndarray, n_bins: int) -> np.ndarray:
    """Cut points: midpoints between distinct quantile values."""
    qs = np.unique(np.quantile(col, np.linspace(0.0, 1.0, n_bins + 1)))
    if qs.size <= 1:
        return np.empty(0)
    return 0.5 * (qs[:-1] + qs[1:])


@numba.njit(cache=True, nogil=True)
def _next(state):
    # splitmix64 step; state is a length-1 uint64 array
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, nogil=True)
def _below(state, n):
    return np.int64(_next(state) >> np.uint64(33)) % n


@numba.njit(cache=True, nogil=True)
def _grow_tree(Xb, y, n_bins_f, max_bins, max_depth, mtry, min_leaf, state,
               feat_out, bin_out, val_out, hs, hc, perm):
    n, p = Xb.shape
    counts = np.zeros(n)
    for _ in range(n):
        counts[_below(state, n)] += 1.0
    # compact the bootstrap sample: rows with positive multiplicity
    rows = np.flatnonzero(counts)
    m_rows = rows.size
    w = counts[rows]
    node_of = np.zeros(m_rows, dtype=np.int64)
    choice = np.empty((2 ** max_depth, mtry), dtype=np.int64)
    tot_s = np.empty(2 ** max_depth)
    tot_c = np.empty(2 ** max_depth)
    for depth in range(max_depth + 1):
        first = 2 ** depth - 1
        n_level = 2 ** depth
        last = depth == max_depth
        for m in range(n_level):
            tot_s[m] = 0.0
            tot_c[m] = 0.0
            if not last:
                # partial Fisher-Yates draw of mtry distinct features
                for r in range(p):
                    perm[r] = r
                for r in range(mtry):
                    j = r + _below(state, p - r)
                    tmp = perm[r]
                    perm[r] = perm[j]
                    perm[j] = tmp
                    choice[m, r] = perm[r]
                    for b in range(max_bins):
                        hs[m, r, b] = 0.0
                        hc[m, r, b] = 0.0
        for s in range(m_rows):
            k = node_of[s]
            if k < 0:
                continue
            row = rows[s]
            if depth > 0:
                # route through the parent's split
                f = feat_out[k]
                if f < 0:
                    node_of[s] = -1
                    continue
                k = 2 * k + 1 if Xb[row, f] <= bin_out[k] else 2 * k + 2
                node_of[s] = k
            m = k - first
            ws = w[s]
            wy = ws * y[row]
            tot_s[m] += wy
            tot_c[m] += ws
            if not last:
                for r in range(mtry):
                    b = Xb[row, choice[m, r]]
                    hs[m, r, b] += wy
                    hc[m, r, b] += ws
        for m in range(n_level):
            C = tot_c[m]
            if C == 0.0:
                continue
            k = first + m
            S = tot_s[m]
            val_out[k] = S / C
            feat_out[k] = -1
            if last or C < 2 * min_leaf:
                continue
            base = S * S / C
            best_gain = 1e-12 * (1.0 + abs(base))
            best_f = -1
            best_b = -1
            for r in range(mtry):
                f = choice[m, r]
                sl = 0.0
                cl = 0.0
                for b in range(n_bins_f[f] - 1):
                    sl += hs[m, r, b]
                    cl += hc[m, r, b]
                    if cl < min_leaf:
                        continue
                    cr = C - cl
                    if cr < min_leaf:
                        break
                    sr = S - sl
                    gain = sl * sl / cl + sr * sr / cr - base
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_b = b
            if best_f >= 0:
                feat_out[k] = best_f
                bin_out[k] = best_b


@numba.njit(cache=True, nogil=True)
def _grow_forest(Xb, y, n_bins_f, n_trees, max_depth, mtry, min_leaf, seeds,
                 feat_out, bin_out, val_out):
    p = Xb.shape[1]
    max_bins = 0
    for f in range(p):
        if n_bins_f[f] > max_bins:
            max_bins = n_bins_f[f]
    hs = np.empty((2 ** max_depth, mtry, max_bins))
    hc = np.empty((2 ** max_depth, mtry, max_bins))
    perm = np.empty(p, dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    for t in range(n_trees):
        state[0] = np.uint64(seeds[t])
        _grow_tree(Xb, y, n_bins_f, max_bins, max_depth, mtry, min_leaf, state,
                   feat_out[t], bin_out[t], val_out[t], hs, hc, perm)


@numba.njit(cache=True, nogil=True)
def _predict(X, feat, thr, val):
    n = X.shape[0]
    n_trees = feat.shape[0]
    out = np.zeros(n)
    for t in range(n_trees):
        ft = feat[t]
        tt = thr[t]
        vt = val[t]
        for i in range(n):
            k = 0
            while ft[k] >= 0:
                k = 2 * k + 1 + np.int64(X[i, ft[k]] > tt[k])
            out[i] += vt[k]
    return out / n_trees


@dataclass(frozen=True)
class Forest:
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        return _predict(np.ascontiguousarray(X, dtype=np.float64), self.feature, self.threshold, self.value)


def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    n_trees: int = 200,
    max_depth: int = 6,
    mtry: int | None = None,
    min_leaf: int = 5,
    n_bins: int = 64,
    seed: int = 0,
) -> Forest:
    """Grow a regression forest; ``mtry`` defaults to ``floor(sqrt(p))``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    mtry = max(1, int(math.isqrt(p))) if mtry is None else int(min(max(mtry, 1), p))
    edges = [_bin_edges(X[:, f], n_bins) for f in range(p)]
    Xb = np.empty((n, p), dtype=np.uint8)
    if n_bins > 255:
        raise ValueError("n_bins must be at most 255")
    for f in range(p):
        Xb[:, f] = np.searchsorted(edges[f], X[:, f], side="left")
    n_bins_f = np.array([e.size + 1 for e in edges], dtype=np.int64)
    seeds = np.random.SeedSequence(seed).generate_state(n_trees, dtype=np.uint64)
    max_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full((n_trees, max_nodes), -2, dtype=np.int64)
    bins = np.zeros((n_trees, max_nodes), dtype=np.int64)
    val = np.zeros((n_trees, max_nodes))
    _grow_forest(Xb, y, n_bins_f, n_trees, max_depth, mtry, min_leaf,
                 seeds, feat, bins, val)
    thr = np.zeros((n_trees, max_nodes))
    split = feat >= 0
    for f in range(p):
        sel = split & (feat == f)
        if sel.any():
            thr[sel] = edges[f][bins[sel]]
    return Forest(feat, thr, val)
