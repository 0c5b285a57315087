"""Merge loops compiled with numba.

``match_plan`` does exactly what ``merge.match_batch`` followed by
``merge.plan_batch`` does, one sample at a time, without the intermediate
arrays. ``match_plan_cosine`` also forms each score on the fly from the raw
dot products, with the same elementwise operations in the same order as
``merge.batch_scores``. Only IEEE elementwise arithmetic, comparisons and
integer bookkeeping happen here, so results are bit identical to the numpy
path. No fastmath: -inf has to compare normally and operations must not be
reordered.
"""

import numba
import numpy as np

# same order as merge.STRATEGIES
ISO_FRONT, ISO_LAST, DST_POS, INFORMATIVENESS, ORD_FRONT, ORD_MID = range(6)


@numba.njit(cache=True, nogil=True)
def _first_ok(dst_ok, b):
    j = 0
    while not dst_ok[b, j]:
        j += 1
    return j


@numba.njit(cache=True, nogil=True)
def _plan_sample(b, best, best_col, r, strategy, delta_hat, pairs, slot_of, anchors):
    """Keep the r best sources of sample b, then group and arrange.

    ``best`` holds the negated matched score per source (+inf if invalid).
    """
    n = slot_of.shape[1]
    n_out = n - r
    rows = np.sort(np.argsort(best, kind="mergesort")[:r])
    for k in range(r):
        pairs[b, k, 0] = 2 * rows[k]
        pairs[b, k, 1] = 2 * best_col[rows[k]] + 1

    root = np.arange(n)
    count = np.zeros(n, np.int64)
    seen = np.zeros(n, np.int64)
    anchor_of = np.empty(n, np.int64)
    for k in range(r):
        root[pairs[b, k, 0]] = pairs[b, k, 1]
    for p in range(n):
        count[root[p]] += 1
    # anchor per group, scanning members in position order
    for p in range(n):
        g = root[p]
        if strategy == ORD_MID:
            if seen[g] == (count[g] - 1) // 2:
                anchor_of[g] = p
        elif strategy == INFORMATIVENESS:
            if seen[g] == 0 or delta_hat[b, p] > delta_hat[b, anchor_of[g]]:
                anchor_of[g] = p
        elif strategy == ORD_FRONT:
            if seen[g] == 0:
                anchor_of[g] = p
        else:
            anchor_of[g] = g
        seen[g] += 1

    roots = np.empty(n_out, np.int64)
    keys = np.empty(n_out, np.int64)
    k = 0
    for g in range(n):
        if count[g] > 0:
            roots[k] = g
            merged = count[g] > 1
            if strategy == ISO_FRONT:
                keys[k] = (0 if merged else n) + g
            elif strategy == ISO_LAST:
                keys[k] = (n if merged else 0) + g
            else:
                keys[k] = anchor_of[g]
            k += 1
    perm = np.argsort(keys, kind="mergesort")
    slot_of_root = np.empty(n, np.int64)
    for k in range(n_out):
        slot_of_root[roots[perm[k]]] = k
        anchors[b, k] = anchor_of[roots[perm[k]]]
    for p in range(n):
        slot_of[b, p] = slot_of_root[root[p]]


@numba.njit(cache=True, nogil=True)
def match_plan(score, r, src_ok, dst_ok, strategy, delta_hat):
    """score (B, E, O) even x odd; src_ok (B, E); dst_ok (B, O); delta_hat (B, N).

    Returns pairs (B, r, 2), slot_of (B, N), anchors (B, N - r).
    """
    nb, ne, no = score.shape
    n = ne + no
    pairs = np.empty((nb, r, 2), np.int64)
    slot_of = np.empty((nb, n), np.int64)
    anchors = np.empty((nb, n - r), np.int64)
    best = np.empty(ne)
    best_col = np.empty(ne, np.int64)
    for b in range(nb):
        j0 = _first_ok(dst_ok, b)
        for i in range(ne):
            # first maximum over valid destinations
            bj = j0
            bv = score[b, i, j0]
            for j in range(j0 + 1, no):
                v = score[b, i, j]
                if v > bv and dst_ok[b, j]:
                    bj = j
                    bv = v
            best_col[i] = bj
            best[i] = -bv if src_ok[b, i] else np.inf
        _plan_sample(b, best, best_col, r, strategy, delta_hat, pairs, slot_of, anchors)
    return pairs, slot_of, anchors


@numba.njit(cache=True, nogil=True)
def match_plan_cosine(dots, inv, e, use_delta, r, src_ok, dst_ok, strategy, delta_hat):
    """As :func:`match_plan`, with score[b, i, j] built from raw dot products
    ``dots`` (B, E, O), inverse norms ``inv`` (B, N) and per-token delta
    factors ``e`` (B, N) exactly as ``merge.batch_scores`` builds it."""
    nb, ne, no = dots.shape
    n = ne + no
    pairs = np.empty((nb, r, 2), np.int64)
    slot_of = np.empty((nb, n), np.int64)
    anchors = np.empty((nb, n - r), np.int64)
    best = np.empty(ne)
    best_col = np.empty(ne, np.int64)
    row = np.empty(no)
    for b in range(nb):
        j0 = _first_ok(dst_ok, b)
        for i in range(ne):
            for j in range(no):
                w = dots[b, i, j] * inv[b, 2 * i]
                w = w * inv[b, 2 * j + 1]
                w = w + 1.0
                w = w * 0.5
                w = min(max(w, 0.0), 1.0)
                if use_delta:
                    w = w * (e[b, 2 * i] * e[b, 2 * j + 1])
                row[j] = w
            bj = j0
            bv = row[j0]
            for j in range(j0 + 1, no):
                if row[j] > bv and dst_ok[b, j]:
                    bj = j
                    bv = row[j]
            best_col[i] = bj
            best[i] = -bv if src_ok[b, i] else np.inf
        _plan_sample(b, best, best_col, r, strategy, delta_hat, pairs, slot_of, anchors)
    return pairs, slot_of, anchors


@numba.njit(cache=True, nogil=True)
def scatter_weighted(values, slot_of, weights, out):
    # out[b, slot_of[b, p]] += weights[b, p] * values[b, p]
    nb, n, d = values.shape
    for b in range(nb):
        for p in range(n):
            w = weights[b, p]
            s = slot_of[b, p]
            for k in range(d):
                out[b, s, k] += w * values[b, p, k]
