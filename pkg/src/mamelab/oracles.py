"""Slow, independent reference implementations used to check the fast paths.

Nothing here imports the code it checks: each reference is written as plain
loops straight from the defining recurrence or rule.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def euler_hold(A, B, delta, step: float = 1e-6):
    """Integrate h' = A h + B x over one hold interval of length delta with
    forward Euler, for every channel at once.

    Returns (A_bar, B_bar): the state after the interval starting from h=1
    with x=0, and starting from h=0 with x=1. The last step is shortened so
    each channel lands exactly on its own delta.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    A, B, delta = np.broadcast_arrays(A, B, delta)
    n_full = np.floor(delta / step).astype(np.int64)
    tail = delta - n_full * step
    ha = np.ones_like(A)
    hb = np.zeros_like(A)
    for k in range(int(n_full.max(initial=0))):
        live = n_full > k
        ha = np.where(live, ha + step * (A * ha), ha)
        hb = np.where(live, hb + step * (A * hb + B), hb)
    ha = ha + tail * (A * ha)
    hb = hb + tail * (A * hb + B)
    return ha, hb


def naive_scan(x, delta, A, Bm, Cm):
    """Per-step selective recurrence for one sequence.

    x, delta (N, Di); A (Di, S); Bm, Cm (N, S). Discretizes each step with
    exp and the closed-form hold gain, then updates h and reads out y.
    """
    n, di = x.shape
    s = A.shape[1]
    h = np.zeros((di, s))
    y = np.zeros((n, di))
    for t in range(n):
        for d in range(di):
            for k in range(s):
                z = delta[t, d] * A[d, k]
                a_bar = math.exp(z)
                gain = 1.0 if z == 0 else math.expm1(z) / z
                b_bar = gain * delta[t, d] * Bm[t, k]
                h[d, k] = a_bar * h[d, k] + b_bar * x[t, d]
                y[t, d] += Cm[t, k] * h[d, k]
    return y


def exhaustive_match(score, r: int, src_pos, dst_pos):
    """Pair selection by enumerating every r-subset of sources.

    Each source first takes its best destination (ties: lower dst position).
    Among all r-subsets, the chosen one is the subset whose keys
    (-matched score, src position), sorted ascending, are lexicographically
    smallest. That is: higher matched scores win, ties go to lower positions.
    """
    score = np.asarray(score, dtype=np.float64)
    n_src, n_dst = score.shape
    if r == 0:
        return []
    best = []
    for i in range(n_src):
        top_j = None
        for j in sorted(range(n_dst), key=lambda j: dst_pos[j]):
            if top_j is None or score[i, j] > score[i, top_j]:
                top_j = j
        best.append((float(score[i, top_j]), top_j))
    chosen, chosen_key = None, None
    for subset in itertools.combinations(range(n_src), r):
        key = sorted((-best[i][0], src_pos[i]) for i in subset)
        if chosen_key is None or key < chosen_key:
            chosen, chosen_key = subset, key
    pairs = [(int(src_pos[i]), int(dst_pos[best[i][1]])) for i in chosen]
    return sorted(pairs)


def cosine_weight(a, b) -> float:
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    na = math.sqrt(sum(v * v for v in a))
    nb = math.sqrt(sum(v * v for v in b))
    if na == 0 or nb == 0:
        return 0.5
    return min(1.0, max(0.0, 0.5 * (sum(p * q for p, q in zip(a, b)) / (na * nb) + 1.0)))


def reference_merge(values, sizes, orig_index, cls_pos, delta_f, delta_b, r: int, tau: float = 10.0,
                    f: str = "avg", strategy: str = "ord_front", score_mode: str = "mame"):
    """One merge step for one sample, written as straight-line loops.

    values (N, D) are the token features used both for scoring and as the
    stream to merge. Returns (pairs, merged values, sizes, orig_index, cls_pos).
    """
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    reduce = {"avg": lambda a, b: (a + b) / 2, "sum": lambda a, b: a + b,
              "max": max, "min": min}[f]
    dh = [reduce(float(np.mean(delta_f[i])), float(np.mean(delta_b[i]))) for i in range(n)]
    src = [p for p in range(0, n, 2) if p != cls_pos]
    dst = [p for p in range(1, n, 2) if p != cls_pos]
    score = np.zeros((len(src), len(dst)))
    for a, i in enumerate(src):
        for b, j in enumerate(dst):
            w = cosine_weight(values[i], values[j])
            if score_mode == "mame":
                w *= math.exp(-(dh[i] + dh[j]) / (2 * tau))
            score[a, b] = w
    pairs = exhaustive_match(score, r, src, dst)

    into = {s: d for s, d in pairs}
    groups = {}
    for p in range(n):
        groups.setdefault(into.get(p, p), []).append(p)
    placed = []
    for root, members in groups.items():
        members = sorted(members)
        if strategy == "ord_front":
            anchor = members[0]
        elif strategy == "ord_mid":
            anchor = members[(len(members) - 1) // 2]
        elif strategy == "informativeness":
            anchor = max(members, key=lambda p: (dh[p], -p))
        else:
            anchor = root
        if strategy == "iso_front":
            key = (0 if len(members) > 1 else 1, root)
        elif strategy == "iso_last":
            key = (1 if len(members) > 1 else 0, root)
        else:
            key = (0, anchor)
        placed.append((key, anchor, members))
    placed.sort()
    out_v, out_s, out_o = [], [], []
    new_cls = None
    for slot, (_, anchor, members) in enumerate(placed):
        tot = sum(int(sizes[p]) for p in members)
        acc = np.zeros(values.shape[1])
        for p in members:
            acc += values[p] * (int(sizes[p]) / tot)
        out_v.append(acc)
        out_s.append(tot)
        out_o.append(int(orig_index[anchor]))
        if cls_pos in members:
            new_cls = slot
    return pairs, np.array(out_v), np.array(out_s), np.array(out_o), new_cls
