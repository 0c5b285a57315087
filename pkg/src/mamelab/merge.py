"""Delta-informed token merging for bidirectional SSM encoders.

Pipeline for one merge layer:

1. per-token informativeness ``delta_hat = f(mean_c Δ_f, mean_c Δ_b)``
2. bipartite split of the non-class tokens by current position parity
3. score = similarity weight * delta weight, src x dst
4. every src picks its best dst; the r best src tokens merge into theirs
5. size-weighted averaging of each group, then token arrangement
6. the identical grouping is applied to the block output and to the residual
   stream before they are summed
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

try:
    from . import _match_kernel
except ImportError:  # pragma: no cover - numba missing
    _match_kernel = None

log = logging.getLogger(__name__)

STRATEGIES = ("iso_front", "iso_last", "dst_pos", "informativeness", "ord_front", "ord_mid")
INTEGRATIONS = ("max", "min", "avg", "sum")
SCORE_MODES = ("mame", "sim", "random")


class MergeError(ValueError):
    pass


@dataclass
class TokenSequence:
    """A batch of token sequences plus merge bookkeeping.

    values:     (B, N, D) tensor
    sizes:      (B, N) number of original tokens absorbed by each token
    orig_index: (B, N) original position of each token's representative
    cls_pos:    (B,) current position of the class token, or None
    owner:      (B, N0) current position holding each original token
    """

    values: Tensor
    sizes: np.ndarray
    orig_index: np.ndarray
    cls_pos: np.ndarray | None = None
    owner: np.ndarray | None = None

    def __post_init__(self):
        if self.owner is None:
            self.owner = self.orig_index.copy()

    @classmethod
    def initial(cls, values: Tensor, cls_pos: int | None = None) -> "TokenSequence":
        if not isinstance(values, Tensor):
            values = Tensor(values)
        if values.ndim == 2:
            values = nx.reshape(values, (1,) + values.shape)
        b, n, _ = values.shape
        idx = np.tile(np.arange(n, dtype=np.int64), (b, 1))
        cp = None if cls_pos is None else np.full(b, cls_pos, dtype=np.int64)
        return cls(values, np.ones((b, n), dtype=np.int64), idx, cp, idx.copy())

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: Tensor) -> "TokenSequence":
        return TokenSequence(values, self.sizes, self.orig_index, self.cls_pos, self.owner)

    def cls_of(self, b: int) -> int | None:
        return None if self.cls_pos is None else int(self.cls_pos[b])

    def members(self, b: int) -> list[tuple[int, ...]]:
        """Original indices held by each current token of sample ``b``."""
        return _groups_of(self.owner[b], self.length)


def _groups_of(slot: np.ndarray, n_out: int) -> list[tuple[int, ...]]:
    order = np.argsort(slot, kind="stable")
    cuts = np.cumsum(np.bincount(slot, minlength=n_out))[:-1]
    return [tuple(int(v) for v in g) for g in np.split(order, cuts)]


# ---------------------------------------------------------------------------
# scoring


def integrate_delta(delta_f, delta_b, f: str = "avg") -> np.ndarray:
    """Reduce directional step sizes (..., N, D_inner) to one value per token.

    Each direction is averaged over channels first, then the two per-token
    vectors are combined with ``f``.
    """
    df = delta_f.data if isinstance(delta_f, Tensor) else np.asarray(delta_f, dtype=np.float64)
    db = delta_b.data if isinstance(delta_b, Tensor) else np.asarray(delta_b, dtype=np.float64)
    if df.shape != db.shape:
        raise MergeError(f"shape mismatch: delta_f {df.shape} vs delta_b {db.shape}")
    mf = df.mean(axis=-1)
    mb = db.mean(axis=-1)
    if f == "avg":
        return (mf + mb) / 2.0
    if f == "sum":
        return mf + mb
    if f == "max":
        return np.maximum(mf, mb)
    if f == "min":
        return np.minimum(mf, mb)
    raise MergeError(f"unknown integration function {f!r}")


def similarity_weight(a, b) -> float:
    """(cos(a, b) + 1) / 2; a zero-norm vector counts as cosine 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        log.warning("zero-norm token in similarity_weight; using 0.5")
        return 0.5
    cos = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(0.0, 0.5 * (cos + 1.0)))


def similarity_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Pairwise similarity weights, rows = src tokens, cols = dst tokens."""
    src = np.asarray(src)
    dst = np.asarray(dst)
    ns = np.linalg.norm(src, axis=-1, keepdims=True)
    nd = np.linalg.norm(dst, axis=-1, keepdims=True)
    if np.any(ns == 0) or np.any(nd == 0):
        log.warning("zero-norm token in similarity_matrix; using 0.5 for its pairs")
    cos = (src / np.where(ns == 0, 1, ns)) @ (dst / np.where(nd == 0, 1, nd)).T
    return np.clip(0.5 * (cos + 1.0), 0.0, 1.0)


def delta_weight(delta_i, delta_j, tau: float):
    """exp(-mean(delta_i, delta_j) / tau)."""
    if not tau > 0:
        raise MergeError(f"tau must be positive, got {tau}")
    return np.exp(-(np.asarray(delta_i) + np.asarray(delta_j)) / (2.0 * tau))


def delta_weight_matrix(delta_src: np.ndarray, delta_dst: np.ndarray, tau: float) -> np.ndarray:
    return delta_weight(np.asarray(delta_src)[:, None], np.asarray(delta_dst)[None, :], tau)


def merge_score(w_sim, w_delta):
    return np.asarray(w_sim) * np.asarray(w_delta)


# ---------------------------------------------------------------------------
# matching


def bipartite_split(n: int, cls_pos: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Even current positions are sources, odd ones destinations; cls is in neither."""
    pos = np.arange(n)
    keep = pos != (-1 if cls_pos is None else cls_pos)
    return pos[(pos % 2 == 0) & keep], pos[(pos % 2 == 1) & keep]


def _match_sorted(score: np.ndarray, r: int, src_ok: np.ndarray, dst_ok: np.ndarray):
    """Core matcher on (B, S, D) scores whose rows and columns are in position order.

    Returns (src rows, dst cols), each (B, r), rows ascending.
    """
    n_src = src_ok.sum(axis=1)
    if r < 0:
        raise MergeError("r must be non-negative")
    if np.any(n_src < r):
        raise MergeError(f"reduction exceeds source set: r={r} > {int(n_src.min())}")
    b = score.shape[0]
    if r == 0:
        empty = np.zeros((b, 0), dtype=np.int64)
        return empty, empty
    if np.any(dst_ok.sum(axis=1) == 0):
        raise MergeError("reduction exceeds source set: no destination tokens")
    # first maximum along a position-ordered axis is the lowest position
    masked = score.copy()
    bad_b, bad_c = np.nonzero(~dst_ok)
    masked[bad_b, :, bad_c] = -np.inf
    best_col = np.argmax(masked, axis=2)
    best = np.take_along_axis(masked, best_col[..., None], axis=2)[..., 0]
    best = np.where(src_ok, best, -np.inf)
    rows = np.sort(np.argsort(-best, axis=1, kind="stable")[:, :r], axis=1)
    return rows, np.take_along_axis(best_col, rows, axis=1)


def bipartite_match(score, r: int, src_pos=None, dst_pos=None) -> list[tuple[int, int]]:
    """Pick r (src, dst) pairs from a src x dst score matrix.

    Every src row is matched to its highest-scoring dst; the r src tokens with
    the highest matched scores are kept. Ties go to the lower src position,
    then the lower dst position. Positions default to 0,2,4,... for rows and
    1,3,5,... for columns.
    """
    score = np.asarray(score, dtype=np.float64)
    n_src, n_dst = score.shape
    src_pos = np.arange(n_src) * 2 if src_pos is None else np.asarray(src_pos)
    dst_pos = np.arange(n_dst) * 2 + 1 if dst_pos is None else np.asarray(dst_pos)
    ro = np.argsort(src_pos, kind="stable")
    co = np.argsort(dst_pos, kind="stable")
    rows, cols = _match_sorted(score[np.ix_(ro, co)][None], r,
                               np.ones((1, n_src), bool), np.ones((1, n_dst), bool))
    return [(int(src_pos[ro[i]]), int(dst_pos[co[j]])) for i, j in zip(rows[0], cols[0])]


def split_masks(n: int, cls_pos: np.ndarray | None, batch: int) -> tuple[np.ndarray, np.ndarray]:
    """Validity of the even (src) and odd (dst) positions, (B, ceil(N/2)) and
    (B, N//2); only the class token is ever invalid."""
    src_ok = np.ones((batch, (n + 1) // 2), bool)
    dst_ok = np.ones((batch, n // 2), bool)
    if cls_pos is not None:
        rows = np.arange(batch)
        even = cls_pos % 2 == 0
        src_ok[rows[even], cls_pos[even] // 2] = False
        dst_ok[rows[~even], cls_pos[~even] // 2] = False
    return src_ok, dst_ok


def match_batch(score: np.ndarray, r: int, cls_pos: np.ndarray | None) -> np.ndarray:
    """Batched matching on (B, ceil(N/2), N//2) even x odd position scores.

    Returns (B, r, 2) integer (src, dst) positions, sorted by src.
    """
    b, ne, no = score.shape
    src_ok, dst_ok = split_masks(ne + no, cls_pos, b)
    rows, cols = _match_sorted(score, r, src_ok, dst_ok)
    return np.stack([2 * rows, 2 * cols + 1], axis=-1)


# ---------------------------------------------------------------------------
# grouping and arrangement


@dataclass
class MergeDecision:
    """One sample's merge at one layer.

    ``slot_of[p]`` is the output slot of current position ``p``; ``anchors``
    lists, per output slot, the current position whose slot the token takes.
    """

    pairs: list[tuple[int, int]]
    slot_of: np.ndarray
    anchors: np.ndarray
    groups: list[tuple[int, ...]]
    partition: list[tuple[int, ...]]
    strategy: str
    tau: float | None = None
    integration: str | None = None
    delta_hat: np.ndarray | None = None

    @property
    def r(self) -> int:
        return len(self.pairs)


@dataclass
class BatchPlan:
    """Batched grouping: (B, r, 2) pairs, (B, N) slot_of, (B, N') anchors."""

    pairs: np.ndarray
    slot_of: np.ndarray
    anchors: np.ndarray
    strategy: str

    @property
    def n_out(self) -> int:
        return self.anchors.shape[1]

    def is_identity(self) -> bool:
        return self.slot_of.shape[1] == self.n_out and bool(
            np.all(self.slot_of == np.arange(self.n_out)))

    def decision(self, b: int, members: Sequence[tuple[int, ...]] | None = None,
                 delta_hat=None, tau=None, integration=None) -> MergeDecision:
        n = self.slot_of.shape[1]
        groups = _groups_of(self.slot_of[b], self.n_out)
        if members is None:
            members = [(i,) for i in range(n)]
        partition = [members[g[0]] if len(g) == 1 else tuple(sorted(sum((members[p] for p in g), ())))
                     for g in groups]
        return MergeDecision(
            pairs=[(int(s), int(d)) for s, d in self.pairs[b]],
            slot_of=self.slot_of[b],
            anchors=self.anchors[b],
            groups=groups,
            partition=partition,
            strategy=self.strategy,
            tau=tau,
            integration=integration,
            delta_hat=None if delta_hat is None else np.asarray(delta_hat),
        )


def plan_batch(n: int, pairs: np.ndarray, strategy: str = "ord_front",
               delta_hat: np.ndarray | None = None) -> BatchPlan:
    """Group current positions by destination and order the groups, per sample."""
    if strategy not in STRATEGIES:
        raise MergeError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    pairs = np.asarray(pairs, dtype=np.int64)
    b, r = pairs.shape[:2]
    if r > 0:
        src, dst = pairs[..., 0], pairs[..., 1]
        s_sorted = np.sort(src, axis=1)
        if np.any(s_sorted[:, 1:] == s_sorted[:, :-1]):
            raise MergeError("source positions must be distinct")
        if np.any((src[:, :, None] == dst[:, None, :])):
            raise MergeError("a token cannot be both source and destination")
    pos = np.broadcast_to(np.arange(n), (b, n))
    bidx = np.broadcast_to(np.arange(b)[:, None], (b, n))
    root = np.array(pos)
    if r > 0:
        np.put_along_axis(root, pairs[..., 0], pairs[..., 1], axis=1)

    # members of each group in (second, position) order, groups in (sample, root) order
    if strategy == "informativeness":
        if delta_hat is None:
            raise MergeError("informativeness arrangement needs delta_hat")
        second = -np.asarray(delta_hat, dtype=np.float64).reshape(b, n)
        order = np.lexsort((pos.ravel(), second.ravel(), root.ravel(), bidx.ravel())) % n
    else:
        order = np.argsort(((bidx * n + root) * n + pos).ravel()) % n
    gid = (bidx * n + root).ravel()
    count = np.bincount(gid, minlength=b * n)
    start = np.cumsum(count) - count
    g = np.flatnonzero(count)
    n_out = n - r
    if len(g) != b * n_out:
        raise MergeError("all samples in a batch must reduce by the same r")
    c, s = count[g], start[g]
    roots = (g % n).reshape(b, n_out)
    merged = (c > 1).reshape(b, n_out)

    if strategy in ("dst_pos", "iso_front", "iso_last"):
        anchor = roots
    elif strategy == "ord_mid":
        anchor = order[s + (c - 1) // 2].reshape(b, n_out)
    else:  # ord_front, informativeness
        anchor = order[s].reshape(b, n_out)

    if strategy == "iso_front":
        key = np.where(merged, 0, n) + roots
    elif strategy == "iso_last":
        key = np.where(merged, n, 0) + roots
    else:
        key = anchor
    perm = np.argsort(key, axis=1, kind="stable")
    slot_of_root = np.zeros((b, n), dtype=np.int64)
    np.put_along_axis(slot_of_root, np.take_along_axis(roots, perm, axis=1),
                      np.broadcast_to(np.arange(n_out), (b, n_out)), axis=1)
    slot_of = np.take_along_axis(slot_of_root, root, axis=1)
    anchors = np.take_along_axis(anchor, perm, axis=1).astype(np.int64)
    return BatchPlan(pairs=pairs.reshape(b, r, 2), slot_of=slot_of, anchors=anchors, strategy=strategy)


def plan(n: int, pairs: Sequence[tuple[int, int]], strategy: str = "ord_front",
         delta_hat: np.ndarray | None = None, members: Sequence[tuple[int, ...]] | None = None,
         tau: float | None = None, integration: str | None = None) -> MergeDecision:
    """Single-sample :func:`plan_batch` returning a full decision record."""
    arr = np.asarray(list(pairs), dtype=np.int64).reshape(1, -1, 2)
    dh = None if delta_hat is None else np.asarray(delta_hat, dtype=np.float64).reshape(1, n)
    bp = plan_batch(n, arr, strategy, dh)
    return bp.decision(0, members, delta_hat=delta_hat, tau=tau, integration=integration)


def _as_plan(decisions) -> BatchPlan:
    if isinstance(decisions, BatchPlan):
        return decisions
    decisions = list(decisions)
    n_out = {len(d.anchors) for d in decisions}
    if len(n_out) != 1:
        raise MergeError("all samples in a batch must reduce by the same r")
    r = decisions[0].r
    return BatchPlan(
        pairs=np.array([d.pairs for d in decisions], dtype=np.int64).reshape(len(decisions), r, 2),
        slot_of=np.stack([d.slot_of for d in decisions]),
        anchors=np.stack([d.anchors for d in decisions]),
        strategy=decisions[0].strategy,
    )


def combine_matrices(seq: TokenSequence, decisions) -> np.ndarray:
    """Row-stochastic (B, N', N) matrices doing size-weighted group averages."""
    bp = _as_plan(decisions)
    b, n = seq.sizes.shape
    n_out = bp.n_out
    flat = (np.arange(b)[:, None] * n_out + bp.slot_of).ravel()
    sz = seq.sizes.astype(np.float64)
    tot = np.bincount(flat, weights=sz.ravel(), minlength=b * n_out).reshape(b, n_out)
    mats = np.zeros((b, n_out, n), dtype=seq.values.dtype)
    w = sz / np.take_along_axis(tot, bp.slot_of, axis=1)
    mats[np.arange(b)[:, None], bp.slot_of, np.arange(n)] = w
    return mats


def group_average(values: Tensor, slot_of: np.ndarray, weights: np.ndarray, n_out: int) -> Tensor:
    """out[b, slot_of[b, p]] += weights[b, p] * values[b, p]; the same map as
    multiplying by :func:`combine_matrices`, without building the matrix."""
    v = values.data
    w = weights.astype(v.dtype)
    out = np.zeros((v.shape[0], n_out, v.shape[2]), dtype=v.dtype)
    if _match_kernel is not None:
        _match_kernel.scatter_weighted(np.ascontiguousarray(v), slot_of, w, out)
    else:
        flat = (np.arange(v.shape[0])[:, None] * n_out + slot_of).ravel()
        np.add.at(out.reshape(-1, v.shape[2]), flat, (w[..., None] * v).reshape(-1, v.shape[2]))

    def vjp(g):
        return (w[..., None] * np.take_along_axis(g, slot_of[..., None], axis=1),)

    return nx._record(out, (values,), vjp)


def apply(seq: TokenSequence, decisions) -> TokenSequence:
    """Merge and arrange ``seq`` by a BatchPlan or a list of per-sample decisions."""
    bp = _as_plan(decisions)
    if bp.slot_of.shape != seq.sizes.shape:
        raise MergeError(f"plan for shape {bp.slot_of.shape} applied to a batch of {seq.sizes.shape}")
    if bp.is_identity():
        return seq
    b = seq.batch
    n_out = bp.n_out
    flat = (np.arange(b)[:, None] * n_out + bp.slot_of).ravel()
    sizes = np.bincount(flat, weights=seq.sizes.ravel(), minlength=b * n_out)
    sizes = sizes.reshape(b, n_out).astype(np.int64)
    weights = seq.sizes / np.take_along_axis(sizes, bp.slot_of, axis=1)
    values = group_average(seq.values, bp.slot_of, weights, n_out)
    orig = np.take_along_axis(seq.orig_index, bp.anchors, axis=1)
    cls_pos = None
    if seq.cls_pos is not None:
        cls_pos = bp.slot_of[np.arange(b), seq.cls_pos]
    owner = np.take_along_axis(bp.slot_of, seq.owner, axis=1)
    return TokenSequence(values, sizes, orig, cls_pos, owner)


def merge_tokens(seq: TokenSequence, pairs) -> TokenSequence:
    """Merge src tokens into their destinations; each group sits at its dst slot.

    ``pairs`` is one pair list, or one list per sample for a batch.
    """
    per_sample = _per_sample(pairs, seq.batch)
    arr = np.array(per_sample, dtype=np.int64).reshape(seq.batch, -1, 2)
    return apply(seq, plan_batch(seq.length, arr, "dst_pos"))


def arrange(seq: TokenSequence, decision, strategy: str) -> TokenSequence:
    """Merge ``seq`` (the pre-merge sequence) with the decision's pairs and place
    the resulting tokens according to ``strategy``."""
    decisions = decision if isinstance(decision, (list, tuple)) else [decision]
    arr = np.array([d.pairs for d in decisions], dtype=np.int64).reshape(len(decisions), -1, 2)
    dh = None
    if strategy == "informativeness":
        dh = np.stack([np.asarray(d.delta_hat, dtype=np.float64) for d in decisions])
    return apply(seq, plan_batch(seq.length, arr, strategy, dh))


def residual_merge(t_prev: TokenSequence, decision) -> TokenSequence:
    """Apply a layer's grouping (computed on the block output) to the residual stream."""
    if isinstance(decision, MergeDecision):
        decision = [decision]
    return apply(t_prev, decision)


def _per_sample(pairs, batch: int):
    if batch == 1 and (len(pairs) == 0 or isinstance(pairs[0][0], (int, np.integer))):
        return [list(pairs)]
    if len(pairs) != batch:
        raise MergeError("need one pair list per sample")
    return [list(p) for p in pairs]


# ---------------------------------------------------------------------------
# the merge layer


@dataclass
class MergeSpec:
    """What to do at one merge layer."""

    r: int
    tau: float = 10.0
    f: str = "avg"
    strategy: str = "ord_front"
    score: str = "mame"

    def __post_init__(self):
        if self.r < 0:
            raise MergeError("r must be non-negative")
        if not self.tau > 0:
            raise MergeError("tau must be positive")
        if self.f not in INTEGRATIONS:
            raise MergeError(f"unknown integration function {self.f!r}")
        if self.strategy not in STRATEGIES:
            raise MergeError(f"unknown strategy {self.strategy!r}")
        if self.score not in SCORE_MODES:
            raise MergeError(f"unknown score mode {self.score!r}")

    def to_dict(self) -> dict:
        return {"r": self.r, "tau": self.tau, "f": self.f, "strategy": self.strategy, "score": self.score}


@dataclass
class LayerTrace:
    """Everything one merge layer decided for one sample."""

    layer: int
    delta_hat: np.ndarray
    w_sim: np.ndarray
    w_delta: np.ndarray
    score: np.ndarray
    src_pos: np.ndarray
    dst_pos: np.ndarray
    decision: MergeDecision
    orig_index_before: np.ndarray
    orig_index_after: np.ndarray
    spec: MergeSpec


def _cosine_parts(t_star: np.ndarray, delta_hat: np.ndarray, tau: float):
    """Raw even x odd dot products, per-token inverse norms and delta factors."""
    if not tau > 0:
        raise MergeError(f"tau must be positive, got {tau}")
    t = np.asarray(t_star, dtype=np.float64)
    norm = np.sqrt(np.einsum("bnd,bnd->bn", t, t))
    if np.any(norm == 0):
        log.warning("zero-norm token in similarity_matrix; using 0.5 for its pairs")
        norm[norm == 0] = np.inf  # zero cosine, weight 0.5
    inv = 1.0 / norm
    dots = t[:, 0::2] @ np.swapaxes(t[:, 1::2], -1, -2)
    # exp(-(a + b) / 2tau) factored into per-token terms
    e = np.exp(-np.asarray(delta_hat, dtype=np.float64) / (2.0 * tau))
    return dots, inv, e


def batch_scores(t_star: np.ndarray, delta_hat: np.ndarray, spec: MergeSpec,
                 rng: np.random.Generator | None = None):
    """Similarity, delta and merge scores between even (rows) and odd (columns)
    positions, each (B, ceil(N/2), N//2). The class token is not excluded here."""
    w_sim, inv, e = _cosine_parts(t_star, delta_hat, spec.tau)
    w_sim *= inv[:, 0::2, None]
    w_sim *= inv[:, None, 1::2]
    w_sim += 1.0
    w_sim *= 0.5
    np.clip(w_sim, 0.0, 1.0, out=w_sim)
    w_delta = e[:, 0::2, None] * e[:, None, 1::2]
    if spec.score == "mame":
        score = w_sim * w_delta
    elif spec.score == "sim":
        score = w_sim
    else:
        if rng is None:
            raise MergeError("random scoring needs an rng")
        score = rng.uniform(0.0, 1.0, size=w_sim.shape)
    return w_sim, w_delta, score


def score_and_plan(t_star: np.ndarray, delta_hat: np.ndarray, spec: MergeSpec, cls_pos: np.ndarray | None,
                   rng: np.random.Generator | None = None, fused: bool = True) -> BatchPlan:
    """:func:`batch_scores` then :func:`match_and_plan`. The compiled path builds
    each score while matching instead of materializing the score arrays."""
    if not fused or _match_kernel is None or spec.r == 0 or spec.score == "random":
        score = batch_scores(t_star, delta_hat, spec, rng)[2]
        return match_and_plan(score, spec.r, cls_pos, spec.strategy, delta_hat, fused=fused)
    dots, inv, e = _cosine_parts(t_star, delta_hat, spec.tau)
    b, ne, no = dots.shape
    src_ok, dst_ok, dh = _fused_inputs(b, ne + no, spec.r, cls_pos, spec.strategy, delta_hat)
    pairs, slot_of, anchors = _match_kernel.match_plan_cosine(
        dots, inv, e, spec.score == "mame", int(spec.r), src_ok, dst_ok, STRATEGIES.index(spec.strategy), dh)
    return BatchPlan(pairs=pairs, slot_of=slot_of, anchors=anchors, strategy=spec.strategy)


def _src_dst_block(mat: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return mat[np.ix_(src // 2, dst // 2)]


def decide(t_star: np.ndarray, delta_hat: np.ndarray, spec: MergeSpec, cls_pos: int | None,
           members=None, rng: np.random.Generator | None = None):
    """Score one sample and return (decision, w_sim, w_delta, score, src, dst)."""
    n = t_star.shape[0]
    src, dst = bipartite_split(n, cls_pos)
    w_sim, w_delta, score = batch_scores(t_star[None], np.asarray(delta_hat)[None], spec, rng)
    cp = None if cls_pos is None else np.array([cls_pos])
    bp = plan_batch(n, match_batch(score, spec.r, cp), spec.strategy, np.asarray(delta_hat)[None])
    decision = bp.decision(0, members, delta_hat=delta_hat, tau=spec.tau, integration=spec.f)
    return (decision, _src_dst_block(w_sim[0], src, dst), _src_dst_block(w_delta[0], src, dst),
            _src_dst_block(score[0], src, dst), src, dst)


def _fused_inputs(b: int, n: int, r: int, cls_pos, strategy: str, delta_hat):
    """Validity masks and delta_hat for the compiled loops, with the same
    checks the numpy path makes."""
    if strategy not in STRATEGIES:
        raise MergeError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    src_ok, dst_ok = split_masks(n, cls_pos, b)
    if r < 0:
        raise MergeError("r must be non-negative")
    n_src = src_ok.sum(axis=1)
    if np.any(n_src < r):
        raise MergeError(f"reduction exceeds source set: r={r} > {int(n_src.min())}")
    if np.any(dst_ok.sum(axis=1) == 0):
        raise MergeError("reduction exceeds source set: no destination tokens")
    if strategy == "informativeness":
        if delta_hat is None:
            raise MergeError("informativeness arrangement needs delta_hat")
        dh = np.ascontiguousarray(delta_hat, dtype=np.float64).reshape(b, n)
    else:
        dh = np.zeros((b, n))
    return src_ok, dst_ok, dh


def match_and_plan(score: np.ndarray, r: int, cls_pos: np.ndarray | None, strategy: str = "ord_front",
                   delta_hat: np.ndarray | None = None, fused: bool = True) -> BatchPlan:
    """:func:`match_batch` then :func:`plan_batch`, through the compiled loop
    when available (same result, fewer passes over the batch)."""
    if not fused or _match_kernel is None or r == 0:
        return plan_batch(score.shape[1] + score.shape[2], match_batch(score, r, cls_pos), strategy, delta_hat)
    b, ne, no = score.shape
    src_ok, dst_ok, dh = _fused_inputs(b, ne + no, r, cls_pos, strategy, delta_hat)
    pairs, slot_of, anchors = _match_kernel.match_plan(np.ascontiguousarray(score, dtype=np.float64), int(r),
                                                       src_ok, dst_ok, STRATEGIES.index(strategy), dh)
    return BatchPlan(pairs=pairs, slot_of=slot_of, anchors=anchors, strategy=strategy)


def mame_layer(t_prev: TokenSequence, delta_f, delta_b, t_star: Tensor, spec: MergeSpec,
               layer: int = -1, rng: np.random.Generator | None = None,
               collect_trace: bool = False):
    """Merge r tokens after an SSM block.

    Scores come from the block output ``t_star`` (no gradient flows through
    the decision). The same grouping is applied to ``t_star`` and to the
    residual input ``t_prev``; their sum is the layer output. See
    :func:`residual_merge` for applying a decision to one stream alone.

    Returns ``(t_next, traces)`` where ``traces`` has one LayerTrace per sample
    when ``collect_trace`` is set, else None.
    """
    b, n = t_prev.batch, t_prev.length
    dh = integrate_delta(delta_f, delta_b, spec.f)
    if spec.r == 0:
        t_next = t_prev.with_values(nx.add(t_star, t_prev.values))
        if not collect_trace:
            return t_next, None
        w_sim = w_delta = score = np.zeros((b, (n + 1) // 2, n // 2))
        bp = plan_batch(n, np.zeros((b, 0, 2), dtype=np.int64), spec.strategy, dh)
    else:
        if collect_trace:
            w_sim, w_delta, score = batch_scores(t_star.data, dh, spec, rng)
            bp = match_and_plan(score, spec.r, t_prev.cls_pos, spec.strategy, dh)
        else:
            bp = score_and_plan(t_star.data, dh, spec, t_prev.cls_pos, rng)
        # group averaging is linear, so merging the sum equals summing the
        # separately merged block output and residual
        t_next = apply(t_prev.with_values(nx.add(t_star, t_prev.values)), bp)
    if not collect_trace:
        return t_next, None

    traces = []
    for i in range(b):
        src, dst = bipartite_split(n, t_prev.cls_of(i))
        d = bp.decision(i, t_prev.members(i), delta_hat=dh[i], tau=spec.tau, integration=spec.f)
        blocks = [_src_dst_block(m[i], src, dst) for m in (w_sim, w_delta, score)]
        traces.append(LayerTrace(layer, dh[i], *blocks, src, dst, d,
                                 t_prev.orig_index[i].copy(), t_next.orig_index[i].copy(), spec))
    return t_next, traces


# ---------------------------------------------------------------------------
# serialization


TRACE_FORMAT_VERSION = 1


def trace_to_dict(traces: Sequence[LayerTrace], grid_side: int, cls_index: int | None) -> dict:
    """One sample's per-layer traces as plain JSON-able data."""
    layers = []
    for t in traces:
        d = t.decision
        layers.append({
            "layer": t.layer,
            "r": t.spec.r,
            "tau": t.spec.tau,
            "f": t.spec.f,
            "strategy": t.spec.strategy,
            "score_mode": t.spec.score,
            "delta_hat": [float(v) for v in t.delta_hat],
            "orig_index_before": [int(v) for v in t.orig_index_before],
            "orig_index_after": [int(v) for v in t.orig_index_after],
            "pairs": [[int(s), int(dd)] for s, dd in d.pairs],
            "partition": [[int(v) for v in g] for g in d.partition],
        })
    return {
        "format": "mame-trace",
        "version": TRACE_FORMAT_VERSION,
        "grid_side": grid_side,
        "cls_index": cls_index,
        "layers": layers,
    }


def save_trace(path, traces: Sequence[LayerTrace], grid_side: int, cls_index: int | None) -> None:
    with open(path, "w") as fh:
        json.dump(trace_to_dict(traces, grid_side, cls_index), fh, indent=1)


def load_trace(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != "mame-trace":
        raise ValueError(f"{path}: not a merge trace file")
    return data
