"""Analytical FLOPs estimates and a wall-clock throughput harness.

FLOPs follow the fvcore convention: one fused multiply-add counts as one
FLOP. The selective scan is charged ``SCAN_FLOPS_PER_ELEMENT`` per
(token, channel, state) element and per direction.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .model import MergeSchedule, Model, ModelConfig, forward

SCAN_FLOPS_PER_ELEMENT = 9
FLOPS_PER_MAC = 1


def scan_flops(n_tokens: int, d_inner: int, d_state: int) -> int:
    """Cost of one scan direction: discretize, recurrence and readout."""
    return SCAN_FLOPS_PER_ELEMENT * n_tokens * d_inner * d_state


def block_flops(cfg: ModelConfig, n: int) -> int:
    d, di, s, rk = cfg.embed_dim, cfg.inner_dim, cfg.state_dim, cfg.dt_rank
    in_proj = n * d * di
    # B and C projections plus the low-rank step-size projection, per direction
    per_dir = n * di * 2 * s + n * (di * rk + rk * di) + scan_flops(n, di, s)
    out_proj = n * di * d
    return FLOPS_PER_MAC * (in_proj + out_proj) + FLOPS_PER_MAC * 2 * per_dir


def merge_flops(cfg: ModelConfig, n: int) -> int:
    """Similarity GEMM between the two bipartite halves."""
    return FLOPS_PER_MAC * ((n + 1) // 2) * (n // 2) * cfg.embed_dim


@dataclass
class LayerFlops:
    layer: int
    tokens_in: int
    tokens_out: int
    block: int
    merge: int

    @property
    def total(self) -> int:
        return self.block + self.merge


@dataclass
class FlopsReport:
    layers: list[LayerFlops]
    embed: int
    head: int
    baseline_total: int
    schedule: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.embed + self.head + sum(l.total for l in self.layers)

    @property
    def ratio(self) -> float:
        return self.total / self.baseline_total

    @property
    def speedup(self) -> float:
        return self.baseline_total / self.total

    def to_text(self) -> str:
        rows = [("layer", "tokens_in", "tokens_out", "block_GFLOPs", "merge_GFLOPs")]
        rows += [(str(l.layer), str(l.tokens_in), str(l.tokens_out), f"{l.block / 1e9:.4f}",
                  f"{l.merge / 1e9:.4f}") for l in self.layers]
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        lines.append(f"embed {self.embed / 1e9:.4f} G   head {self.head / 1e9:.6f} G")
        lines.append(f"total {self.total / 1e9:.4f} G   baseline {self.baseline_total / 1e9:.4f} G   "
                     f"ratio {self.ratio:.4f}   speedup x{self.speedup:.3f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "tokens_in", "tokens_out", "block_flops", "merge_flops"])
        for l in self.layers:
            w.writerow([l.layer, l.tokens_in, l.tokens_out, l.block, l.merge])
        w.writerow(["total", "", "", self.total, ""])
        w.writerow(["baseline", "", "", self.baseline_total, ""])
        return buf.getvalue()


def _layers(cfg: ModelConfig, schedule: MergeSchedule) -> list[LayerFlops]:
    n = cfg.n_tokens
    out = []
    for i in range(cfg.depth):
        spec = schedule.layers.get(i)
        r = spec.r if spec is not None else 0
        merge = merge_flops(cfg, n) if r > 0 else 0
        out.append(LayerFlops(i, n, n - r, block_flops(cfg, n), merge))
        n -= r
    return out


def estimate_flops(cfg: ModelConfig, schedule: MergeSchedule | None = None) -> FlopsReport:
    schedule = schedule or MergeSchedule.empty()
    schedule.validate(cfg, runnable=False)
    embed = FLOPS_PER_MAC * cfg.n_patches * cfg.raw_dim * cfg.embed_dim
    head = FLOPS_PER_MAC * cfg.embed_dim * cfg.n_classes
    base = embed + head + sum(l.total for l in _layers(cfg, MergeSchedule.empty()))
    return FlopsReport(_layers(cfg, schedule), embed, head, base, schedule.to_dict())


@dataclass
class Throughput:
    images_per_s: float
    rep_images_per_s: list[float]
    batch: int
    threads: int | None
    pools: list[dict]


def measure_throughput(model: Model, grids: np.ndarray, schedule: MergeSchedule | None = None,
                       warmup: int = 1, reps: int = 5, threads: int | None = 1) -> Throughput:
    """Median images/s over ``reps`` timed forward passes of the whole batch."""
    if reps < 3:
        raise ValueError("reps must be >= 3")
    with threadpool_limits(limits=threads):
        pools = [{k: p.get(k) for k in ("internal_api", "num_threads")} for p in threadpool_info()]
        for _ in range(warmup):
            forward(model, grids, schedule)
        rates = []
        for _ in range(reps):
            t0 = time.perf_counter()
            forward(model, grids, schedule)
            rates.append(len(grids) / (time.perf_counter() - t0))
    return Throughput(statistics.median(rates), rates, len(grids), threads, pools)


@dataclass
class Comparison:
    baseline: Throughput
    candidate: Throughput
    speedup: float  # median of per-pair rate ratios
    pair_ratios: list[float]


def compare_throughput(model: Model, grids: np.ndarray, candidate: MergeSchedule | None,
                       baseline: MergeSchedule | None = None, warmup: int = 1, reps: int = 15,
                       threads: int | None = 1, candidate_grids: np.ndarray | None = None) -> Comparison:
    """Time ``baseline`` and ``candidate`` in alternating passes.

    Each rep runs one pass of each, back to back, so slow drifts in machine
    load hit both sides of a pair alike. The speedup is the median of the
    per-pair ratios of images/s. ``candidate_grids`` times the candidate on
    a different batch (e.g. a larger one).
    """
    if reps < 3:
        raise ValueError("reps must be >= 3")
    cand_grids = grids if candidate_grids is None else candidate_grids
    sides = ((grids, baseline), (cand_grids, candidate))
    with threadpool_limits(limits=threads):
        pools = [{k: p.get(k) for k in ("internal_api", "num_threads")} for p in threadpool_info()]
        for _ in range(warmup):
            for g, sched in sides:
                forward(model, g, sched)
        rates = ([], [])
        for i in range(reps):
            # alternate which side goes first
            for side in ((0, 1) if i % 2 == 0 else (1, 0)):
                g, sched = sides[side]
                t0 = time.perf_counter()
                forward(model, g, sched)
                rates[side].append(len(g) / (time.perf_counter() - t0))
    ra, rb = rates
    ratios = [b / a for a, b in zip(ra, rb)]
    return Comparison(Throughput(statistics.median(ra), ra, len(grids), threads, pools),
                      Throughput(statistics.median(rb), rb, len(cand_grids), threads, pools),
                      statistics.median(ratios), ratios)
