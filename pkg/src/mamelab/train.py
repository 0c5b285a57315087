"""Training, evaluation and ablation sweeps for the toy classifier."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .bench import estimate_flops, measure_throughput
from .data import Split
from .model import MergeSchedule, Model, forward, merge_layers, save_checkpoint

log = logging.getLogger(__name__)

OPTIMIZERS = ("adamw", "sgd")
SWEEP_AXES = ("tau", "r", "layers", "strategy", "f")


@dataclass
class TrainConfig:
    epochs: int = 12
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup_epochs: float = 1.0
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adamw"
    schedule: str = "cosine"
    momentum: float = 0.9
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule != "cosine":
            raise ValueError("only the cosine schedule is implemented")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(cfg: TrainConfig, step: int, total: int, steps_per_epoch: int) -> float:
    """Linear warmup, then cosine decay to zero."""
    warm = int(round(cfg.warmup_epochs * steps_per_epoch))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    frac = (step - warm) / max(1, total - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))


class Optimizer:
    """AdamW (decoupled decay) or SGD with momentum over a fixed parameter list."""

    def __init__(self, params: list[nx.Tensor], cfg: TrainConfig, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.cfg = cfg
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params] if cfg.optimizer == "adamw" else None
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        wd = self.cfg.weight_decay
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.cfg.optimizer == "adamw":
                self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
                self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
                mh = self.m[i] / (1 - self.b1 ** self.t)
                vh = self.v[i] / (1 - self.b2 ** self.t)
                upd = mh / (np.sqrt(vh) + self.eps) + wd * p.data
            else:
                self.m[i] = self.cfg.momentum * self.m[i] + g + wd * p.data
                upd = self.m[i]
            p.data = (p.data - lr * upd).astype(p.dtype)


def _shard_grads(model: Model, params, grids, labels, schedule, seed):
    with nx.GradTape() as tape:
        res = forward(model, grids, schedule, seed=seed)
        loss = nx.cross_entropy(res.logits, labels)
    g = nx.backward(tape, loss)
    grads = [g.get(p) if g.get(p) is not None else np.zeros_like(p.data) for p in params]
    acc = float((res.logits.data.argmax(-1) == labels).mean())
    return loss.item(), acc, grads


def loss_and_grads(model: Model, grids, labels, schedule=None, seed: int = 0, workers: int = 1,
                   pool: ThreadPoolExecutor | None = None):
    """Mean cross-entropy and its gradient for one batch.

    With ``workers > 1`` the batch is cut into contiguous shards whose
    gradients are combined in shard order, so the result does not depend on
    thread timing.
    """
    params = list(model.parameters().values())
    n = len(labels)
    k = min(workers, n)
    if k <= 1:
        loss, acc, grads = _shard_grads(model, params, grids, labels, schedule, seed)
        return loss, acc, grads
    cuts = np.linspace(0, n, k + 1).astype(int)
    jobs = [(grids[a:b], labels[a:b], seed + a) for a, b in zip(cuts[:-1], cuts[1:])]
    own = pool is None
    pool = pool or ThreadPoolExecutor(max_workers=k)
    try:
        results = list(pool.map(lambda j: _shard_grads(model, params, j[0], j[1], schedule, j[2]), jobs))
    finally:
        if own:
            pool.shutdown()
    weights = np.diff(cuts) / n
    loss = sum(w * r[0] for w, r in zip(weights, results))
    acc = sum(w * r[1] for w, r in zip(weights, results))
    grads = [sum(w * r[2][i] for w, r in zip(weights, results)) for i in range(len(params))]
    return loss, acc, grads


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["epoch", "split", "loss", "acc"], lineterminator="\n")
        w.writeheader()
        for row in self.history:
            w.writerow(row)
        return buf.getvalue()

    def last(self, split: str) -> dict:
        return [h for h in self.history if h["split"] == split][-1]


def evaluate_split(model: Model, split: Split, schedule: MergeSchedule | None = None,
                   batch_size: int = 256, seed: int = 0) -> tuple[float, float]:
    """(mean loss, top-1 accuracy) without recording gradients."""
    if len(split) == 0:
        raise ValueError("empty split")
    tot_loss = 0.0
    correct = 0
    for s in range(0, len(split), batch_size):
        g, y = split.grids[s:s + batch_size], split.labels[s:s + batch_size]
        res = forward(model, g, schedule, seed=seed + s)
        tot_loss += nx.cross_entropy(res.logits, y).item() * len(y)
        correct += int((res.logits.data.argmax(-1) == y).sum())
    return tot_loss / len(split), correct / len(split)


def evaluate(model: Model, split: Split, schedule: MergeSchedule | None = None, seed: int = 0) -> float:
    """Top-1 accuracy of ``model`` on ``split`` with ``schedule`` active."""
    return evaluate_split(model, split, schedule, seed=seed)[1]


def train(model: Model, train_split: Split, cfg: TrainConfig, val_split: Split | None = None,
          schedule: MergeSchedule | None = None, checkpoint: str | None = None,
          metrics_path: str | None = None) -> TrainResult:
    """Train in place; logs one train row (and one val row) per epoch."""
    if len(train_split) == 0:
        raise ValueError("training data is empty")
    params = list(model.parameters().values())
    opt = Optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train_split) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    result = TrainResult(model)
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_split))
            seen = 0
            loss_sum = acc_sum = 0.0
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                loss, acc, grads = loss_and_grads(model, train_split.grids[idx], train_split.labels[idx],
                                                  schedule, seed=cfg.seed * 1_000_003 + step,
                                                  workers=cfg.workers, pool=pool)
                if not math.isfinite(loss):
                    raise FloatingPointError(f"nonfinite loss at epoch {epoch} step {step}")
                opt.step(grads, lr_at(cfg, step, total, steps_per_epoch))
                step += 1
                loss_sum += loss * len(idx)
                acc_sum += acc * len(idx)
                seen += len(idx)
            result.history.append({"epoch": epoch, "split": "train", "loss": loss_sum / seen,
                                   "acc": acc_sum / seen})
            if val_split is not None and len(val_split):
                vl, va = evaluate_split(model, val_split, schedule)
                result.history.append({"epoch": epoch, "split": "val", "loss": vl, "acc": va})
            log.info("epoch %d: %s", epoch, result.history[-1])
    finally:
        if pool is not None:
            pool.shutdown()
    if checkpoint:
        save_checkpoint(checkpoint, model, {"train": cfg.to_dict(),
                                            "schedule": (schedule or MergeSchedule.empty()).to_dict()})
    if metrics_path:
        with open(metrics_path, "w") as fh:
            fh.write(result.metrics_csv())
    return result


def fine_tune(model: Model, train_split: Split, cfg: TrainConfig, schedule: MergeSchedule,
              val_split: Split | None = None, fraction: float = 0.2, **kw) -> TrainResult:
    """Continue training with ``schedule`` active for ``fraction`` of the epochs."""
    epochs = max(1, math.ceil(fraction * cfg.epochs))
    ft = TrainConfig(**{**cfg.to_dict(), "epochs": epochs, "warmup_epochs": 0.0})
    return train(model, train_split, ft, val_split, schedule, **kw)


# ---------------------------------------------------------------------------
# sweeps


def parse_layers(value: str, depth: int) -> list[int]:
    """A placement preset (shallow / standard / even / deep) or layers joined by ':' or '-'."""
    v = value.strip()
    if v in ("shallow", "standard", "even", "deep"):
        return merge_layers(depth, "standard" if v == "even" else v)
    return [int(x) for x in v.replace("-", ":").split(":") if x]


def schedule_for(axis: str, value, base: MergeSchedule, depth: int) -> MergeSchedule:
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if axis == "layers":
        layers = parse_layers(str(value), depth)
        specs = list(base.layers.values())
        if len(specs) != len(layers):
            specs = [specs[0]] * len(layers)
        return MergeSchedule(dict(zip(layers, specs)))
    if axis in ("tau",):
        return base.replace(tau=float(value))
    if axis == "r":
        return base.replace(r=int(value))
    return base.replace(**{axis: str(value)})


@dataclass
class SweepRow:
    axis: str
    value: str
    acc: float
    gflops: float
    images_per_s: float | None


def sweep(model: Model, split: Split, axis: str, values, base: MergeSchedule, measure: bool = False,
          bench_batch: int = 64, seed: int = 0) -> list[SweepRow]:
    """Evaluate ``model`` once per value of one schedule axis."""
    rows = []
    for v in values:
        sched = schedule_for(axis, v, base, model.cfg.depth)
        acc = evaluate(model, split, sched, seed=seed)
        fl = estimate_flops(model.cfg, sched).total / 1e9
        ips = None
        if measure:
            ips = measure_throughput(model, split.grids[:bench_batch], sched, reps=3).images_per_s
        rows.append(SweepRow(axis, str(v), acc, fl, ips))
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "acc", "gflops", "images_per_s"])
    for r in rows:
        w.writerow([r.axis, r.value, f"{r.acc:.4f}", f"{r.gflops:.6f}",
                    "" if r.images_per_s is None else f"{r.images_per_s:.1f}"])
    return buf.getvalue()


def sweep_text(rows: list[SweepRow]) -> str:
    table = [("axis", "value", "acc", "GFLOPs", "img/s")]
    table += [(r.axis, r.value, f"{r.acc:.4f}", f"{r.gflops:.6f}",
               "-" if r.images_per_s is None else f"{r.images_per_s:.1f}") for r in rows]
    widths = [max(len(t[i]) for t in table) for i in range(5)]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(t, widths)) for t in table)


def select_tau(model: Model, split: Split, base: MergeSchedule, grid=(10.0, 1.0, 0.1, 0.01),
               seed: int = 0) -> tuple[float, list[tuple[float, float]]]:
    """Pick the tau with the lowest loss on ``split`` with ``base`` merging active.

    Use training data here, never the split being reported. Ties keep the
    earlier grid entry. Returns (tau, [(tau, loss), ...]).
    """
    losses = [(float(t), evaluate_split(model, split, base.replace(tau=float(t)), seed=seed)[0]) for t in grid]
    best = min(losses, key=lambda tl: tl[1])
    return best[0], losses
