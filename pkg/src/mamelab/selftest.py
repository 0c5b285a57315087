"""Quick in-process oracle checks behind ``mamelab selftest``.

Each check compares a fast path against an independent reference from
:mod:`mamelab.oracles` on a small random workload and returns
``(name, passed, detail)``.
"""

from __future__ import annotations

import numpy as np

from . import merge, oracles, ssm
from . import numerics as nx
from .model import MergeSchedule, Model, ModelConfig, forward


def check_discretize(rng) -> tuple[str, bool, str]:
    A = -np.exp(rng.uniform(np.log(0.1), np.log(1.5), 64))
    B = rng.normal(size=64)
    d = rng.uniform(1e-4, 0.02, 64)
    ea, eb = oracles.euler_hold(A, B, d)
    za, zb = ssm.discretize(A, B, d)
    err = max(np.max(np.abs(za - ea) / np.abs(ea)), np.max(np.abs(zb - eb) / np.abs(eb)))
    return "zoh vs euler", bool(err < 1e-6), f"max rel err {err:.2e}"


def check_scan(rng) -> tuple[str, bool, str]:
    worst = 0.0
    for _ in range(5):
        n, di, s = 16, 4, 3
        x = rng.normal(size=(n, di))
        dl = rng.uniform(0.01, 1.0, (n, di))
        A = -rng.uniform(0.1, 4.0, (di, s))
        Bm, Cm = rng.normal(size=(n, s)), rng.normal(size=(n, s))
        y = ssm.scan_kernel(*(nx.Tensor(v) for v in (x, dl, A, Bm, Cm))).data
        worst = max(worst, float(np.max(np.abs(y - oracles.naive_scan(x, dl, A, Bm, Cm)))))
    return "scan vs naive recurrence", worst < 1e-10, f"max abs err {worst:.2e}"


def check_matching(rng) -> tuple[str, bool, str]:
    bad = total = 0
    for _ in range(100):
        ns, nd = rng.integers(1, 7, size=2)
        score = np.round(rng.uniform(size=(ns, nd)), 1)  # rounding forces ties
        sp, dp = np.arange(ns) * 2, np.arange(nd) * 2 + 1
        for r in range(ns + 1):
            total += 1
            bad += merge.bipartite_match(score, r, sp, dp) != oracles.exhaustive_match(score, r, sp, dp)
    return "matching vs exhaustive", bad == 0, f"{total - bad}/{total} equal"


def check_merge_layer(rng) -> tuple[str, bool, str]:
    bad = 0
    for i in range(30):
        n, cls = int(rng.integers(4, 12)), None if i % 2 else 0
        v = rng.normal(size=(n, 3))
        df, db = rng.uniform(0, 2, (n, 4)), rng.uniform(0, 2, (n, 4))
        strategy = merge.STRATEGIES[i % len(merge.STRATEGIES)]
        n_src = len([p for p in range(0, n, 2) if p != cls])
        r = int(rng.integers(0, n_src + 1))
        seq = merge.TokenSequence.initial(nx.Tensor(np.zeros((n, 3))), cls)
        spec = merge.MergeSpec(r, tau=0.5, strategy=strategy)
        out, _ = merge.mame_layer(seq, nx.Tensor(df[None]), nx.Tensor(db[None]), nx.Tensor(v[None]), spec)
        _, rv, rs, ro, _ = oracles.reference_merge(v, seq.sizes[0], seq.orig_index[0], cls, df, db, r, 0.5,
                                                   strategy=strategy)
        ok = np.allclose(out.values.data[0], rv, atol=1e-12) and np.array_equal(out.sizes[0], rs)
        bad += not (ok and np.array_equal(out.orig_index[0], ro))
    return "merge layer vs reference", bad == 0, f"{30 - bad}/30 equal"


def check_gradient(rng) -> tuple[str, bool, str]:
    cfg = ModelConfig(depth=4, embed_dim=8, expand=2, state_dim=3, grid_side=4, raw_dim=5, n_classes=3,
                      dt_rank=2, dtype="f64", seed=int(rng.integers(1 << 30)))
    model = Model(cfg)
    grids = rng.normal(size=(2, 4, 4, 5))
    labels = np.array([0, 2])
    sched = MergeSchedule.uniform([1, 2], 2)

    def loss():
        return nx.cross_entropy(forward(model, grids, sched).logits, labels).item()

    with nx.GradTape() as tape:
        out = nx.cross_entropy(forward(model, grids, sched).logits, labels)
    grads = nx.backward(tape, out)
    worst = 0.0
    params = list(model.parameters().values())
    for _ in range(10):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p.data[idx]
        eps = 1e-6
        p.data[idx] = old + eps
        up = loss()
        p.data[idx] = old - eps
        dn = loss()
        p.data[idx] = old
        fd = (up - dn) / (2 * eps)
        an = grads[p][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return "model gradient vs finite differences", worst < 1e-4, f"max rel err {worst:.2e}"


CHECKS = (check_discretize, check_scan, check_matching, check_merge_layer, check_gradient)


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    return [check(rng) for check in CHECKS]
