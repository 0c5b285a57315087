"""Command-line entry point: ``mamelab <subcommand> [options]``.

Settings come from built-in defaults, then an optional JSON ``--config``
file, then command-line flags, in that order. The fully resolved config is
printed to stderr as JSON before any work starts. Exit codes: 0 success,
1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields

from threadpoolctl import threadpool_limits

from . import data as datamod
from . import merge, viz
from .bench import compare_throughput, estimate_flops
from .model import (MergeSchedule, Model, ModelConfig, forward, load_checkpoint, merge_layers,
                    vim_tiny_config)
from .train import SWEEP_AXES, TrainConfig, evaluate, fine_tune, sweep, sweep_csv, sweep_text, train

log = logging.getLogger("mamelab")


class UsageError(Exception):
    pass


@dataclass
class MergeConfig:
    layers: list[int] | str = "standard"
    r: int | list[int] = 0
    tau: float = 10.0
    f: str = "avg"
    strategy: str = "ord_front"
    score: str = "mame"

    def schedule(self, depth: int) -> MergeSchedule:
        layers = self.layers
        if isinstance(layers, str):
            layers = merge_layers(depth, layers)
        sched = MergeSchedule.uniform(layers, self.r, self.tau, self.f, self.strategy, self.score)
        if sched.total_reduction() == 0:
            return MergeSchedule.empty()
        return sched


@dataclass
class RunConfig:
    data: datamod.DatasetSpec = field(default_factory=datamod.DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    seed: int = 0
    threads: int = 1
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        d, m = self.data, self.model
        if (d.grid_side, d.raw_dim, d.n_classes) != (m.grid_side, m.raw_dim, m.n_classes):
            raise ValueError("data and model disagree on grid_side / raw_dim / n_classes")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        self.merge.schedule(m.depth).validate(m)


_SECTIONS = {"data": datamod.DatasetSpec, "model": ModelConfig, "train": TrainConfig, "merge": MergeConfig}


def _section(cls, base, override: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(override) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{**asdict(base), **override})


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if not path:
        return cfg
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object")
    for key, value in raw.items():
        if key in _SECTIONS:
            setattr(cfg, key, _section(_SECTIONS[key], getattr(cfg, key), value))
        elif key in ("seed", "threads"):
            setattr(cfg, key, int(value))
        elif key == "paths":
            cfg.paths = dict(value)
        else:
            raise UsageError(f"unknown config key {key!r}")
    return cfg


def _int_list(text: str):
    parts = [p for p in text.replace(":", ",").split(",") if p.strip()]
    vals = [int(p) for p in parts]
    return vals[0] if len(vals) == 1 else vals


def _layers(text: str):
    t = text.strip()
    if t in ("shallow", "standard", "deep"):
        return t
    return [int(p) for p in t.replace(":", ",").split(",") if p.strip()]


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    m = {}
    if args.r is not None:
        m["r"] = _int_list(args.r)
    for k in ("tau", "f", "strategy", "score"):
        if getattr(args, k) is not None:
            m[k] = getattr(args, k)
    if args.layers is not None:
        m["layers"] = _layers(args.layers)
    if m:
        cfg.merge = MergeConfig(**{**asdict(cfg.merge), **m})
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.data = _section(datamod.DatasetSpec, cfg.data, {"seed": args.seed})
        cfg.model = _section(ModelConfig, cfg.model, {"seed": args.seed})
        cfg.train = _section(TrainConfig, cfg.train, {"seed": args.seed})
    if args.threads is not None:
        cfg.threads = args.threads
        cfg.train = _section(TrainConfig, cfg.train, {"workers": args.threads})
    if getattr(args, "epochs", None) is not None:
        cfg.train = _section(TrainConfig, cfg.train, {"epochs": args.epochs})
    for k in ("data", "checkpoint", "out"):
        v = getattr(args, k, None)
        if v is not None:
            cfg.paths[k] = v
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def _dataset(cfg: RunConfig) -> datamod.Dataset:
    path = cfg.paths.get("data")
    if path:
        ds = datamod.load(path)
        log.info("loaded %s: %d train / %d val", path, len(ds.train), len(ds.val))
        return ds
    return datamod.generate(cfg.data)


def _model(cfg: RunConfig) -> Model:
    path = cfg.paths.get("checkpoint")
    if not path:
        raise ValueError("this subcommand needs --checkpoint")
    model, _ = load_checkpoint(path)
    return model


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = cfg.paths.get("out")
    if not out:
        raise UsageError("gen-data needs --out")
    ds = datamod.generate(cfg.data)
    datamod.save(out, ds)
    print(f"wrote {out}: {len(ds.train)} train, {len(ds.val)} val samples")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    sched = cfg.merge.schedule(cfg.model.depth)
    out = cfg.paths.get("out")
    if cfg.paths.get("checkpoint"):
        model = _model(cfg)
        res = fine_tune(model, ds.train, cfg.train, sched, ds.val, checkpoint=out, metrics_path=args.metrics)
    else:
        model = Model(cfg.model)
        res = train(model, ds.train, cfg.train, ds.val, sched, checkpoint=out, metrics_path=args.metrics)
    last = res.last("val") if len(ds.val) else res.last("train")
    print(f"{last['split']} acc {last['acc']:.4f} loss {last['loss']:.4f}" + (f"; saved {out}" if out else ""))
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    model = _model(cfg)
    ds = _dataset(cfg)
    sched = cfg.merge.schedule(model.cfg.depth)
    split = ds.val if args.split == "val" else ds.train
    acc = evaluate(model, split, sched, seed=cfg.seed)
    fl = estimate_flops(model.cfg, sched)
    print(json.dumps({"split": args.split, "acc": acc, "gflops": fl.total / 1e9,
                      "flops_ratio": fl.ratio, "reduction": sched.total_reduction()}))
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"--axis must be one of {SWEEP_AXES}")
    if not args.values:
        raise UsageError("sweep needs --values")
    model = _model(cfg)
    ds = _dataset(cfg)
    base = cfg.merge.schedule(model.cfg.depth)
    if not base.layers:
        raise UsageError("sweep needs a base schedule with r > 0 (use --r)")
    values = [v for v in args.values.split(",") if v.strip()]
    if args.axis == "layers":
        values = [v.replace("-", ":") for v in args.values.split(",")]
    rows = sweep(model, ds.val, args.axis, values, base, measure=args.measure, seed=cfg.seed)
    _emit(sweep_csv(rows), cfg.paths.get("out"))
    log.info("\n%s", sweep_text(rows))
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    mcfg = vim_tiny_config() if args.preset == "vim-t" else cfg.model
    sched = cfg.merge.schedule(mcfg.depth)
    report = estimate_flops(mcfg, sched)
    text = report.to_csv() if args.csv else report.to_text()
    if args.measure:
        if args.preset == "vim-t":
            raise UsageError("--measure runs the toy model only")
        model = _model(cfg) if cfg.paths.get("checkpoint") else Model(mcfg)
        grids = datamod.generate(datamod.DatasetSpec(**{**asdict(cfg.data), "per_class": 0})).val.grids
        grids = grids[:args.batch]
        c = compare_throughput(model, grids, sched, reps=args.reps, threads=cfg.threads)
        text += (f"\nthroughput: baseline {c.baseline.images_per_s:.1f} img/s, "
                 f"merged {c.candidate.images_per_s:.1f} img/s, speedup x{c.speedup:.3f} "
                 f"(batch {len(grids)}, median of {args.reps} alternating pairs)\n")
    _emit(text, cfg.paths.get("out"))
    return 0


def cmd_viz(cfg: RunConfig, args) -> int:
    out = cfg.paths.get("out")
    if not out:
        raise UsageError("viz needs --out")
    if args.trace:
        trace = merge.load_trace(args.trace)
    else:
        model = _model(cfg)
        ds = _dataset(cfg)
        sched = cfg.merge.schedule(model.cfg.depth)
        if not sched.layers:
            raise UsageError("viz from a checkpoint needs --r > 0 (or pass --trace)")
        grid = ds.val.grids[args.index:args.index + 1]
        if len(grid) == 0:
            raise ValueError(f"sample index {args.index} out of range")
        res = forward(model, grid, sched, collect_trace=True, seed=cfg.seed)
        per_layer = [res.traces[k][0] for k in sorted(res.traces)]
        trace = merge.trace_to_dict(per_layer, model.cfg.grid_side, model.cfg.cls_index)
        if args.save_trace:
            with open(args.save_trace, "w") as fh:
                json.dump(trace, fh, indent=1)
    spec = viz.RenderSpec(trace["grid_side"], args.cell, cfg.seed if args.palette_seed is None else args.palette_seed,
                          args.kind)
    with open(out, "wb") as fh:
        fh.write(viz.render(trace, spec, args.layer))
    print(f"wrote {out}")
    return 0


def cmd_selftest(cfg: RunConfig, args) -> int:
    from .selftest import run_all

    results = run_all(seed=cfg.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "viz": cmd_viz,
    "selftest": cmd_selftest,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections data/model/train/merge/paths)")
    common.add_argument("--r", help="tokens merged per merge layer, one value or a comma list")
    common.add_argument("--tau", type=float)
    common.add_argument("--strategy", choices=merge.STRATEGIES)
    common.add_argument("--layers", help="shallow | standard | deep, or layer indices like 2,3,4")
    common.add_argument("--f", choices=merge.INTEGRATIONS, help="delta integration function")
    common.add_argument("--score", choices=merge.SCORE_MODES)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--threads", type=int)
    common.add_argument("--data", help="dataset file (default: generate from the config)")
    common.add_argument("--checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mamelab", description="Token merging for selective state-space vision models.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)
    sub.add_parser("gen-data", parents=[common], help="generate and save a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train (or fine-tune with --checkpoint)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--metrics", help="write per-epoch metrics CSV here")
    e = sub.add_parser("eval", parents=[common], help="accuracy with the merge schedule applied")
    e.add_argument("--split", choices=("val", "train"), default="val")
    s = sub.add_parser("sweep", parents=[common], help="evaluate over one schedule axis")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--measure", action="store_true", help="also time each point")
    b = sub.add_parser("bench", parents=[common], help="FLOPs estimate, optionally measured throughput")
    b.add_argument("--preset", choices=("toy", "vim-t"), default="toy")
    b.add_argument("--csv", action="store_true")
    b.add_argument("--measure", action="store_true")
    b.add_argument("--batch", type=int, default=64)
    b.add_argument("--reps", type=int, default=15)
    v = sub.add_parser("viz", parents=[common], help="render a merge map or delta heatmap")
    v.add_argument("--trace", help="trace JSON (otherwise traced from --checkpoint on one sample)")
    v.add_argument("--kind", choices=viz.KINDS, default="merge_map")
    v.add_argument("--index", type=int, default=0, help="validation sample to trace")
    v.add_argument("--layer", type=int, help="merge layer for heatmaps (default: first)")
    v.add_argument("--cell", type=int, default=16)
    v.add_argument("--palette-seed", type=int)
    v.add_argument("--save-trace")
    sub.add_parser("selftest", parents=[common], help="run the built-in oracle checks")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "bench" and args.preset == "vim-t":
            cfg.merge.schedule(vim_tiny_config().depth).validate(vim_tiny_config(), runnable=False)
        else:
            cfg.validate()
    except (UsageError, ValueError, TypeError) as e:
        parser.print_usage(sys.stderr)
        print(f"mamelab: error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"mamelab: error: {e}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "config": cfg.to_dict()}, sort_keys=True), file=sys.stderr)
    t0 = time.perf_counter()
    try:
        with threadpool_limits(limits=cfg.threads):
            code = COMMANDS[args.command](cfg, args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mamelab: error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, FloatingPointError, merge.MergeError) as e:
        print(f"mamelab: error: {e}", file=sys.stderr)
        return 2
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
