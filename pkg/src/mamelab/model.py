"""Toy bidirectional-SSM image classifier with merge layers in the stack."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .container import KIND_CHECKPOINT, Reader, Writer
from .merge import MergeSpec, TokenSequence, mame_layer
from .numerics import Tensor
from .ssm import BlockParams, init_block, vim_block

@dataclass
class ModelConfig:
    depth: int = 6
    embed_dim: int = 32
    expand: int = 2
    state_dim: int = 8
    grid_side: int = 8
    raw_dim: int = 16
    n_classes: int = 10
    dt_rank: int = 4
    readout: str = "mean"
    dtype: str = "f32"
    seed: int = 0

    def __post_init__(self):
        for name in ("depth", "embed_dim", "expand", "state_dim", "grid_side", "raw_dim", "n_classes", "dt_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.readout not in ("mean", "cls"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.dtype not in nx.DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")

    @property
    def inner_dim(self) -> int:
        return self.expand * self.embed_dim

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def cls_index(self) -> int:
        return self.n_patches // 2

    def to_dict(self) -> dict:
        return asdict(self)


def vim_tiny_config() -> ModelConfig:
    """ViM-T dimensions: 24 layers, D=192, expand 2, 16 states, 14x14 patches of 16x16x3."""
    return ModelConfig(depth=24, embed_dim=192, expand=2, state_dim=16, grid_side=14,
                       raw_dim=16 * 16 * 3, n_classes=1000, dt_rank=12)


PLACEMENT_FRACTIONS = (1 / 3, 3 / 5, 5 / 6)


def merge_layers(depth: int, placement: str = "standard") -> list[int]:
    """Three merge layers for a stack of ``depth`` blocks.

    ``standard`` sits at 1/3, 3/5 and 5/6 of the depth, with the last merge
    kept at least two blocks from the end (24 -> 8, 14, 20; 6 -> 2, 3, 4).
    ``shallow`` and ``deep`` shift that placement by ``max(1, depth // 6)``.
    """
    if depth < 4:
        raise ValueError("need depth >= 4 for three merge layers")
    std = [int(depth * f) for f in PLACEMENT_FRACTIONS]
    std[-1] = min(std[-1], depth - 2)
    shift = {"standard": 0, "shallow": -max(1, depth // 6), "deep": max(1, depth // 6)}
    if placement not in shift:
        raise ValueError(f"unknown placement {placement!r}")
    out = [min(max(l + shift[placement], 0), depth - 1) for l in std]
    # keep strictly increasing inside [0, depth)
    for i in range(1, 3):
        out[i] = max(out[i], out[i - 1] + 1)
    out[2] = min(out[2], depth - 1)
    for i in range(1, -1, -1):
        out[i] = min(out[i], out[i + 1] - 1)
    return out


@dataclass
class MergeSchedule:
    """layer index -> MergeSpec."""

    layers: dict[int, MergeSpec] = field(default_factory=dict)

    def __post_init__(self):
        self.layers = {int(k): v for k, v in sorted(self.layers.items())}
        for k in self.layers:
            if k < 0:
                raise ValueError(f"negative merge layer {k}")

    @classmethod
    def uniform(cls, layers, r, tau: float = 10.0, f: str = "avg", strategy: str = "ord_front",
                score: str = "mame") -> "MergeSchedule":
        """Same settings at every listed layer; ``r`` may be an int or a per-layer list."""
        layers = list(layers)
        if sorted(set(layers)) != layers:
            raise ValueError("merge layer indices must be strictly increasing")
        rs = list(r) if isinstance(r, (list, tuple)) else [r] * len(layers)
        if len(rs) != len(layers):
            raise ValueError("need one r per merge layer")
        return cls({l: MergeSpec(rr, tau, f, strategy, score) for l, rr in zip(layers, rs)})

    @classmethod
    def empty(cls) -> "MergeSchedule":
        return cls({})

    def total_reduction(self) -> int:
        return sum(s.r for s in self.layers.values())

    def validate(self, cfg: ModelConfig, runnable: bool = True) -> None:
        """Check layer indices and totals; with ``runnable`` also check that every
        layer has enough bipartite sources for its r (the FLOPs estimator skips this)."""
        for k in self.layers:
            if k >= cfg.depth:
                raise ValueError(f"merge layer {k} >= depth {cfg.depth}")
        if self.total_reduction() >= cfg.n_patches:
            raise ValueError("cumulative r must be smaller than the token count")
        if not runnable:
            return
        n = cfg.n_tokens
        for k, s in self.layers.items():
            # at most ceil(n/2) even positions can act as sources
            if s.r > (n + 1) // 2:
                raise ValueError(f"r={s.r} at layer {k} exceeds the {(n + 1) // 2} possible sources")
            n -= s.r

    def replace(self, **kw) -> "MergeSchedule":
        out = {}
        for k, s in self.layers.items():
            d = s.to_dict()
            d.update(kw)
            out[k] = MergeSpec(**d)
        return MergeSchedule(out)

    def to_dict(self) -> dict:
        return {str(k): v.to_dict() for k, v in self.layers.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "MergeSchedule":
        return cls({int(k): MergeSpec(**v) for k, v in d.items()})


class Model:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dtype = nx.DTYPES[cfg.dtype]
        rng = np.random.default_rng(cfg.seed)
        D = cfg.embed_dim

        def p(a):
            return Tensor(a, requires_grad=True, dtype=dtype)

        self.embed_w = p(rng.normal(0, cfg.raw_dim ** -0.5, (cfg.raw_dim, D)))
        self.embed_b = p(np.zeros(D))
        self.cls_token = p(rng.normal(0, 0.02, D))
        self.blocks: list[BlockParams] = [
            init_block(rng, D, cfg.inner_dim, cfg.state_dim, cfg.dt_rank, dtype) for _ in range(cfg.depth)
        ]
        self.final_norm = p(np.ones(D))
        self.head_w = p(rng.normal(0, D ** -0.5, (D, cfg.n_classes)))
        self.head_b = p(np.zeros(cfg.n_classes))

    def parameters(self) -> dict[str, Tensor]:
        out = {"embed_w": self.embed_w, "embed_b": self.embed_b, "cls_token": self.cls_token}
        for i, b in enumerate(self.blocks):
            for k, v in b.tensors().items():
                out[f"blocks.{i}.{k}"] = v
        out["final_norm"] = self.final_norm
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def astype(self, dtype: str) -> "Model":
        cfg = ModelConfig(**{**self.cfg.to_dict(), "dtype": dtype})
        m = Model(cfg)
        m.load_state({k: v.data for k, v in self.parameters().items()})
        return m

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            raise ValueError(f"state mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for k, t in params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype).copy()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}


def patch_embed(model: Model, grid) -> TokenSequence:
    """Project each patch independently and insert the class token in the middle.

    ``grid`` is (P, P, D_raw) or (B, P, P, D_raw). Tokens are the patches in
    row-major order with the class token at index P*P // 2, so ``orig_index``
    runs 0..P*P.
    """
    cfg = model.cfg
    g = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    if g.ndim == 3:
        g = g[None]
    b, p1, p2, draw = g.shape
    if (p1, p2, draw) != (cfg.grid_side, cfg.grid_side, cfg.raw_dim):
        raise ValueError(f"grid shape {g.shape[1:]} does not match config "
                         f"({cfg.grid_side}, {cfg.grid_side}, {cfg.raw_dim})")
    x = Tensor(g.reshape(b, p1 * p2, draw), dtype=model.embed_w.dtype)
    tok = nx.linear(x, model.embed_w, model.embed_b)
    mid = cfg.cls_index
    cls = nx.add(Tensor(np.zeros((b, 1, cfg.embed_dim), dtype=tok.dtype)), model.cls_token)
    values = nx.concat([tok[:, :mid], cls, tok[:, mid:]], axis=1)
    return TokenSequence.initial(values, cls_pos=mid)


@dataclass
class ForwardResult:
    logits: Tensor
    traces: dict[int, list] = field(default_factory=dict)
    lengths: list[int] = field(default_factory=list)
    seq: TokenSequence | None = None


def forward(model: Model, grid, schedule: MergeSchedule | None = None, collect_trace: bool = False,
            seed: int = 0) -> ForwardResult:
    """Run the classifier; merge layers act right after their SSM block.

    ``seed`` only feeds the random-score baseline. ``lengths`` records the
    token count entering each layer plus the final count.
    """
    cfg = model.cfg
    schedule = schedule or MergeSchedule.empty()
    schedule.validate(cfg)
    seq = patch_embed(model, grid)
    traces: dict[int, list] = {}
    lengths = []
    for i, block in enumerate(model.blocks):
        lengths.append(seq.length)
        out = vim_block(seq, block)
        spec = schedule.layers.get(i)
        if spec is None:
            seq = out.t_next
            continue
        rng = np.random.default_rng([seed, i]) if spec.score == "random" else None
        seq, tr = mame_layer(seq, out.delta_f, out.delta_b, out.t_star, spec, layer=i, rng=rng,
                             collect_trace=collect_trace)
        if tr is not None:
            traces[i] = tr
    lengths.append(seq.length)
    h = nx.rms_norm(seq.values, model.final_norm)
    if cfg.readout == "mean":
        w = seq.sizes / seq.sizes.sum(axis=1, keepdims=True)
        pooled = nx.matmul(Tensor(w[:, None, :], dtype=h.dtype), h)
        pooled = nx.reshape(pooled, (seq.batch, cfg.embed_dim))
    else:
        pooled = h[np.arange(seq.batch), seq.cls_pos]
    logits = nx.linear(pooled, model.head_w, model.head_b)
    return ForwardResult(logits=logits, traces=traces, lengths=lengths, seq=seq)


def predict(model: Model, grids: np.ndarray, schedule: MergeSchedule | None = None,
            batch_size: int = 128, seed: int = 0) -> np.ndarray:
    preds = []
    for s in range(0, len(grids), batch_size):
        res = forward(model, grids[s:s + batch_size], schedule, seed=seed + s)
        preds.append(res.logits.data.argmax(axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# checkpoint file, after the container header (kind 2):
#   u32 meta_len | meta JSON {"model": config, "extra": {...}}
#   u32 n_params | per param: u16 name_len, name utf-8, u32 ndim, u32 dims[ndim]
#   f32 blob: all params in header order, row-major, little-endian


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    params = model.parameters()
    w = Writer(KIND_CHECKPOINT)
    w.json({"model": model.cfg.to_dict(), "extra": extra or {}})
    w.pack("<I", len(params))
    for name, t in params.items():
        nb = name.encode()
        w.pack("<H", len(nb))
        w.raw(nb)
        w.pack("<I", t.ndim)
        w.pack(f"<{t.ndim}I", *t.shape)
    for t in params.values():
        w.array(t.data, "<f4")
    w.save(path)


def load_checkpoint(path, dtype: str | None = None) -> tuple[Model, dict]:
    rd = Reader.open(path, KIND_CHECKPOINT)
    meta = rd.json()
    cfgd = dict(meta["model"])
    if dtype is not None:
        cfgd["dtype"] = dtype
    model = Model(ModelConfig(**cfgd))
    (n,) = rd.unpack("<I")
    shapes = []
    for _ in range(n):
        (ln,) = rd.unpack("<H")
        name = rd.take(ln).decode()
        (ndim,) = rd.unpack("<I")
        dims = rd.unpack(f"<{ndim}I") if ndim else ()
        shapes.append((name, tuple(dims)))
    model.load_state({name: rd.array("<f4", shape) for name, shape in shapes})
    return model, meta.get("extra", {})
