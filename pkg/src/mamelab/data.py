"""Synthetic planted-pattern grids.

Each sample is a P x P grid of D_raw-dimensional patch vectors. A contiguous
blob of K cells carries the class prototype; every other cell is a copy of
one of a few shared background prototypes. Gaussian noise is added to all
cells. Background tokens are therefore near-duplicates of each other, and the
label lives in a small connected region.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .container import KIND_DATASET, Reader, Writer


@dataclass
class DatasetSpec:
    n_classes: int = 10
    per_class: int = 100
    val_per_class: int = 100
    grid_side: int = 8
    raw_dim: int = 16
    blob: int = 4
    n_background: int = 3
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.per_class < 0 or self.val_per_class < 0:
            raise ValueError("class and sample counts must be non-negative (n_classes >= 1)")
        if self.grid_side < 1 or self.raw_dim < 1 or self.n_background < 1:
            raise ValueError("grid_side, raw_dim and n_background must be >= 1")
        if not 1 <= self.blob < self.grid_side ** 2:
            raise ValueError(f"blob size must be in [1, {self.grid_side ** 2}), got {self.blob}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Split:
    grids: np.ndarray   # (n, P, P, D_raw) float32
    labels: np.ndarray  # (n,) int64
    blob_mask: np.ndarray | None = None  # (n, P, P) bool, only for generated data

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Split":
        mask = None if self.blob_mask is None else self.blob_mask[idx]
        return Split(self.grids[idx], self.labels[idx], mask)

    def batches(self, batch_size: int, order: np.ndarray | None = None):
        idx = np.arange(len(self)) if order is None else order
        for s in range(0, len(idx), batch_size):
            sel = idx[s:s + batch_size]
            yield self.grids[sel], self.labels[sel]


@dataclass
class Dataset:
    spec: DatasetSpec
    train: Split
    val: Split


def prototypes(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """(class prototypes (C, D_raw), background prototypes (n_bg, D_raw))."""
    rng = np.random.default_rng([spec.seed, 0])
    cls = rng.normal(size=(spec.n_classes, spec.raw_dim))
    bg = rng.normal(size=(spec.n_background, spec.raw_dim))
    return cls, bg


def grow_blob(rng: np.random.Generator, side: int, k: int) -> np.ndarray:
    """A random 4-connected set of k cells, as a (side, side) boolean mask."""
    mask = np.zeros((side, side), dtype=bool)
    r, c = rng.integers(side, size=2)
    mask[r, c] = True
    cells = [(int(r), int(c))]
    while len(cells) < k:
        frontier = sorted({
            (rr + dr, cc + dc)
            for rr, cc in cells
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))
            if 0 <= rr + dr < side and 0 <= cc + dc < side and not mask[rr + dr, cc + dc]
        })
        nxt = frontier[rng.integers(len(frontier))]
        mask[nxt] = True
        cells.append(nxt)
    return mask


def _sample(spec: DatasetSpec, label: int, seed_seq: np.random.SeedSequence,
            cls_proto: np.ndarray, bg_proto: np.ndarray):
    rng = np.random.default_rng(seed_seq)
    p = spec.grid_side
    mask = grow_blob(rng, p, spec.blob)
    which_bg = rng.integers(spec.n_background, size=(p, p))
    grid = bg_proto[which_bg]
    grid[mask] = cls_proto[label]
    grid = grid + spec.sigma * rng.normal(size=grid.shape)
    return grid, mask


def _make_split(spec: DatasetSpec, per_class: int, stream: int, cls_proto, bg_proto) -> Split:
    n = per_class * spec.n_classes
    labels = np.repeat(np.arange(spec.n_classes), per_class)
    root = np.random.SeedSequence([spec.seed, stream])
    labels = labels[np.random.default_rng(root).permutation(n)]
    grids = np.empty((n, spec.grid_side, spec.grid_side, spec.raw_dim), dtype=np.float32)
    masks = np.empty((n, spec.grid_side, spec.grid_side), dtype=bool)
    # one child seed per sample, so any sample can be regenerated alone
    for i, child in enumerate(root.spawn(n)):
        grids[i], masks[i] = _sample(spec, int(labels[i]), child, cls_proto, bg_proto)
    return Split(grids, labels.astype(np.int64), masks)


def generate(spec: DatasetSpec) -> Dataset:
    cls_proto, bg_proto = prototypes(spec)
    train = _make_split(spec, spec.per_class, 1, cls_proto, bg_proto)
    val = _make_split(spec, spec.val_per_class, 2, cls_proto, bg_proto)
    return Dataset(spec, train, val)


# ---------------------------------------------------------------------------
# dataset file, after the container header (kind 1):
#   u32 spec_len | spec JSON
#   twice (train, then val): u32 n | u32 P | u32 D_raw
#                            f32 grids (n, P, P, D_raw) | u16 labels (n)


def save(path, ds: Dataset) -> None:
    w = Writer(KIND_DATASET)
    w.json(ds.spec.to_dict())
    for split in (ds.train, ds.val):
        n, p, _, d = split.grids.shape
        w.pack("<III", n, p, d)
        w.array(split.grids, "<f4")
        w.array(split.labels, "<u2")
    w.save(path)


def load(path) -> Dataset:
    rd = Reader.open(path, KIND_DATASET)
    spec = DatasetSpec(**rd.json())
    splits = []
    for _ in range(2):
        n, p, d = rd.unpack("<III")
        grids = rd.array("<f4", (n, p, p, d)).astype(np.float32)
        labels = rd.array("<u2", (n,)).astype(np.int64)
        splits.append(Split(grids, labels))
    return Dataset(spec, *splits)
