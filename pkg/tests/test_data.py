import numpy as np
import pytest

from mamelab import container, data
from mamelab.data import DatasetSpec


def tiny(**kw):
    return DatasetSpec(**{**dict(n_classes=4, per_class=5, val_per_class=2, grid_side=5, raw_dim=6), **kw})


def test_zero_noise_single_background_is_constant():
    ds = data.generate(tiny(sigma=0.0, n_background=1))
    for g, m in zip(ds.train.grids, ds.train.blob_mask):
        bg = g[~m]
        assert np.all(bg == bg[0])


def test_same_seed_bit_identical():
    a, b = data.generate(tiny()), data.generate(tiny())
    assert a.train.grids.tobytes() == b.train.grids.tobytes()
    assert np.array_equal(a.val.labels, b.val.labels)
    c = data.generate(tiny(seed=1))
    assert a.train.grids.tobytes() != c.train.grids.tobytes()


def test_mean_pooled_foreground_is_separable_without_noise():
    spec = tiny(sigma=0.0, n_classes=10, per_class=10)
    ds = data.generate(spec)
    protos, _ = data.prototypes(spec)
    feats = np.stack([g[m].mean(axis=0) for g, m in zip(ds.train.grids, ds.train.blob_mask)])
    # linear classifier w_c = p_c, b_c = -|p_c|^2 / 2
    scores = feats @ protos.T - 0.5 * (protos ** 2).sum(axis=1)
    assert np.mean(scores.argmax(axis=1) == ds.train.labels) == 1.0


def test_balanced_labels_and_blobs():
    spec = tiny(blob=6)
    ds = data.generate(spec)
    assert np.array_equal(np.bincount(ds.train.labels), [5] * 4)
    assert ds.train.labels.min() >= 0 and ds.train.labels.max() < 4
    for m in ds.train.blob_mask:
        assert m.sum() == 6
        # 4-connected: flood fill from one cell reaches all
        cells = {tuple(c) for c in np.argwhere(m)}
        seen, todo = set(), [next(iter(cells))]
        while todo:
            r, c = todo.pop()
            if (r, c) in seen:
                continue
            seen.add((r, c))
            todo += [n for n in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)) if n in cells]
        assert seen == cells


def test_background_more_similar_than_foreground_background():
    ds = data.generate(DatasetSpec(per_class=5, val_per_class=0))

    def cos(a, b):
        return (a * b).sum(-1) / np.linalg.norm(a, axis=-1) / np.linalg.norm(b, axis=-1)

    bb, fb = [], []
    rng = np.random.default_rng(0)
    for g, m in zip(ds.train.grids, ds.train.blob_mask):
        bg, fg = g[~m], g[m]
        i, j = rng.integers(len(bg), size=(2, 20))
        bb.append(cos(bg[i], bg[j])[i != j])
        fb.append(cos(fg[rng.integers(len(fg), size=20)], bg[i]))
    assert np.concatenate(bb).mean() > np.concatenate(fb).mean()


def test_spec_validation():
    with pytest.raises(ValueError):
        tiny(blob=25)
    with pytest.raises(ValueError):
        tiny(sigma=-1.0)


def test_save_load_round_trip(tmp_path):
    ds = data.generate(tiny())
    p = tmp_path / "d.mame"
    data.save(p, ds)
    back = data.load(p)
    assert back.spec == ds.spec
    for a, b in ((ds.train, back.train), (ds.val, back.val)):
        assert a.grids.tobytes() == b.grids.tobytes()
        assert np.array_equal(a.labels, b.labels)
    raw = p.read_bytes()
    (tmp_path / "m").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(container.ContainerError, match="magic"):
        data.load(tmp_path / "m")
    (tmp_path / "t").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(container.ContainerError, match="short read"):
        data.load(tmp_path / "t")


def test_checkpoint_file_is_not_a_dataset(tmp_path):
    w = container.Writer(container.KIND_CHECKPOINT)
    w.json({})
    w.save(tmp_path / "c")
    with pytest.raises(container.ContainerError, match="expected a dataset"):
        data.load(tmp_path / "c")


def test_batches_cover_split():
    ds = data.generate(tiny())
    seen = sum(len(y) for _, y in ds.train.batches(3))
    assert seen == len(ds.train)
