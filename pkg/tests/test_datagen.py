import dataclasses
import struct

import numpy as np
import pytest

from kd3lab.datagen import (
    OPEN_LABEL,
    DatasetFormatError,
    IdxFormatError,
    LabeledSet,
    Provenance,
    ShiftBenchmarkConfig,
    gen_shift_benchmark,
    grayscale_merge,
    load_dataset,
    load_idx,
    save_dataset,
    style_shift,
    write_idx,
)
from kd3lab.mixdist import instance_stats
from kd3lab.numerics import Rng

from conftest import SMALL_BENCH


def test_default_sizes_and_provenance():
    train, pool, test = gen_shift_benchmark(ShiftBenchmarkConfig())
    assert (len(train), len(test), len(pool)) == (2000, 1000, 7000)
    assert pool.provenance_counts() == {"InDistribution": 3000, "StyleShifted": 2000, "OpenSet": 2000}
    assert np.all(pool.labels[pool.provenance == Provenance.OpenSet] == OPEN_LABEL)
    assert np.all(pool.labels[pool.provenance != Provenance.OpenSet] >= 0)


def test_default_diagnostics_report():
    _, pool, _ = gen_shift_benchmark(ShiftBenchmarkConfig())
    diag = pool.meta["diagnostics"]
    assert diag["indist_above_openset"]
    assert diag["mean_bayes_maxprob_InDistribution"] > diag["mean_bayes_maxprob_OpenSet"]


def test_pool_all_indistribution_when_other_strata_empty():
    cfg = dataclasses.replace(SMALL_BENCH, n_pool_style=0, n_pool_open=0)
    _, pool, _ = gen_shift_benchmark(cfg)
    assert np.all(pool.provenance == Provenance.InDistribution)
    assert pool.meta["diagnostics"]["indist_above_openset"]


def test_bit_identical_rerun_and_seed_sensitivity():
    a = gen_shift_benchmark(SMALL_BENCH)
    b = gen_shift_benchmark(SMALL_BENCH)
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s.x, t.x)
        np.testing.assert_array_equal(s.labels, t.labels)
    c = gen_shift_benchmark(dataclasses.replace(SMALL_BENCH, seed=4))
    assert not np.array_equal(a[0].x, c[0].x)


def test_train_and_test_are_distinct_draws():
    train, _, test = gen_shift_benchmark(dataclasses.replace(SMALL_BENCH, n_teacher_train=200, n_test=200))
    assert not np.any(np.all(train.x[:, None, :] == test.x[None], axis=2))


def test_blob_geometry():
    cfg = ShiftBenchmarkConfig(n_teacher_train=8000, n_test=0, n_pool_style=0, n_pool_open=0)
    train, _, _ = gen_shift_benchmark(cfg)
    for k in range(cfg.num_classes):
        xs = train.x[train.labels == k]
        expect = np.zeros(cfg.dim)
        expect[k] = cfg.separation
        np.testing.assert_allclose(xs.mean(0), expect, atol=0.1)
        assert abs((xs - xs.mean(0)).std() - 1.0) < 0.05


@pytest.mark.parametrize("bad", [
    dict(n_pool_in=0, n_pool_style=0, n_pool_open=0),
    dict(dim=1),
    dict(num_classes=1),
    dict(style_lo=2.0, style_hi=1.0),
    dict(n_test=-1),
])
def test_config_rejections(bad):
    with pytest.raises(ValueError):
        gen_shift_benchmark(dataclasses.replace(SMALL_BENCH, **bad))


def test_style_shift_laws():
    x = Rng(1).normal(size=20)
    np.testing.assert_array_equal(style_shift(x, 1.0, 0.0), x)
    mu, sd = instance_stats(x)
    assert instance_stats(style_shift(x, 2.0, 0.0))[1] == pytest.approx(2 * sd, rel=1e-14)
    assert instance_stats(style_shift(x, 1.0, 3.0))[0] == pytest.approx(mu + 3, abs=1e-14)
    with pytest.raises(ValueError):
        style_shift(x, 0.0, 1.0)


def test_grayscale_merge():
    ch = Rng(2).uniform(size=(4, 4))
    np.testing.assert_allclose(grayscale_merge(np.stack([ch, ch, ch])), ch, atol=1e-15)
    rgb = np.stack([np.zeros((2, 2)), np.full((2, 2), 0.5), np.ones((2, 2))])
    np.testing.assert_array_equal(grayscale_merge(rgb), np.full((2, 2), 0.5))
    rnd = Rng(3).uniform(size=(3, 5, 5))
    g = grayscale_merge(rnd)
    assert g.min() >= rnd.min() and g.max() <= rnd.max()
    with pytest.raises(ValueError):
        grayscale_merge(np.zeros((4, 2, 2)))


def test_labeledset_invariants():
    with pytest.raises(ValueError, match="index 1"):
        LabeledSet(np.zeros((2, 3)), 2, labels=[0, 2])
    with pytest.raises(ValueError):
        LabeledSet(np.zeros((2, 3)), 2, provenance=[0])
    s = LabeledSet(np.arange(6.0).reshape(3, 2), 2, [0, 1, 0], [0, 1, 2])
    sub = s.subset([2, 0])
    np.testing.assert_array_equal(sub.x, [[4, 5], [0, 1]])
    np.testing.assert_array_equal(sub.provenance, [2, 0])


# -- IDX -----------------------------------------------------------------------


def test_idx_round_trip(tmp_path):
    imgs = (Rng(4).uniform(size=(5, 3, 4)) * 255).astype(np.uint8)
    labs = np.array([0, 9, 3, 3, 1], dtype=np.uint8)
    write_idx(tmp_path / "i.idx", imgs)
    write_idx(tmp_path / "l.idx.gz", labs)
    ds = load_idx(tmp_path / "i.idx", tmp_path / "l.idx.gz")
    assert ds.x.shape == (5, 12)
    np.testing.assert_array_equal(ds.x, imgs.reshape(5, 12) / 255.0)
    np.testing.assert_array_equal(ds.labels, labs)
    assert ds.x.min() >= 0 and ds.x.max() <= 1


def test_idx_bit_exact_layout(tmp_path):
    write_idx(tmp_path / "l.idx", np.array([7, 2], dtype=np.uint8))
    assert (tmp_path / "l.idx").read_bytes() == bytes.fromhex("00000801 00000002 0702".replace(" ", ""))


def test_idx_zero_items(tmp_path):
    write_idx(tmp_path / "i.idx", np.zeros((0, 28, 28), dtype=np.uint8))
    ds = load_idx(tmp_path / "i.idx")
    assert len(ds) == 0 and ds.dim == 784


def test_idx_errors(tmp_path):
    write_idx(tmp_path / "i.idx", np.zeros((3, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "l.idx", np.zeros(4, dtype=np.uint8))
    with pytest.raises(IdxFormatError, match=r"3 images.*4 labels"):
        load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    with pytest.raises(IdxFormatError, match="bad magic 0x00000801 at byte 0"):
        load_idx(tmp_path / "l.idx")
    raw = (tmp_path / "i.idx").read_bytes()
    (tmp_path / "t.idx").write_bytes(raw[:-3])
    with pytest.raises(IdxFormatError, match="truncated payload at byte 16"):
        load_idx(tmp_path / "t.idx")
    (tmp_path / "h.idx").write_bytes(raw[:9])
    with pytest.raises(IdxFormatError, match="truncated header"):
        load_idx(tmp_path / "h.idx")


# -- dataset file ------------------------------------------------------------------


def test_dataset_round_trip_bit_exact(tmp_path, small_sets):
    _, pool, _ = small_sets
    save_dataset(pool, tmp_path / "p.kd3d")
    back = load_dataset(tmp_path / "p.kd3d")
    np.testing.assert_array_equal(back.x, pool.x)
    np.testing.assert_array_equal(back.labels, pool.labels)
    np.testing.assert_array_equal(back.provenance, pool.provenance)
    save_dataset(back, tmp_path / "q.kd3d")
    assert (tmp_path / "p.kd3d").read_bytes() == (tmp_path / "q.kd3d").read_bytes()


def test_dataset_header_layout(tmp_path):
    ds = LabeledSet(np.array([[1.5, -2.0]]), 3, labels=[2])
    save_dataset(ds, tmp_path / "d.kd3d")
    buf = (tmp_path / "d.kd3d").read_bytes()
    assert buf[:24] == struct.pack("<4sIIIII", b"KD3D", 1, 1, 2, 3, 1)
    assert buf[24:40] == struct.pack("<2d", 1.5, -2.0)
    assert buf[40:] == b"\x02"


def test_dataset_errors(tmp_path):
    ds = LabeledSet(np.zeros((2, 2)), 2)
    save_dataset(ds, tmp_path / "d.kd3d")
    raw = (tmp_path / "d.kd3d").read_bytes()
    (tmp_path / "a").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "b").write_bytes(raw[:-1])
    (tmp_path / "c").write_bytes(raw[:10])
    for name, msg in (("a", "bad magic"), ("b", "expected 56 bytes"), ("c", "truncated header")):
        with pytest.raises(DatasetFormatError, match=msg):
            load_dataset(tmp_path / name)
