import gzip
import struct

import numpy as np
import pytest

from deepfool.data import (
    Dataset,
    load_csv,
    load_idx,
    resolve_dataset,
    save_csv,
    save_idx,
    split,
    synth_blobs,
)
from deepfool.errors import ConfigError, DataFormatError
from deepfool.training import TrainConfig, train


def write_idx(tmp_path, pixels, labels, img_magic=0x803, lbl_magic=0x801, count=None):
    m = len(labels) if count is None else count
    img = tmp_path / "img.idx"
    lbl = tmp_path / "lbl.idx"
    img.write_bytes(struct.pack(">IIII", img_magic, m, 2, 2) + bytes(pixels))
    lbl.write_bytes(struct.pack(">II", lbl_magic, len(labels)) + bytes(labels))
    return img, lbl


def test_idx_fixture_mapping(tmp_path):
    img, lbl = write_idx(tmp_path, [0, 255, 128, 64, 1, 2, 3, 4], [3, 7])
    data = load_idx(img, lbl, n_classes=10)
    np.testing.assert_array_equal(data.x[0], [0.0, 1.0, 128 / 255, 64 / 255])
    np.testing.assert_array_equal(data.y, [3, 7])
    assert data.n_features == 4


def test_idx_wrong_label_magic(tmp_path):
    img, lbl = write_idx(tmp_path, [0] * 8, [1, 2], lbl_magic=0x803)
    with pytest.raises(DataFormatError, match="offset 0"):
        load_idx(img, lbl)


def test_idx_truncated_payload(tmp_path):
    img, lbl = write_idx(tmp_path, [0] * 7, [1, 2])
    with pytest.raises(DataFormatError, match="offset"):
        load_idx(img, lbl)


def test_idx_count_mismatch(tmp_path):
    img, lbl = write_idx(tmp_path, [0] * 12, [1, 2], count=3)
    with pytest.raises(DataFormatError):
        load_idx(img, lbl)


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, size=(5, 6)) / 255.0
    data = Dataset(x, rng.integers(0, 10, size=5), n_classes=10)
    save_idx(data, tmp_path / "i", tmp_path / "l", image_shape=(2, 3))
    back = load_idx(tmp_path / "i", tmp_path / "l", n_classes=10)
    assert np.array_equal(back.x, data.x) and np.array_equal(back.y, data.y)


def test_idx_gzip(tmp_path):
    img, lbl = write_idx(tmp_path, [0, 255, 128, 64], [1])
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    assert np.array_equal(load_idx(gz, lbl).x, load_idx(img, lbl).x)


def test_csv_round_trip_full_precision(tmp_path):
    rng = np.random.default_rng(1)
    data = Dataset(rng.normal(size=(4, 3)) / 3, [0, 2, 1, 2], n_classes=3)
    save_csv(data, tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().startswith("label,f0,f1,f2\n")
    back = load_csv(tmp_path / "d.csv", n_classes=3)
    assert back.x.tobytes() == data.x.tobytes()
    assert np.array_equal(back.y, data.y)


def test_csv_bad_rows(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("label,f0,f1\n0,1.0\n")
    with pytest.raises(DataFormatError):
        load_csv(p)
    p.write_text("label,f0\n0,abc\n")
    with pytest.raises(DataFormatError):
        load_csv(p)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 3], n_classes=3)
    with pytest.raises(ValueError):
        Dataset(np.array([[0.0, np.inf]]), [0], n_classes=2)
    d = Dataset(np.zeros((2, 2)), [0, 1], n_classes=2)
    with pytest.raises(ValueError):
        d.x[0, 0] = 1.0


def test_blobs_zero_spread_and_determinism():
    d = synth_blobs(5, 3, 4, 0.0, seed=3)
    centers = np.array(d.metadata["centers"])
    for x, y in zip(d.x, d.y):
        assert np.array_equal(x, centers[y])
    a, b = synth_blobs(5, 3, 10, 0.3, seed=9), synth_blobs(5, 3, 10, 0.3, seed=9)
    assert a.x.tobytes() == b.x.tobytes() and np.array_equal(a.y, b.y)
    with pytest.raises(ConfigError):
        synth_blobs(5, 1, 10, 0.3)


def test_blobs_informative_features_share_centers():
    d = synth_blobs(10, 4, 3, 0.0, seed=0, informative=3)
    assert np.ptp(d.x[:, 3:], axis=0).max() == 0.0
    assert np.ptp(d.x[:, :3], axis=0).min() > 0.0


def test_separated_blobs_affine_accuracy():
    d = synth_blobs(6, 3, 50, 0.05, seed=4, center_range=(0.0, 10.0))
    f, _ = train("affine:3", d, TrainConfig(epochs=20, learning_rate=0.01))
    assert np.mean(f.predict(d.x) == d.y) == 1.0


def test_split_properties():
    d = synth_blobs(3, 2, 50, 0.1, seed=0)
    tr, te = split(d, (0.7, 0.3), seed=5)
    assert len(tr) == 70 and len(te) == 30
    assert not set(tr.ids) & set(te.ids)
    assert set(tr.ids) | set(te.ids) <= set(d.ids)
    tr2, te2 = split(d, (0.7, 0.3), seed=5)
    assert np.array_equal(tr.ids, tr2.ids) and np.array_equal(te.ids, te2.ids)
    full, empty = split(d, (1.0, 0.0), seed=0)
    assert len(full) == 100 and len(empty) == 0
    for bad in [(0.8, 0.5), (-0.1, 0.5), (0.0, 0.0)]:
        with pytest.raises(ConfigError):
            split(d, bad)


def test_resolve_dataset_specs(tmp_path, monkeypatch):
    d, test = resolve_dataset("blobs:n=4,c=2,per_class=5,spread=0.1,informative=0")
    assert test is None and d.x.shape == (10, 4)
    with pytest.raises(ConfigError):
        resolve_dataset("blobs:wat=1")
    with pytest.raises(ConfigError):
        resolve_dataset("parquet:x")
    with pytest.raises(FileNotFoundError):
        resolve_dataset("csv:" + str(tmp_path / "none.csv"))
    monkeypatch.setenv("DEEPFOOL_DATA_DIR", str(tmp_path))
    with pytest.raises(FileNotFoundError):
        resolve_dataset("mnist")
