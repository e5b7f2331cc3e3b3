import numpy as np
import pytest

from pharos.data import (Dataset, dataset_from_bytes, dataset_to_bytes, export_csv, gen_synthetic, import_csv,
                         load_dataset, prototypes, save_dataset)
from pharos.errors import ConfigError, FormatError, InvalidInputError


@pytest.fixture(scope="module")
def default_ds():
    return gen_synthetic()


def test_default_recipe_shapes(default_ds):
    ds = default_ds
    assert ds.features.shape == (8500, 64) and ds.features.dtype == np.float32
    assert ds.labels.shape == (8500, 8)
    assert ds.split("query")[0].shape[0] == 500
    assert ds.split("database")[0].shape[0] == 8000
    assert ds.split("train")[0].shape[0] == 2000
    assert ds.train_idx.min() >= 500
    assert ds.features.min() >= 0 and ds.features.max() <= 1
    assert ds.labels.any(axis=1).all()


def test_label_marginal_matches_conditioned_bernoulli(default_ds):
    p = 0.2 / (1 - 0.8 ** 8)          # density given at least one active label
    n = default_ds.labels.size
    sigma = np.sqrt(p * (1 - p) / n)
    assert abs(default_ds.labels.mean() - p) < 3 * sigma


def test_single_label_items_sit_near_their_prototype(default_ds):
    ds = default_ds
    protos = prototypes(8, 64, 42)
    single = ds.labels.sum(axis=1) == 1
    centered = ds.features[single].astype(np.float64) - 0.5
    nearest = np.argmax(centered @ protos.T, axis=1)
    assert np.mean(nearest == np.argmax(ds.labels[single], axis=1)) >= 0.9


def test_generation_is_seeded():
    a = gen_synthetic(n_classes=4, dim=8, n_train=20, n_db=50, n_query=5, seed=3)
    b = gen_synthetic(n_classes=4, dim=8, n_train=20, n_db=50, n_query=5, seed=3)
    c = gen_synthetic(n_classes=4, dim=8, n_train=20, n_db=50, n_query=5, seed=4)
    assert dataset_to_bytes(a) == dataset_to_bytes(b)
    assert dataset_to_bytes(a) != dataset_to_bytes(c)


@pytest.mark.parametrize("kw", [dict(n_classes=1), dict(dim=2, n_classes=4), dict(n_train=100, n_db=50),
                                dict(label_density=0.0), dict(noise_sigma=-1.0), dict(n_query=0)])
def test_invalid_recipe(kw):
    with pytest.raises(ConfigError):
        gen_synthetic(**kw)


def test_dataset_validation():
    x = np.full((3, 2), 0.5, dtype=np.float32)
    y = np.eye(3, 2, dtype=np.uint8) + np.array([[0, 0], [0, 0], [1, 0]], dtype=np.uint8)
    with pytest.raises(InvalidInputError):
        Dataset(x * 3, y, 1, [1])
    with pytest.raises(InvalidInputError):
        Dataset(x, y, 1, [0])
    with pytest.raises(InvalidInputError):
        Dataset(x, y, 1, [1]).split("validation")


def test_phf_roundtrip(tmp_path, small_ds):
    p = tmp_path / "d.phf"
    save_dataset(p, small_ds)
    back = load_dataset(p)
    assert np.array_equal(back.features, small_ds.features)
    assert np.array_equal(back.labels, small_ds.labels)
    assert np.array_equal(back.train_idx, small_ds.train_idx)
    assert back.n_query == small_ds.n_query and back.params == small_ds.params
    assert dataset_to_bytes(back) == p.read_bytes()


def test_phf_corruption(small_ds):
    raw = dataset_to_bytes(small_ds)
    with pytest.raises(FormatError, match="magic"):
        dataset_from_bytes(b"PHF2" + raw[4:])
    with pytest.raises(FormatError, match="truncated"):
        dataset_from_bytes(raw[:-5])
    with pytest.raises(FormatError, match="trailing"):
        dataset_from_bytes(raw + b"\0")
    flipped = bytearray(raw)
    flipped[-30] ^= 0x01
    with pytest.raises(FormatError):
        dataset_from_bytes(bytes(flipped))
    feat = bytearray(raw)
    feat[len(raw) // 2] ^= 0x10
    with pytest.raises(FormatError, match="checksum"):
        dataset_from_bytes(bytes(feat))


def test_csv_roundtrip(tmp_path, small_ds):
    p = tmp_path / "d.csv"
    export_csv(p, small_ds)
    head = p.read_text().splitlines()[0].split(",")
    assert head[0] == "split" and head[1] == "x0" and head[-1] == "y4"
    back = import_csv(p)
    assert np.array_equal(back.features, small_ds.features)
    assert np.array_equal(back.labels, small_ds.labels)
    assert np.array_equal(back.train_idx, small_ds.train_idx)


def test_csv_fixture(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("split,x0,x1,y0,y1\n"
                 "database,0.1,0.2,1,0\n"
                 "query,0.5,0.5,0,1\n"
                 "train,0.9,0.0,1,1\n")
    ds = import_csv(p)
    assert ds.n_query == 1
    assert ds.features.tolist()[0] == [0.5, 0.5]
    assert ds.train_idx.tolist() == [2]
    assert ds.labels.tolist() == [[0, 1], [1, 0], [1, 1]]


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("split,x0,y0\nquery,0.5\n")
    with pytest.raises(FormatError, match="line 2"):
        import_csv(p)
    p.write_text("split,x0,y0\nholdout,0.5,1\n")
    with pytest.raises(FormatError, match="unknown split"):
        import_csv(p)
    p.write_text("a,b\n")
    with pytest.raises(FormatError, match="header"):
        import_csv(p)
