import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsdec import data_io as D


def test_idx_round_trip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (5, 28, 28), dtype=np.uint8)
    labels = np.array([3, 1, 4, 1, 5], np.uint8)
    D.write_idx(tmp_path / "i.idx", imgs)
    with gzip.open(tmp_path / "l.idx.gz", "wb") as fh:
        fh.write(D.encode_idx(labels))
    x, y = D.load_mnist(tmp_path / "i.idx", tmp_path / "l.idx.gz")
    assert x.dtype == np.float32 and y.dtype == np.int64
    np.testing.assert_array_equal(x, imgs / np.float32(255))
    assert y.tolist() == [3, 1, 4, 1, 5]


def test_idx_header_layout():
    raw = D.encode_idx(np.zeros((2, 3, 4), np.uint8))
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 2, 3, 4)


def test_wrong_magic():
    raw = D.encode_idx(np.zeros((2, 28, 28), np.uint8))
    with pytest.raises(D.FormatError, match="magic"):
        D.parse_idx(raw, D.LABEL_MAGIC)


def test_truncated_payload_names_offset():
    raw = D.encode_idx(np.zeros((2, 28, 28), np.uint8))
    with pytest.raises(D.FormatError, match="offset"):
        D.parse_idx(raw[:-10], D.IMAGE_MAGIC)


def test_truncated_header():
    with pytest.raises(D.FormatError):
        D.parse_idx(b"\x00\x00", D.IMAGE_MAGIC)


def test_label_count_mismatch(tmp_path):
    D.write_idx(tmp_path / "i", np.zeros((3, 28, 28), np.uint8))
    D.write_idx(tmp_path / "l", np.zeros(2, np.uint8))
    with pytest.raises(D.FormatError):
        D.load_mnist(tmp_path / "i", tmp_path / "l")


def tiny_dataset(n=4, v=5, seed=0):
    rng = np.random.default_rng(seed)
    return D.VoxelDataset(rng.random((n, 28, 28)), rng.standard_normal((n, v)), rng.integers(0, 10, n))


def test_csv_round_trip_is_exact(tmp_path):
    ds = tiny_dataset()
    D.write_fmri_csv(ds, tmp_path / "f.csv")
    back = D.load_fmri_csv(tmp_path / "f.csv")
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.voxels.tobytes() == ds.voxels.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.provenance == "real"


def test_csv_header(tmp_path):
    D.write_fmri_csv(tiny_dataset(v=3), tmp_path / "f.csv")
    header = (tmp_path / "f.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["label", "p0"] and header[784] == "p783" and header[785:] == ["v0", "v1", "v2"]


def test_csv_empty_file(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(D.FormatError, match="empty"):
        D.load_fmri_csv(tmp_path / "e.csv")


def test_csv_header_without_rows(tmp_path):
    D.write_fmri_csv(tiny_dataset(), tmp_path / "f.csv")
    head = (tmp_path / "f.csv").read_text().splitlines()[0]
    (tmp_path / "h.csv").write_text(head + "\n")
    with pytest.raises(D.FormatError, match="V=5"):
        D.load_fmri_csv(tmp_path / "h.csv")


@pytest.mark.parametrize("mutate,pattern", [
    (lambda f: f[:-1], "row 3 has"),
    (lambda f: f[:5] + ["abc"] + f[6:], "row 3: non-numeric"),
    (lambda f: ["12"] + f[1:], "row 3: label"),
    (lambda f: f[:5] + ["nan"] + f[6:], "row 3: non-finite"),
])
def test_csv_bad_row_reports_row_number(tmp_path, mutate, pattern):
    D.write_fmri_csv(tiny_dataset(), tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    lines[2] = ",".join(mutate(lines[2].split(",")))
    (tmp_path / "bad.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(D.FormatError, match=pattern):
        D.load_fmri_csv(tmp_path / "bad.csv")


def test_dataset_shape_check():
    with pytest.raises(D.FormatError):
        D.VoxelDataset(np.zeros((3, 28, 28)), np.zeros((2, 5)), np.zeros(3))


def features(n=40, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 16))


def test_synthetic_is_deterministic():
    f = features()
    cfg = D.SynthConfig(signal_count=10, voxels=50, seed=3)
    a = D.synthesize_from_features(np.zeros((40, 28, 28)), np.zeros(40, int), f, cfg)
    b = D.synthesize_from_features(np.zeros((40, 28, 28)), np.zeros(40, int), f, cfg)
    assert a.voxels.tobytes() == b.voxels.tobytes()
    assert "seed=3" in a.provenance and "sigma=0.25" in a.provenance


def test_noiseless_signal_is_exactly_linear_with_unit_variance():
    f = features()
    ds = D.synthesize_from_features(np.zeros((40, 28, 28)), np.zeros(40, int), f,
                                    D.SynthConfig(signal_count=8, noise_sigma=0.0, voxels=30))
    sig = ds.signal_voxels
    np.testing.assert_allclose(ds.voxels[:, sig].std(axis=0), 1.0, atol=1e-12)
    design = np.hstack([f, np.ones((40, 1))])
    resid = ds.voxels[:, sig] - design @ np.linalg.lstsq(design, ds.voxels[:, sig], rcond=None)[0]
    assert np.abs(resid).max() < 1e-10


def test_noise_voxels_are_standard_normal():
    ds = D.synthesize_from_features(np.zeros((2000, 1, 1)), np.zeros(2000, int), features(2000),
                                    D.SynthConfig(signal_count=0, voxels=20))
    assert abs(ds.voxels.mean()) < 0.02 and abs(ds.voxels.std() - 1) < 0.02


def test_synth_config_validation():
    with pytest.raises(ValueError):
        D.SynthConfig(signal_count=5, voxels=4)
    with pytest.raises(ValueError):
        D.SynthConfig(noise_sigma=-1)


def test_stimuli_selection():
    labels = np.repeat(np.arange(10), 60)
    images = np.arange(600)[:, None, None] * np.ones((1, 28, 28))
    x, y = D.select_stimuli(images, labels)
    assert (y == 6).sum() == 50 and (y == 9).sum() == 50
    assert len(set(x[:, 0, 0].tolist())) == 100
    with pytest.raises(ValueError):
        D.select_stimuli(images, labels, per_class=61)


@settings(deadline=None, max_examples=60)
@given(st.integers(1, 120), st.integers(1, 12), st.integers(0, 100), st.integers(1, 4))
def test_kfold_is_a_balanced_partition(n, k, seed, n_classes):
    if k > n:
        with pytest.raises(ValueError):
            D.kfold_split(n, k, seed)
        return
    labels = np.arange(n) % n_classes
    folds = D.kfold_split(n, k, seed, labels)
    assert D.check_partition(folds, n) == k
    sizes = np.bincount(folds, minlength=k)
    assert sizes.max() - sizes.min() <= 1
    np.testing.assert_array_equal(folds, D.kfold_split(n, k, seed, labels))


def test_kfold_stratifies_two_classes():
    labels = np.repeat([6, 9], 50)
    folds = D.kfold_split(100, 10, 0, labels)
    for f in range(10):
        assert np.bincount(labels[folds == f], minlength=10)[[6, 9]].tolist() == [5, 5]


def test_check_partition_rejects_gaps():
    with pytest.raises(ValueError):
        D.check_partition(np.array([0, 2, 2]), 3)
