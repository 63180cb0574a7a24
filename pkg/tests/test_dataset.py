import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evostack import dataset as ds
from evostack.errors import (ChecksumError, DatasetValidationError, ManifestError,
                             TruncatedFileError, ValidationError)
from evostack.metrics import macro_f1, per_class_counts


def test_generator_counts_and_determinism():
    spec = ds.SynthSpec(classes=6, items_per_class=60, noise_level=0.0, seed=4)
    a, b = ds.synth_generate(spec), ds.synth_generate(spec)
    assert len(a) == 360 and a == b
    assert a.images.tobytes() == b.images.tobytes()
    assert np.bincount(a.targets).tolist() == [60] * 6
    imbalanced = ds.synth_generate(ds.SynthSpec(classes=3, items_per_class=(5, 9, 2)))
    assert np.bincount(imbalanced.targets).tolist() == [5, 9, 2]


def test_generator_validation():
    with pytest.raises(ValidationError):
        ds.SynthSpec(noise_level=1.0)
    with pytest.raises(ValidationError):
        ds.SynthSpec(classes=3, items_per_class=(5, 0, 2))


def test_linear_probe_separates_classes():
    data = ds.synth_generate(ds.SynthSpec(noise_level=0.1, seed=0))
    train, test = ds.split_dataset(data, [0.5, 0.5], seed=0)

    # nearest class mean: a linear rule, and unlike least squares it does not
    # overfit 180 samples in 3072 dimensions
    flat = train.images.reshape(len(train), -1)
    centroids = np.stack([flat[train.targets == k].mean(axis=0) for k in range(6)])
    q = test.images.reshape(len(test), -1)
    pred = (q @ centroids.T - 0.5 * (centroids ** 2).sum(axis=1)).argmax(axis=1)
    assert macro_f1(per_class_counts(test.targets, pred, 6)) >= 0.8


def test_round_trip_all_kinds(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (7, 2, 4, 4)).astype(np.float32)
    cases = [
        ds.TensorDataset(x, rng.integers(0, 3, 7), "single", 3, ("a", "b", "c")),
        ds.TensorDataset(x, rng.integers(0, 2, 7), "binary", 1, ("no", "yes")),
        ds.TensorDataset(x, rng.integers(0, 2, (7, 11)), "multilabel"),
    ]
    for i, data in enumerate(cases):
        ds.save(data, tmp_path / str(i))
        back = ds.load(tmp_path / str(i))
        assert back == data
        assert back.class_names == data.class_names
        assert back.label_width == data.label_width


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(2, 5), st.integers(0, 2**32 - 1),
       st.sampled_from(["single", "binary", "multilabel"]))
def test_round_trip_property(n, c, size, seed, kind):
    import tempfile

    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (n, c, size, size)).astype(np.float32)
    if kind == "multilabel":
        y = rng.integers(0, 2, (n, 1 + seed % 13))
    else:
        y = rng.integers(0, 2 if kind == "binary" else 4, n)
    data = ds.TensorDataset(x, y, kind)
    with tempfile.TemporaryDirectory() as tmp:
        ds.save(data, tmp)
        assert ds.load(tmp) == data


def saved(tmp_path):
    data = ds.synth_generate(ds.SynthSpec(classes=3, items_per_class=4, image_size=8))
    ds.save(data, tmp_path)
    return data


def test_manifest_errors(tmp_path):
    saved(tmp_path)
    path = tmp_path / "manifest.json"
    path.write_text("{ not json")
    with pytest.raises(ManifestError):
        ds.load(tmp_path)
    path.write_text(json.dumps({"format_version": 1}))
    with pytest.raises(ManifestError):
        ds.load(tmp_path)


def test_corrupted_length_field_is_truncation(tmp_path):
    saved(tmp_path)
    path = tmp_path / "manifest.json"
    m = json.loads(path.read_text())
    m["n"] += 1
    path.write_text(json.dumps(m))
    with pytest.raises(TruncatedFileError):
        ds.load(tmp_path)


def test_truncated_payload(tmp_path):
    saved(tmp_path)
    raw = (tmp_path / "images.f32le").read_bytes()
    (tmp_path / "images.f32le").write_bytes(raw[:-4])
    with pytest.raises(TruncatedFileError):
        ds.load(tmp_path)


def test_checksum_mismatch(tmp_path):
    saved(tmp_path)
    raw = bytearray((tmp_path / "images.f32le").read_bytes())
    raw[0] ^= 0x01
    (tmp_path / "images.f32le").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        ds.load(tmp_path)


def test_class_count_below_label_maximum(tmp_path):
    saved(tmp_path)
    path = tmp_path / "manifest.json"
    m = json.loads(path.read_text())
    m["label_width"] = 2
    m["class_names"] = []
    path.write_text(json.dumps(m))
    with pytest.raises(DatasetValidationError) as info:
        ds.load(tmp_path)
    assert "2" in str(info.value) and "label maximum is 2" in str(info.value)


def test_dataset_invariants():
    x = np.zeros((3, 1, 4, 4))
    with pytest.raises(ValidationError):
        ds.TensorDataset(x, [0, 1])
    with pytest.raises(ValidationError):
        ds.TensorDataset(x + 2, [0, 1, 0])
    with pytest.raises(ValidationError):
        ds.TensorDataset(x, [0, 2, 1], "binary")
    data = ds.TensorDataset(x, [0, 1, 0])
    with pytest.raises(ValueError):
        data.images[0, 0, 0, 0] = 1.0


def test_split_is_stratified_partition():
    data = ds.synth_generate(ds.SynthSpec(classes=4, items_per_class=(10, 12, 7, 9),
                                          image_size=8))
    parts = ds.split_dataset(data, [0.5, 0.25, 0.25], seed=1)
    assert sum(len(p) for p in parts) == len(data)
    for k, total in enumerate((10, 12, 7, 9)):
        got = [int(np.sum(p.targets == k)) for p in parts]
        assert sum(got) == total
        for share, frac in zip(got, (0.5, 0.25, 0.25)):
            assert abs(share - frac * total) < 1
    again = ds.split_dataset(data, [0.5, 0.25, 0.25], seed=1)
    assert all(a == b for a, b in zip(parts, again))


def test_image_file_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(0, 1, (3, 8, 8)).astype(np.float32)
    ds.save_image(img, tmp_path / "x.f32le")
    assert np.array_equal(ds.load_image(tmp_path / "x.f32le", (3, 8, 8)), img)
    with pytest.raises(TruncatedFileError):
        ds.load_image(tmp_path / "x.f32le", (3, 8, 9))
