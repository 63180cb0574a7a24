import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TINY_FIXED
from evostack.dataset import TensorDataset
from evostack.errors import ValidationError
from evostack.nn.backbone import Backbone
from evostack.nn.models import MLPClassifier
from evostack.search_space import Chromosome
from evostack.stacknet import (BinaryModelSet, DegenerateDatasetWarning, DegenerateLabelsError,
                               HyperGrid, MetaClassifier, MetaTrainConfig, StackNetModel,
                               assemble_features, balanced_binary_indices, engineer_features,
                               finetune_binary, load_bundle, make_balanced_binary, predict,
                               predict_batch, probability_stats, probability_vector, save_bundle,
                               train_binary_models, train_meta)


class ConstantModel:
    def __init__(self, value):
        self.value = value

    def predict_proba(self, x):
        return np.full(len(x), self.value)


class PixelModel:
    """Probability read off one pixel, so different images give different vectors."""

    def __init__(self, idx):
        self.idx = idx

    def predict_proba(self, x):
        flat = np.asarray(x).reshape(len(x), -1)
        return flat[:, self.idx % flat.shape[1]]


class ZeroBackbone:
    def __init__(self, width):
        self.feature_width = width

    def features(self, x):
        return np.zeros((len(x), self.feature_width))


def quadrant_data(n_per_class=40, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(3), n_per_class)
    x = rng.uniform(0, 0.2, (len(y), 1, 8, 8))
    for i, k in enumerate(y):
        r, c = divmod(int(k), 2)
        x[i, 0, r * 4:(r + 1) * 4, c * 4:(c + 1) * 4] += 0.7
    return TensorDataset(x, y, "single", 3, ("a", "b", "c"))


ONE_CONFIG = HyperGrid(learning_rates=(0.05,), batch_sizes=(16,), fold_counts=(5,),
                       strategies=("FU",))


# --- balanced sets -----------------------------------------------------------

def test_balanced_negatives_are_stratified():
    labels = np.concatenate([np.zeros(100, int), np.repeat(np.arange(1, 23), 100)])
    pos, neg = balanced_binary_indices(labels, 0, np.random.default_rng(0))
    assert len(pos) == 100 and len(neg) == 100
    per_class = np.bincount(labels[neg], minlength=23)[1:]
    assert per_class.sum() == 100 and per_class.min() >= 4 and per_class.max() <= 5
    assert not set(pos.tolist()) & set(neg.tolist())
    again = balanced_binary_indices(labels, 0, np.random.default_rng(0))
    assert np.array_equal(neg, again[1])


def test_balanced_set_labels_and_names():
    data = quadrant_data(10)
    b = make_balanced_binary(data, 1, np.random.default_rng(0))
    assert b.target_kind == "binary" and b.class_names == ("not_b", "b")
    assert np.bincount(b.targets).tolist() == [10, 10]


def test_degenerate_balance():
    with pytest.warns(DegenerateDatasetWarning):
        pos, neg = balanced_binary_indices(np.zeros(5, int), 0, np.random.default_rng(0))
    assert len(neg) == 0
    with pytest.raises(ValidationError):
        balanced_binary_indices(np.zeros(5, int), 2, np.random.default_rng(0))


# --- grid search ---------------------------------------------------------------

def test_grid_validation_and_size():
    assert len(HyperGrid()) == 2 * 1 * 2 * 1 * 2
    with pytest.raises(ValidationError):
        HyperGrid(fold_counts=(3,))
    with pytest.raises(ValidationError):
        HyperGrid(strategies=("XX",))
    labels = {c.label for c in HyperGrid(fold_counts=(5, 10)).combinations()}
    assert labels == {"FU - 5 Fold", "GU - 5 Fold", "FU - 10 Fold", "GU - 10 Fold"}


def test_finetune_separable_task():
    data = quadrant_data()
    c = Chromosome.from_tuples([(2, 8, 0.0)])
    r = finetune_binary(c, data, 0, ONE_CONFIG, seed=0, fixed=TINY_FIXED, epochs=30)
    assert r.cv_score >= 0.9
    assert r.training_runs == 5 + 1
    assert r.config.label == "FU - 5 Fold"
    assert all(r.model.is_trainable(k) for k in r.model.params)


def test_finetune_skips_infeasible_fold_counts():
    data = quadrant_data(6)
    grid = HyperGrid(learning_rates=(0.05,), batch_sizes=(8,), fold_counts=(5, 10),
                     strategies=("GU",))
    c = Chromosome.from_tuples([(2, 8, 0.0)])
    r = finetune_binary(c, data, 2, grid, seed=1, fixed=TINY_FIXED, epochs=2)
    assert r.config.folds == 5 and len(r.skipped) == 1
    assert r.training_runs == 6


def test_train_binary_models_threads_match_serial():
    data = quadrant_data(10)
    c = Chromosome.from_tuples([(2, 8, 0.0)])
    grid = HyperGrid(learning_rates=(0.05,), batch_sizes=(8,), fold_counts=(5,),
                     strategies=("FU",))
    a = train_binary_models(c, data, grid, 3, fixed=TINY_FIXED, epochs=2)
    b = train_binary_models(c, data, grid, 3, fixed=TINY_FIXED, epochs=2, jobs=3)
    assert a.class_names == ("a", "b", "c")
    for ma, mb in zip(a.models, b.models):
        assert all(np.array_equal(ma.params[k], mb.params[k]) for k in ma.params)


# --- features --------------------------------------------------------------------

def test_probability_vector_shapes():
    models = BinaryModelSet([ConstantModel(0.3) for _ in range(23)])
    p = probability_vector(models, np.zeros((3, 4, 4)))
    assert p.shape == (23,) and np.all(p == p[0])
    one = BinaryModelSet([ConstantModel(0.91), ConstantModel(0.1), ConstantModel(0.2)])
    assert probability_vector(one, np.zeros((1, 2, 2)))[0] == 0.91


def test_stats_examples():
    assert probability_stats(np.full(23, 0.5)).tolist() == [0.5, 0.0, 0.5, 0.0]
    s = probability_stats([0.3, 0.9, 0.6])
    assert s[2] == pytest.approx(0.6) and s[3] == pytest.approx(0.3)
    with pytest.raises(ValidationError):
        probability_stats([0.1, 0.2])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=40), st.randoms(use_true_random=False))
def test_stats_permutation_invariant(values, r):
    shuffled = list(values)
    r.shuffle(shuffled)
    assert probability_stats(values).tolist() == probability_stats(shuffled).tolist()


def test_assemble_features():
    f = assemble_features(np.zeros(23), np.zeros(2048), np.zeros(4), class_count=23,
                          feature_width=2048)
    assert f.combined.shape == (2075,) and not f.combined.any()
    rng = np.random.default_rng(0)
    p, d = rng.uniform(size=5), rng.normal(size=7)
    f = assemble_features(p, d, probability_stats(p))
    assert np.array_equal(f.combined[:5], p) and np.array_equal(f.combined[5:12], d)
    assert np.array_equal(f.combined[12:], probability_stats(p))
    with pytest.raises(ValidationError):
        assemble_features(p, d, np.zeros(4), class_count=6)
    with pytest.raises(ValidationError):
        assemble_features(p, d, np.zeros(4), feature_width=8)
    with pytest.raises(ValidationError):
        assemble_features(p, d, np.zeros(3))
    with pytest.raises(ValidationError):
        assemble_features(p + 1, d, np.zeros(4))


def test_engineer_features_layout():
    models = BinaryModelSet([PixelModel(i) for i in range(4)])
    backbone = Backbone(1, (2, 2, 2, 2))
    x = np.random.default_rng(0).uniform(size=(3, 1, 8, 8))
    f = engineer_features(models, backbone, x)
    assert f.shape == (3, 4 + 8 + 4)
    assert np.array_equal(f[:, -4:], probability_stats(f[:, :4]))


# --- meta-classifier ---------------------------------------------------------------

def test_meta_learns_separable_features():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(4), 30)
    centers = rng.normal(0, 3, (4, 10))
    x = centers[y] + rng.normal(0, 0.5, (len(y), 10))
    meta = train_meta(x, y, MetaTrainConfig(hidden=(32,), learning_rate=0.01, epochs=30))
    assert meta.train_macro_f1 >= 0.95 and meta.class_count == 4


def test_meta_defaults_and_degenerate_labels():
    cfg = MetaTrainConfig()
    assert (cfg.hidden, cfg.learning_rate, cfg.batch_size) == ((1024, 512, 256), 0.0005, 16)
    with pytest.raises(DegenerateLabelsError):
        train_meta(np.zeros((5, 3)), np.zeros(5, int))


def identity_meta(c, d):
    """Meta network whose logits are exactly the probability block."""
    net = MLPClassifier(c + d + 4, (), c, np.random.default_rng(0), dtype=np.float64)
    w = np.zeros((c + d + 4, c))
    w[:c] = np.eye(c)
    net.params["dense0.w"] = w
    return MetaClassifier(net, c)


def test_identity_meta_reproduces_argmax():
    models = BinaryModelSet([PixelModel(i) for i in range(6)])
    backbone = ZeroBackbone(5)
    x = np.random.default_rng(1).uniform(size=(20, 1, 4, 4))
    ids, conf = predict_batch(models, backbone, identity_meta(6, 5), x)
    p = np.stack([m.predict_proba(x) for m in models.models], axis=1)
    assert np.array_equal(ids, p.argmax(axis=1))
    assert np.allclose(conf.sum(axis=1), 1.0)


def test_predict_single_image_with_stubs():
    models = BinaryModelSet([ConstantModel(v) for v in np.linspace(0.1, 0.9, 23)])
    label, conf = predict(models, ZeroBackbone(8), identity_meta(23, 8), np.zeros((1, 4, 4)))
    assert label == 22 and conf.shape == (23,)
    assert abs(conf.sum() - 1) < 1e-9
    with pytest.raises(ValidationError):
        predict(models, ZeroBackbone(9), identity_meta(23, 8), np.zeros((1, 4, 4)))


def test_prediction_is_permutation_equivariant():
    c, d = 5, 3
    rng = np.random.default_rng(2)
    models = BinaryModelSet([PixelModel(i) for i in range(c)])
    backbone = ZeroBackbone(d)
    x = rng.uniform(size=(12, 1, 4, 4))
    feats = engineer_features(models, backbone, x)
    meta = train_meta(feats, rng.integers(0, c, 12), MetaTrainConfig(hidden=(6,), epochs=2),
                      class_count=c)
    _, conf = predict_batch(models, backbone, meta, x)

    perm = rng.permutation(c)
    moved = BinaryModelSet([models.models[i] for i in perm])
    net = meta.network.copy()
    last = f"dense{len(net.hidden)}"
    net.params["dense0.w"] = net.params["dense0.w"].copy()
    net.params["dense0.w"][:c] = meta.network.params["dense0.w"][perm]
    for k in ("input.mean", "input.scale"):
        net.params[k] = net.params[k].copy()
        net.params[k][:c] = meta.network.params[k][perm]
    net.params[f"{last}.w"] = meta.network.params[f"{last}.w"][:, perm]
    net.params[f"{last}.b"] = meta.network.params[f"{last}.b"][perm]
    _, conf_p = predict_batch(moved, backbone, MetaClassifier(net, c), x)
    assert np.allclose(conf_p, conf[:, perm], atol=1e-6)


def test_bundle_round_trip(tmp_path):
    data = quadrant_data(10)
    grid = HyperGrid(learning_rates=(0.05,), batch_sizes=(8,), fold_counts=(5,),
                     strategies=("FU",))
    binary = train_binary_models(Chromosome.from_tuples([(2, 8, 0.0)]), data, grid, 0,
                                 fixed=TINY_FIXED, epochs=2)
    backbone = Backbone(1, (2, 2, 2, 2))
    feats = engineer_features(binary, backbone, data.images)
    meta = train_meta(feats, data.targets, MetaTrainConfig(hidden=(8,), epochs=2))
    save_bundle(StackNetModel(binary, backbone, meta), tmp_path)
    back = load_bundle(tmp_path, require_meta=True)
    assert back.class_names == ("a", "b", "c")
    assert back.binary.results[0].config == binary.results[0].config
    a = predict_batch(binary, backbone, meta, data.images)
    b = predict_batch(back.binary, back.backbone, back.meta, data.images)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_missing_bundle_rejected(tmp_path):
    with pytest.raises(ValidationError):
        load_bundle(tmp_path)
