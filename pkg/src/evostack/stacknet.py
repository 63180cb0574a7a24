"""Two-stage stacking ensemble.

Stage 1 fine-tunes one binary transformer per class on a balanced
one-vs-rest subset, grid-searching optimizer settings, fold counts and the
unfreezing strategy (``FU``: everything trainable from the start; ``GU``:
head first, one more block per epoch).

Stage 2 feeds ``P ++ D ++ S`` to a focal-loss dense classifier, where ``P`` are
the per-class probabilities, ``D`` the backbone features and ``S`` four
summary statistics of ``P``.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Protocol, Sequence

import numpy as np

from ._random import derive_rng
from .dataset import TensorDataset
from .errors import TrainingDivergence, ValidationError
from .fitness import score_predictions
from .metrics import macro_f1, per_class_counts, stratified_kfold
from .nn.backbone import Backbone
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.models import Head, MLPClassifier, VisionTransformer, build_model, set_unfreeze_depth
from .nn.training import LossSpec, TrainState, decisions, predict_batched, train
from .search_space import Chromosome, FixedHyperparams

logger = logging.getLogger(__name__)

Strategy = Literal["FU", "GU"]
STATS_CONTRACT_VERSION = 1
STATS_WIDTH = 4


class DegenerateDatasetWarning(UserWarning):
    pass


class DegenerateLabelsError(ValidationError):
    pass


@dataclass(frozen=True)
class HyperGrid:
    learning_rates: tuple[float, ...] = (0.01, 0.001)
    momenta: tuple[float, ...] = (0.9,)
    batch_sizes: tuple[int, ...] = (16, 32)
    fold_counts: tuple[int, ...] = (5,)
    strategies: tuple[Strategy, ...] = ("FU", "GU")

    def __post_init__(self):
        for name in ("learning_rates", "momenta", "batch_sizes", "fold_counts", "strategies"):
            values = tuple(getattr(self, name))
            if not values:
                raise ValidationError(f"hyperparameter grid field {name} is empty")
            object.__setattr__(self, name, values)
        if any(lr <= 0 for lr in self.learning_rates):
            raise ValidationError("learning rates must be positive")
        if any(not 0 <= m < 1 for m in self.momenta):
            raise ValidationError("momenta must lie in [0, 1)")
        if any(int(b) < 1 for b in self.batch_sizes):
            raise ValidationError("batch sizes must be positive")
        if not set(self.fold_counts) <= {5, 10}:
            raise ValidationError(f"fold counts must be 5 or 10, got {self.fold_counts}")
        if not set(self.strategies) <= {"FU", "GU"}:
            raise ValidationError(f"strategies must be FU or GU, got {self.strategies}")

    def combinations(self) -> Iterator[BinaryTrainConfig]:
        for folds in self.fold_counts:
            for lr, mom, bs in itertools.product(self.learning_rates, self.momenta,
                                                 self.batch_sizes):
                for strategy in self.strategies:
                    yield BinaryTrainConfig(lr, mom, int(bs), int(folds), strategy)

    def __len__(self) -> int:
        return (len(self.fold_counts) * len(self.learning_rates) * len(self.momenta)
                * len(self.batch_sizes) * len(self.strategies))


@dataclass(frozen=True)
class BinaryTrainConfig:
    learning_rate: float
    momentum: float
    batch_size: int
    folds: int
    strategy: Strategy

    @property
    def label(self) -> str:
        return f"{self.strategy} - {self.folds} Fold"


@dataclass
class BinaryResult:
    class_id: int
    model: VisionTransformer
    config: BinaryTrainConfig
    cv_score: float
    training_runs: int = 0
    skipped: list[tuple[BinaryTrainConfig, str]] = field(default_factory=list)


class ProbabilityModel(Protocol):
    def predict_proba(self, x: np.ndarray) -> np.ndarray: ...


@dataclass
class BinaryModelSet:
    models: list[ProbabilityModel]
    class_names: tuple[str, ...] = ()
    results: list[BinaryResult] | None = None

    def __post_init__(self):
        if not self.models:
            raise ValidationError("binary model set is empty")
        if not self.class_names:
            self.class_names = tuple(f"class_{k}" for k in range(len(self.models)))
        if len(self.class_names) != len(self.models):
            raise ValidationError("one class name per binary model")

    @property
    def class_count(self) -> int:
        return len(self.models)


# --- stage 1 -------------------------------------------------------------------

def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    raw = total * weights / weights.sum()
    quota = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - quota), kind="stable")
    quota[order[:total - quota.sum()]] += 1
    return quota


def balanced_binary_indices(labels: np.ndarray, class_c: int,
                            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Positive indices and a class-stratified negative sample of equal size."""
    y = np.asarray(labels).ravel()
    pos = np.flatnonzero(y == class_c)
    if not len(pos):
        raise ValidationError(f"class {class_c} does not occur in the dataset")
    neg_all = np.flatnonzero(y != class_c)
    if len(neg_all) <= len(pos):
        if not len(neg_all):
            warnings.warn(f"class {class_c} has no negatives; balanced set is degenerate",
                          DegenerateDatasetWarning, stacklevel=3)
        return pos, neg_all
    others = np.unique(y[neg_all])
    counts = np.array([np.sum(y == k) for k in others], dtype=np.float64)
    quotas = _largest_remainder(len(pos), counts)
    picks = []
    for k, q in zip(others, quotas):
        members = np.flatnonzero(y == k)
        picks.append(np.sort(rng.choice(members, size=int(q), replace=False)))
    return pos, np.sort(np.concatenate(picks))


def make_balanced_binary(data: TensorDataset, class_c: int,
                         rng: np.random.Generator) -> TensorDataset:
    if data.target_kind != "single":
        raise ValidationError("balanced one-vs-rest sets need single-label data")
    pos, neg = balanced_binary_indices(data.targets, class_c, rng)
    idx = np.concatenate([pos, neg])
    labels = (data.targets[idx] == class_c).astype(np.int64)
    name = data.class_name(class_c)
    return TensorDataset(data.images[idx], labels, "binary", 1, (f"not_{name}", name))


def _schedule(strategy: Strategy):
    if strategy == "FU":
        return lambda model, epoch: set_unfreeze_depth(model, model.num_blocks + 1)
    return lambda model, epoch: set_unfreeze_depth(model, min(epoch, model.num_blocks + 1))


def _fresh_binary(base: Chromosome | VisionTransformer, fixed: FixedHyperparams | None,
                  rng: np.random.Generator) -> VisionTransformer:
    if isinstance(base, VisionTransformer):
        return base.replace_head(Head.binary(), rng)
    if fixed is None:
        raise ValidationError("building from a chromosome needs fixed hyperparameters")
    return build_model(base, fixed, Head.binary(), rng)


def _fit(model: VisionTransformer, x, y, cfg: BinaryTrainConfig, epochs: int,
         rng: np.random.Generator) -> VisionTransformer:
    state = TrainState(model, rng)
    train(state, x, y, LossSpec("bce"), epochs=epochs, learning_rate=cfg.learning_rate,
          momentum=cfg.momentum, batch_size=cfg.batch_size,
          unfreeze_schedule=_schedule(cfg.strategy))
    return model


def finetune_binary(base: Chromosome | VisionTransformer, data: TensorDataset, class_c: int,
                    grid: HyperGrid, seed: int, *, fixed: FixedHyperparams | None = None,
                    epochs: int = 8) -> BinaryResult:
    """Grid-searched one-vs-rest fine-tuning for ``class_c``.

    Every (fold count, lr, momentum, batch size, strategy) combination is scored
    by mean validation F1; the winner is refit on the whole balanced set.
    """
    if len(grid) == 0:
        raise ValidationError("empty hyperparameter grid")
    balanced = make_balanced_binary(data, class_c, derive_rng(seed, "balance", class_c))
    x, y = balanced.images, balanced.targets
    best: tuple[float, BinaryTrainConfig] | None = None
    runs = 0
    skipped = []
    for i, cfg in enumerate(grid.combinations()):
        if cfg.folds > min(np.bincount(y, minlength=2)):
            skipped.append((cfg, f"{cfg.folds} folds exceed the minority count"))
            logger.warning("class %d: skipping %s (too few items for %d folds)",
                           class_c, cfg, cfg.folds)
            continue
        folds = stratified_kfold(y, cfg.folds, seed)
        scores = []
        try:
            for f, (tr, va) in enumerate(folds.splits()):
                rng = derive_rng(seed, "stage1", class_c, i, f)
                model = _fit(_fresh_binary(base, fixed, rng), x[tr], y[tr], cfg, epochs, rng)
                runs += 1
                scores.append(score_predictions(Head.binary(), y[va], decisions(model, x[va])))
        except TrainingDivergence as exc:
            skipped.append((cfg, str(exc)))
            logger.warning("class %d: %s diverged (%s); skipped", class_c, cfg, exc)
            continue
        mean = math.fsum(scores) / len(scores)
        logger.info("class %d %s lr=%g mom=%g bs=%d: F1 %.4f", class_c, cfg.label,
                    cfg.learning_rate, cfg.momentum, cfg.batch_size, mean)
        if best is None or mean > best[0]:
            best = (mean, cfg)
    if best is None:
        raise TrainingDivergence(f"no grid combination trained for class {class_c}")
    score, cfg = best
    rng = derive_rng(seed, "stage1-final", class_c)
    model = _fit(_fresh_binary(base, fixed, rng), x, y, cfg, epochs, rng)
    runs += 1
    model.unfreeze_all()
    return BinaryResult(class_c, model, cfg, score, runs, skipped)


def train_binary_models(base: Chromosome | VisionTransformer, data: TensorDataset,
                        grid: HyperGrid, seed: int, *, fixed: FixedHyperparams | None = None,
                        epochs: int = 8, classes: Sequence[int] | None = None,
                        jobs: int = 1) -> BinaryModelSet:
    """Stage 1 for every class; per-class jobs may run on a thread pool."""
    classes = list(range(data.label_width)) if classes is None else list(classes)

    def job(c):
        return finetune_binary(base, data, c, grid, seed, fixed=fixed, epochs=epochs)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(job, classes))
    else:
        results = [job(c) for c in classes]
    names = tuple(data.class_name(c) for c in classes)
    return BinaryModelSet([r.model for r in results], names, results)


# --- stage 2 features ----------------------------------------------------------

def probability_matrix(models: BinaryModelSet, x: np.ndarray) -> np.ndarray:
    """(N, C) matrix of per-class probabilities."""
    cols = [np.asarray(m.predict_proba(x), dtype=np.float64).reshape(-1) for m in models.models]
    return np.stack(cols, axis=1)


def probability_vector(models: BinaryModelSet, x: np.ndarray) -> np.ndarray:
    """Per-class probabilities for a single C x H x W image."""
    return probability_matrix(models, np.asarray(x)[None])[0]


def probability_stats(p: np.ndarray) -> np.ndarray:
    """[mean, population std, mean of top three, max minus mean of top three].

    Works on the last axis.  Values are sorted first, which makes the result
    exactly invariant to the order of ``p``.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] < 3:
        raise ValidationError(f"need at least 3 probabilities, got {p.shape[-1]}")
    s = -np.sort(-p, axis=-1)
    mean = s.mean(axis=-1)
    std = np.sqrt(((s - mean[..., None]) ** 2).mean(axis=-1))
    top3 = s[..., :3].mean(axis=-1)
    return np.stack([mean, std, top3, s[..., 0] - top3], axis=-1)


@dataclass(frozen=True)
class EngineeredFeatures:
    prob_vector: np.ndarray
    deep_features: np.ndarray
    stats: np.ndarray
    combined: np.ndarray


def assemble_features(p: np.ndarray, deep: np.ndarray, stats: np.ndarray, *,
                      class_count: int | None = None,
                      feature_width: int | None = None) -> EngineeredFeatures:
    p = np.asarray(p, dtype=np.float64).ravel()
    deep = np.asarray(deep, dtype=np.float64).ravel()
    stats = np.asarray(stats, dtype=np.float64).ravel()
    if class_count is not None and len(p) != class_count:
        raise ValidationError(f"probability vector has {len(p)} entries, expected {class_count}")
    if feature_width is not None and len(deep) != feature_width:
        raise ValidationError(f"deep features have {len(deep)} entries, expected {feature_width}")
    if len(stats) != STATS_WIDTH:
        raise ValidationError(f"stats vector has {len(stats)} entries, expected {STATS_WIDTH}")
    if ((p < 0) | (p > 1)).any():
        raise ValidationError("probabilities must lie in [0, 1]")
    return EngineeredFeatures(p, deep, stats, np.concatenate([p, deep, stats]))


def engineer_features(models: BinaryModelSet, backbone, x: np.ndarray) -> np.ndarray:
    """(N, C + D + 4) stage-2 inputs for a batch of images."""
    p = probability_matrix(models, x)
    deep = np.asarray(backbone.features(x), dtype=np.float64)
    return np.concatenate([p, deep, probability_stats(p)], axis=1)


# --- stage 2 meta-classifier ---------------------------------------------------

@dataclass(frozen=True)
class MetaTrainConfig:
    hidden: tuple[int, ...] = (1024, 512, 256)
    learning_rate: float = 0.0005
    batch_size: int = 16
    epochs: int = 40
    momentum: float = 0.9
    gamma: float = 2.0
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("invalid meta-classifier training settings")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))


@dataclass
class MetaClassifier:
    network: MLPClassifier
    class_count: int
    train_macro_f1: float = 0.0

    @property
    def in_dim(self) -> int:
        return self.network.in_dim

    def predict_logits(self, features: np.ndarray) -> np.ndarray:
        return predict_batched(self.network, np.atleast_2d(features)).astype(np.float64)


def _feature_matrix(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return np.atleast_2d(features).astype(np.float64)
    return np.stack([f.combined if isinstance(f, EngineeredFeatures) else np.asarray(f)
                     for f in features]).astype(np.float64)


def train_meta(features, labels, cfg: MetaTrainConfig = MetaTrainConfig(), *,
               class_count: int | None = None) -> MetaClassifier:
    x = _feature_matrix(features)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if len(x) == 0 or len(x) != len(y):
        raise ValidationError("need one label per feature row")
    c = class_count or int(y.max()) + 1
    if y.min() < 0 or y.max() >= c:
        raise ValidationError(f"labels must lie in [0, {c})")
    if len(np.unique(y)) < 2:
        raise DegenerateLabelsError("meta-classifier needs at least two distinct classes")
    rng = derive_rng(cfg.seed, "meta")
    net = MLPClassifier(x.shape[1], cfg.hidden, c, rng)
    net.set_standardization(x)
    state = TrainState(net, rng)
    loss = LossSpec("focal", gamma=cfg.gamma, alpha=cfg.alpha)
    try:
        train(state, x.astype(np.float32), y, loss, epochs=cfg.epochs,
              learning_rate=cfg.learning_rate, momentum=cfg.momentum, batch_size=cfg.batch_size)
    except TrainingDivergence as exc:
        raise TrainingDivergence("meta-classifier diverged", epoch=exc.epoch,
                                 batch=exc.batch) from exc
    pred = decisions(net, x.astype(np.float32))
    score = macro_f1(per_class_counts(y, pred, c))
    logger.info("meta-classifier training macro-F1 %.4f", score)
    return MetaClassifier(net, c, score)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_batch(models: BinaryModelSet, backbone, meta, x: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Class ids and softmax confidences for a batch of images."""
    width = models.class_count + backbone.feature_width + STATS_WIDTH
    if meta.in_dim != width:
        raise ValidationError(f"meta-classifier expects {meta.in_dim} features, pipeline "
                              f"produces {width}")
    conf = _softmax(meta.predict_logits(engineer_features(models, backbone, x)))
    return conf.argmax(axis=1), conf


def predict(models: BinaryModelSet, backbone, meta, x: np.ndarray) -> tuple[int, np.ndarray]:
    """Final class id and per-class confidences for one C x H x W image."""
    ids, conf = predict_batch(models, backbone, meta, np.asarray(x)[None])
    return int(ids[0]), conf[0]


# --- persistence ----------------------------------------------------------------

@dataclass
class StackNetModel:
    binary: BinaryModelSet
    backbone: Backbone | None = None
    meta: MetaClassifier | None = None

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.binary.class_names


def _bundle_json(model: StackNetModel) -> dict:
    info = {
        "class_names": list(model.class_names),
        "C": model.binary.class_count,
        "D": model.backbone.feature_width if model.backbone else None,
        "stats_contract_version": STATS_CONTRACT_VERSION,
        "binary": [],
    }
    for k, m in enumerate(model.binary.models):
        entry = {"class_id": k}
        if model.binary.results:
            r = model.binary.results[k]
            entry.update(config=asdict(r.config), label=r.config.label, cv_score=r.cv_score)
        info["binary"].append(entry)
    if isinstance(model.binary.models[0], VisionTransformer):
        first = model.binary.models[0]
        info["image_shape"] = [first.fixed.channels, first.fixed.image_size,
                               first.fixed.image_size]
    if model.meta:
        info["meta_train_macro_f1"] = model.meta.train_macro_f1
    return info


def save_bundle(model: StackNetModel, directory: str | os.PathLike) -> None:
    root = Path(directory)
    (root / "binary").mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(model.binary.models):
        save_checkpoint(m, root / "binary" / f"{k}.ckpt")
    if model.backbone is not None:
        save_checkpoint(model.backbone, root / "backbone.ckpt")
    if model.meta is not None:
        save_checkpoint(model.meta.network, root / "meta.ckpt")
    (root / "bundle.json").write_text(json.dumps(_bundle_json(model), indent=2) + "\n",
                                      encoding="utf-8")


def load_bundle(directory: str | os.PathLike, *, require_meta: bool = False) -> StackNetModel:
    root = Path(directory)
    try:
        info = json.loads((root / "bundle.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"{root} has no bundle.json") from None
    c = info["C"]
    models = []
    for k in range(c):
        path = root / "binary" / f"{k}.ckpt"
        if not path.exists():
            raise ValidationError(f"bundle is missing binary model {path}")
        models.append(load_checkpoint(path))
    results = None
    if all("config" in e for e in info["binary"]):
        results = [BinaryResult(e["class_id"], models[e["class_id"]],
                                BinaryTrainConfig(**e["config"]), e["cv_score"])
                   for e in info["binary"]]
    binary = BinaryModelSet(models, tuple(info["class_names"]), results)
    backbone = meta = None
    if (root / "backbone.ckpt").exists():
        backbone = load_checkpoint(root / "backbone.ckpt")
    if (root / "meta.ckpt").exists():
        net = load_checkpoint(root / "meta.ckpt")
        meta = MetaClassifier(net, net.head.width, info.get("meta_train_macro_f1", 0.0))
    if require_meta and (backbone is None or meta is None):
        raise ValidationError(f"bundle {root} has no trained meta-classifier")
    return StackNetModel(binary, backbone, meta)
