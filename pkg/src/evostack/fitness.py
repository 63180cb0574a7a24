"""Fitness evaluators: a synthetic landscape and k-fold cross-validated training."""

from __future__ import annotations

import abc
import logging
import math
from dataclasses import dataclass

import numpy as np

from ._random import derive_rng
from .dataset import TensorDataset
from .errors import TrainingDivergence, ValidationError
from .metrics import (ConfusionCounts, f1_score, macro_f1, per_class_counts, per_column_counts,
                      stratified_kfold)
from .nn.models import Head, build_model
from .nn.training import LossSpec, TrainState, decisions, default_loss_for, train
from .search_space import Chromosome, FixedHyperparams, canonical_encode

logger = logging.getLogger(__name__)


class FitnessEvaluator(abc.ABC):
    """Maps a chromosome to a fitness in [0, 1], deterministically for a fixed seed."""

    seed: int = 0

    @abc.abstractmethod
    def evaluate(self, chromosome: Chromosome) -> float:
        ...

    def __call__(self, chromosome: Chromosome) -> float:
        return self.evaluate(chromosome)


@dataclass(frozen=True)
class SyntheticLandscape:
    target: Chromosome
    length_weight: float = 1.0
    gene_weight: float = 1.0

    def __post_init__(self):
        if self.length_weight < 0 or self.gene_weight < 0:
            raise ValidationError("landscape weights must be non-negative")
        if self.gene_weight == 0:
            # Without a gene term every same-length chromosome would score 1.
            raise ValidationError("gene_weight must be positive for a unique optimum")


def gene_distance(c: Chromosome, target: Chromosome) -> int:
    """Field mismatches over the aligned prefix plus all fields of unmatched genes."""
    shared = min(len(c), len(target))
    d = 0
    for a, b in zip(c.layers[:shared], target.layers[:shared]):
        fa, fb = dict(a.fields()), dict(b.fields())
        d += sum(fa.get(name) != fb.get(name) for name in fa.keys() | fb.keys())
    longer = c if len(c) > len(target) else target
    d += sum(len(g.fields()) for g in longer.layers[shared:])
    return d


def synthetic_fitness(c: Chromosome, land: SyntheticLandscape) -> float:
    distance = (land.length_weight * abs(len(c) - len(land.target))
                + land.gene_weight * gene_distance(c, land.target))
    return math.exp(-distance)


class SyntheticEvaluator(FitnessEvaluator):
    def __init__(self, landscape: SyntheticLandscape, seed: int = 0):
        self.landscape = landscape
        self.seed = seed

    def evaluate(self, chromosome: Chromosome) -> float:
        return synthetic_fitness(chromosome, self.landscape)


@dataclass(frozen=True)
class CvTrainConfig:
    folds: int = 5
    epochs: int = 5
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    task_head: Head = Head("multiclass", 2)

    def __post_init__(self):
        if self.folds < 2:
            raise ValidationError("folds must be at least 2")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValidationError("need learning_rate > 0 and momentum in [0, 1)")


def head_for(data: TensorDataset) -> Head:
    if data.target_kind == "binary":
        return Head.binary()
    if data.target_kind == "multilabel":
        return Head("multilabel", data.label_width)
    return Head("multiclass", data.label_width)


def score_predictions(head: Head, y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Macro-F1 over label columns or classes; positive-class F1 for binary heads."""
    if head.kind == "binary":
        return f1_score(ConfusionCounts.from_predictions(y_true, y_pred))
    if head.kind == "multilabel":
        return macro_f1(per_column_counts(y_true, y_pred))
    return macro_f1(per_class_counts(y_true, y_pred, head.width))


def _check_compatible(data: TensorDataset, cfg: CvTrainConfig) -> None:
    head = cfg.task_head
    want = head_for(data)
    if (head.kind, head.width) != (want.kind, want.width):
        raise ValidationError(f"task head {head} does not match {data.target_kind} targets "
                              f"of width {data.label_width}")
    if cfg.folds > len(data):
        raise ValidationError(f"{cfg.folds} folds for {len(data)} items")


def cv_fitness(c: Chromosome, data: TensorDataset, cfg: CvTrainConfig, *,
               fixed: FixedHyperparams, seed: int = 0, loss: LossSpec | None = None) -> float:
    """Mean held-out F1 over ``cfg.folds`` stratified folds.

    Each fold trains a fresh model from ``c``; weights, dropout masks and batch
    order come from a stream keyed on (seed, canonical key, fold).
    """
    _check_compatible(data, cfg)
    loss = loss or default_loss_for(cfg.task_head.kind)
    key = canonical_encode(c)
    y = data.targets
    assignment = stratified_kfold(data.strata(), cfg.folds, seed)
    scores = []
    for fold, (train_idx, val_idx) in enumerate(assignment.splits()):
        rng = derive_rng(seed, "cv", key, fold)
        model = build_model(c, fixed, cfg.task_head, rng)
        state = TrainState(model, rng)
        try:
            train(state, data.images[train_idx], y[train_idx], loss, epochs=cfg.epochs,
                  learning_rate=cfg.learning_rate, momentum=cfg.momentum,
                  batch_size=cfg.batch_size)
        except TrainingDivergence as exc:
            raise TrainingDivergence(f"training diverged for {key}", fold=fold,
                                     epoch=exc.epoch, batch=exc.batch) from exc
        pred = decisions(model, data.images[val_idx])
        scores.append(score_predictions(cfg.task_head, y[val_idx], pred))
    value = math.fsum(scores) / len(scores)
    logger.debug("cv fitness %s = %.4f (%s)", key, value, ", ".join(f"{s:.3f}" for s in scores))
    return value


class CvEvaluator(FitnessEvaluator):
    def __init__(self, data: TensorDataset, cfg: CvTrainConfig, fixed: FixedHyperparams,
                 seed: int = 0):
        _check_compatible(data, cfg)
        f = fixed
        if data.images.shape[1:] != (f.channels, f.image_size, f.image_size):
            raise ValidationError(f"dataset images {data.images.shape[1:]} do not match "
                                  f"{(f.channels, f.image_size, f.image_size)}")
        self.data = data
        self.cfg = cfg
        self.fixed = fixed
        self.seed = seed

    def evaluate(self, chromosome: Chromosome) -> float:
        return cv_fitness(chromosome, self.data, self.cfg, fixed=self.fixed, seed=self.seed)
