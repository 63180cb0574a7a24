"""Losses, gradients, SGD with momentum, and the minibatch training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from ..errors import TrainingDivergence, ValidationError
from . import autograd as ag
from .autograd import Tensor
from .models import Network

LossKind = Literal["bce", "multilabel-bce", "softmax-ce", "focal"]
LOSS_KINDS = ("bce", "multilabel-bce", "softmax-ce", "focal")


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind
    gamma: float = 2.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValidationError(f"unknown loss {self.kind!r}")
        if self.gamma < 0 or self.alpha <= 0:
            raise ValidationError("focal loss needs gamma >= 0 and alpha > 0")


def default_loss_for(head_kind: str) -> LossSpec:
    return LossSpec({"binary": "bce", "multilabel": "multilabel-bce",
                     "multiclass": "softmax-ce"}[head_kind])


def _sigmoid_targets(logits: Tensor, targets: np.ndarray) -> np.ndarray:
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape != logits.shape:
        raise ValidationError(f"targets of shape {y.shape} do not match logits {logits.shape}")
    return y


def binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean sigmoid cross-entropy over every output element."""
    y = _sigmoid_targets(logits, targets)
    ll = ag.log_sigmoid(logits) * y + ag.log_sigmoid(-logits) * (1.0 - y)
    return -ll.mean()


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    onehot = _onehot(targets, logits)
    return -(ag.log_softmax(logits) * onehot).sum(axis=-1).mean()


def _onehot(targets: np.ndarray, logits: Tensor) -> np.ndarray:
    t = np.asarray(targets).astype(np.int64).reshape(-1)
    n, k = logits.shape
    if t.shape[0] != n or t.min(initial=0) < 0 or t.max(initial=0) >= k:
        raise ValidationError("class targets do not match the logits")
    onehot = np.zeros((n, k), dtype=logits.data.dtype)
    onehot[np.arange(n), t] = 1.0
    return onehot


def focal_loss(logits: Tensor, targets: np.ndarray, *, softmax: bool,
               gamma: float = 2.0, alpha: float = 1.0) -> Tensor:
    """Mean of ``-alpha * (1 - p_t)**gamma * log(p_t)``.

    ``p_t`` is the probability assigned to the true class: the softmax entry of
    the target class, or per output for sigmoid heads.
    """
    if softmax:
        onehot = _onehot(targets, logits)
        log_pt = (ag.log_softmax(logits) * onehot).sum(axis=-1)
    else:
        y = _sigmoid_targets(logits, targets)
        log_pt = ag.log_sigmoid(logits) * y + ag.log_sigmoid(-logits) * (1.0 - y)
    if gamma == 0.0:
        weighted = log_pt
    else:
        weighted = ((1.0 - ag.exp(log_pt)) ** gamma) * log_pt
    return -(weighted * alpha).mean()


def focal_loss_from_probs(pt: np.ndarray, gamma: float = 2.0, alpha: float = 1.0) -> np.ndarray:
    """Elementwise focal loss for true-class probabilities ``pt``."""
    pt = np.asarray(pt, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_pt = np.log(pt)
    out = -alpha * (1.0 - pt) ** gamma * log_pt
    return np.where(pt == 1.0, 0.0, out)


def compute_loss(logits: Tensor, targets: np.ndarray, loss: LossSpec, head_kind: str) -> Tensor:
    if loss.kind == "bce":
        if logits.shape[-1] != 1:
            raise ValidationError("bce needs a single-output head")
        return binary_cross_entropy(logits, targets)
    if loss.kind == "multilabel-bce":
        return binary_cross_entropy(logits, targets)
    if loss.kind == "softmax-ce":
        return softmax_cross_entropy(logits, targets)
    return focal_loss(logits, targets, softmax=head_kind == "multiclass",
                      gamma=loss.gamma, alpha=loss.alpha)


def loss_and_grad(model: Network, batch: np.ndarray, targets: np.ndarray, loss: LossSpec | str,
                  *, train: bool = False, rng: np.random.Generator | None = None,
                  batch_index: int | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Scalar loss and per-parameter gradients; frozen groups get exact zeros."""
    if isinstance(loss, str):
        loss = LossSpec(loss)
    if train and rng is None:
        raise ValueError("train mode needs a random stream for dropout")
    x = model._check_input(batch)
    tensors = {k: Tensor(v, requires_grad=model.is_trainable(k))
               for k, v in model.params.items()}
    logits = model.graph(x, tensors, train, rng)
    value = compute_loss(logits, targets, loss, model.head.kind)
    scalar = float(value.data)
    if not math.isfinite(scalar):
        raise TrainingDivergence("non-finite loss", batch=batch_index)
    value.backward()
    grads = {}
    for name, t in tensors.items():
        if t.grad is None or not t.requires_grad:
            grads[name] = np.zeros_like(model.params[name])
        else:
            grads[name] = t.grad
    return scalar, grads


@dataclass
class TrainState:
    model: Network
    rng: np.random.Generator
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0

    def __post_init__(self):
        for name, value in self.model.params.items():
            self.velocity.setdefault(name, np.zeros_like(value))


def sgd_step(state: TrainState, grads: dict[str, np.ndarray], learning_rate: float,
             momentum: float) -> TrainState:
    """``v = momentum * v + g``; ``p = p - lr * v``, skipping frozen groups."""
    model = state.model
    for name, g in grads.items():
        if not model.is_trainable(name):
            continue
        v = state.velocity[name]
        v *= momentum
        v += g
        model.params[name] -= learning_rate * v
    return state


def train(state: TrainState, x: np.ndarray, y: np.ndarray, loss: LossSpec, *,
          epochs: int, learning_rate: float, momentum: float, batch_size: int,
          unfreeze_schedule: Callable[[Network, int], None] | None = None) -> list[float]:
    """Minibatch SGD for ``epochs`` epochs; returns the mean loss per epoch.

    ``unfreeze_schedule(model, epoch)`` runs at the start of each epoch.
    """
    n = len(x)
    if n == 0:
        raise ValidationError("cannot train on an empty set")
    batch_size = max(1, min(batch_size, n))
    history = []
    for _ in range(epochs):
        if unfreeze_schedule is not None:
            unfreeze_schedule(state.model, state.epoch)
        order = state.rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            try:
                value, grads = loss_and_grad(state.model, x[idx], y[idx], loss, train=True,
                                             rng=state.rng, batch_index=b)
            except TrainingDivergence as exc:
                raise TrainingDivergence("non-finite loss", epoch=state.epoch, batch=b) from exc
            sgd_step(state, grads, learning_rate, momentum)
            total += value * len(idx)
        state.epoch += 1
        history.append(total / n)
    return history


def predict_batched(model: Network, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode logits, evaluated in chunks."""
    outs = [model.forward(x[i:i + batch_size], "infer") for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def decisions(model: Network, x: np.ndarray) -> np.ndarray:
    """Hard predictions: class ids (multiclass) or 0/1 per output (sigmoid heads)."""
    logits = predict_batched(model, x)
    if model.head.kind == "multiclass":
        return logits.argmax(axis=1)
    hard = (logits > 0).astype(np.int64)
    return hard[:, 0] if model.head.kind == "binary" else hard
