"""Trainable networks: the evolved vision transformer and a dense classifier.

Parameters live in an insertion-ordered ``dict`` (construction order is the
checkpoint order).  Each parameter belongs to one freeze group; frozen groups
receive exactly-zero gradients and are never touched by the optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Literal

import numpy as np

from ..errors import ValidationError
from ..search_space import Chromosome, FixedHyperparams, architecture_to_json
from . import autograd as ag
from .autograd import Tensor

HeadKind = Literal["binary", "multilabel", "multiclass"]


@dataclass(frozen=True)
class Head:
    """Output layer descriptor: 1 sigmoid unit, L sigmoid units, or K-way softmax."""

    kind: HeadKind
    width: int = 1

    def __post_init__(self):
        if self.kind not in ("binary", "multilabel", "multiclass"):
            raise ValidationError(f"unknown head kind {self.kind!r}")
        if self.kind == "binary" and self.width != 1:
            raise ValidationError("binary head has width 1")
        if self.width < 1 or (self.kind == "multiclass" and self.width < 2):
            raise ValidationError(f"invalid head width {self.width} for {self.kind}")

    @classmethod
    def binary(cls) -> Head:
        return cls("binary", 1)

    def to_json(self) -> dict:
        return {"kind": self.kind, "width": self.width}


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Network:
    """Base class: ordered parameters, freeze groups, graph construction."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.group_of: dict[str, str] = {}
        self.frozen: set[str] = set()

    def _add(self, name: str, value: np.ndarray, group: str) -> None:
        self.params[name] = np.ascontiguousarray(value, dtype=self.dtype)
        self.group_of[name] = group

    @property
    def groups(self) -> list[str]:
        return list(dict.fromkeys(self.group_of.values()))

    def is_trainable(self, name: str) -> bool:
        return self.group_of[name] not in self.frozen

    def trainable_mask(self) -> dict[str, bool]:
        return {g: g not in self.frozen for g in self.groups}

    def freeze(self, *groups: str) -> None:
        self.frozen.update(groups)

    def unfreeze_all(self) -> None:
        self.frozen.clear()

    def astype(self, dtype) -> Network:
        clone = self.copy()
        clone.dtype = np.dtype(dtype)
        clone.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return clone

    def copy(self) -> Network:
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone.group_of = dict(self.group_of)
        clone.frozen = set(self.frozen)
        return clone

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    # subclasses implement
    def graph(self, x: np.ndarray, p: dict[str, Tensor], train: bool,
              rng: np.random.Generator | None) -> Tensor:
        raise NotImplementedError

    def config(self) -> dict[str, Any]:
        raise NotImplementedError

    head: Head

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=self.dtype)

    def forward(self, x: np.ndarray, mode: str = "infer",
                rng: np.random.Generator | None = None) -> np.ndarray:
        """Logits for a batch; ``mode`` is ``"train"`` (dropout on) or ``"infer"``."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if mode == "train" and rng is None:
            raise ValueError("train mode needs a random stream for dropout")
        x = self._check_input(x)
        tensors = {k: Tensor(v) for k, v in self.params.items()}
        return self.graph(x, tensors, mode == "train", rng).data

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Sigmoid probabilities (binary: shape (N,)) or softmax rows (multiclass)."""
        logits = self.forward(x, "infer")
        if self.head.kind == "multiclass":
            return ag.softmax_array(logits.astype(np.float64), -1)
        probs = ag.sigmoid_array(logits.astype(np.float64))
        return probs[:, 0] if self.head.kind == "binary" else probs


def _dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not train or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.data.dtype) / keep
    return x * mask


class VisionTransformer(Network):
    """Pre-norm transformer over image patches with a class-token readout.

    Block ``i`` realises layer gene ``i``: ``heads`` attention heads over the
    shared embedding width, a GELU feed-forward of width ``mlp_dim``, and
    dropout ``dropout`` on both residual branches.  The readout passes through
    a final norm, a projection to ``fixed.hidden_dim`` and the head layer.
    """

    def __init__(self, chromosome: Chromosome, fixed: FixedHyperparams, head: Head,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__(dtype)
        self.chromosome = chromosome
        self.fixed = fixed
        self.head = head
        e = fixed.embed_dim
        for i, gene in enumerate(chromosome.layers):
            if e % gene.heads:
                raise ValidationError(
                    f"embed_dim {e} is not divisible by {gene.heads} heads in layer {i}")
        patch_in = fixed.channels * fixed.patch_size ** 2
        tokens = fixed.num_patches + 1
        self._add("patch.w", _uniform(rng, (patch_in, e), patch_in, dtype), "embed")
        self._add("patch.b", np.zeros(e), "embed")
        self._add("cls", _uniform(rng, (1, 1, e), e, dtype), "embed")
        self._add("pos", _uniform(rng, (1, tokens, e), e, dtype), "embed")
        for i, gene in enumerate(chromosome.layers):
            g = f"block{i}"
            self._add(f"{g}.ln1.g", np.ones(e), g)
            self._add(f"{g}.ln1.b", np.zeros(e), g)
            self._add(f"{g}.qkv.w", _uniform(rng, (e, 3 * e), e, dtype), g)
            self._add(f"{g}.qkv.b", np.zeros(3 * e), g)
            self._add(f"{g}.proj.w", _uniform(rng, (e, e), e, dtype), g)
            self._add(f"{g}.proj.b", np.zeros(e), g)
            self._add(f"{g}.ln2.g", np.ones(e), g)
            self._add(f"{g}.ln2.b", np.zeros(e), g)
            self._add(f"{g}.fc1.w", _uniform(rng, (e, gene.mlp_dim), e, dtype), g)
            self._add(f"{g}.fc1.b", np.zeros(gene.mlp_dim), g)
            self._add(f"{g}.fc2.w", _uniform(rng, (gene.mlp_dim, e), gene.mlp_dim, dtype), g)
            self._add(f"{g}.fc2.b", np.zeros(e), g)
        self._add("norm.g", np.ones(e), "head")
        self._add("norm.b", np.zeros(e), "head")
        self._add("hidden.w", _uniform(rng, (e, fixed.hidden_dim), e, dtype), "head")
        self._add("hidden.b", np.zeros(fixed.hidden_dim), "head")
        self._init_classifier(rng)

    def _init_classifier(self, rng: np.random.Generator) -> None:
        h = self.fixed.hidden_dim
        self._add("classifier.w", _uniform(rng, (h, self.head.width), h, self.dtype), "head")
        self._add("classifier.b", np.zeros(self.head.width), "head")

    @property
    def num_blocks(self) -> int:
        return len(self.chromosome.layers)

    def replace_head(self, head: Head, rng: np.random.Generator) -> VisionTransformer:
        """Copy with a freshly initialised final classifier layer."""
        clone = self.copy()
        clone.head = head
        clone._init_classifier(rng)
        return clone

    def config(self) -> dict[str, Any]:
        cfg = architecture_to_json(self.chromosome, self.fixed)
        cfg["head"] = self.head.to_json()
        return cfg

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        f = self.fixed
        expected = (f.channels, f.image_size, f.image_size)
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValidationError(f"expected batch of shape (N, {expected}), got {x.shape}")
        return x

    def patchify(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        p = self.fixed.patch_size
        x = x.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(n, (h // p) * (w // p), c * p * p)

    def graph(self, x, p, train, rng):
        n = x.shape[0]
        e = self.fixed.embed_dim
        tokens = Tensor(self.patchify(x)) @ p["patch.w"] + p["patch.b"]
        cls = p["cls"] + Tensor(np.zeros((n, 1, e), dtype=self.dtype))
        h = ag.concat([cls, tokens], axis=1) + p["pos"]
        s = h.shape[1]
        for i, gene in enumerate(self.chromosome.layers):
            g = f"block{i}"
            nh, dh = gene.heads, e // gene.heads
            y = ag.layer_norm(h, p[f"{g}.ln1.g"], p[f"{g}.ln1.b"])
            qkv = (y @ p[f"{g}.qkv.w"] + p[f"{g}.qkv.b"]).reshape(n, s, 3, nh, dh)
            qkv = qkv.transpose(2, 0, 3, 1, 4)
            q, k, v = qkv[0], qkv[1], qkv[2]
            att = ag.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)))
            y = (att @ v).transpose(0, 2, 1, 3).reshape(n, s, e)
            y = y @ p[f"{g}.proj.w"] + p[f"{g}.proj.b"]
            h = h + _dropout(y, gene.dropout, train, rng)
            y = ag.layer_norm(h, p[f"{g}.ln2.g"], p[f"{g}.ln2.b"])
            y = ag.gelu(y @ p[f"{g}.fc1.w"] + p[f"{g}.fc1.b"])
            y = y @ p[f"{g}.fc2.w"] + p[f"{g}.fc2.b"]
            h = h + _dropout(y, gene.dropout, train, rng)
        y = ag.layer_norm(h[:, 0], p["norm.g"], p["norm.b"])
        y = ag.gelu(y @ p["hidden.w"] + p["hidden.b"])
        return y @ p["classifier.w"] + p["classifier.b"]


class MLPClassifier(Network):
    """Fully connected ReLU stack over standardized feature vectors.

    Input standardization statistics are stored as a frozen parameter group
    (``"input"``) so they travel with checkpoints.
    """

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int,
                 rng: np.random.Generator, dtype=np.float32, head_kind: HeadKind = "multiclass"):
        super().__init__(dtype)
        if in_dim < 1 or out_dim < 1 or any(w < 1 for w in hidden):
            raise ValidationError("layer widths must be positive")
        self.in_dim = int(in_dim)
        self.hidden = tuple(int(w) for w in hidden)
        self.head = Head(head_kind, out_dim)
        self._add("input.mean", np.zeros(in_dim), "input")
        self._add("input.scale", np.ones(in_dim), "input")
        widths = (self.in_dim,) + self.hidden + (out_dim,)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            group = "head" if i == len(widths) - 2 else f"dense{i}"
            self._add(f"dense{i}.w", _uniform(rng, (a, b), a, dtype), group)
            self._add(f"dense{i}.b", np.zeros(b), group)
        self.frozen.add("input")

    def set_standardization(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        self.params["input.mean"] = x.mean(axis=0).astype(self.dtype)
        self.params["input.scale"] = (1.0 / np.where(std > 1e-8, std, 1.0)).astype(self.dtype)

    def config(self) -> dict[str, Any]:
        return {"in_dim": self.in_dim, "hidden": list(self.hidden), "head": self.head.to_json()}

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValidationError(f"expected (N, {self.in_dim}) features, got {x.shape}")
        return x

    def graph(self, x, p, train, rng):
        h = (Tensor(x) - p["input.mean"]) * p["input.scale"]
        n_layers = len(self.hidden) + 1
        for i in range(n_layers):
            h = h @ p[f"dense{i}.w"] + p[f"dense{i}.b"]
            if i < n_layers - 1:
                h = ag.relu(h)
        return h


def build_model(c: Chromosome, fixed: FixedHyperparams, head: Head,
                rng: np.random.Generator, dtype=np.float32) -> VisionTransformer:
    return VisionTransformer(c, fixed, head, rng, dtype)


def set_unfreeze_depth(model: VisionTransformer, depth: int) -> VisionTransformer:
    """Train the head plus the top ``depth`` blocks; ``blocks + 1`` trains everything."""
    n = model.num_blocks
    if not 0 <= depth <= n + 1:
        raise ValidationError(f"unfreeze depth {depth} outside [0, {n + 1}]")
    frozen = {f"block{i}" for i in range(n - min(depth, n))}
    if depth <= n:
        frozen.add("embed")
    model.frozen = frozen
    return model
