"""Fixed-weight four-stage convolutional feature extractor.

Each stage is a 3x3 convolution (stride 2, edge padding) followed by ReLU.
The global average pool of every stage output is concatenated, giving a
feature vector of width ``sum(widths)``.  Weights come from a seed and are
never trained; this stands in for a pretrained multi-scale backbone.
"""

from __future__ import annotations

import math
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ValidationError


class Backbone:
    def __init__(self, in_channels: int, widths: tuple[int, ...] = (16, 32, 64, 128),
                 seed: int = 0, kernel: int = 3, stride: int = 2):
        if len(widths) != 4 or any(w < 1 for w in widths):
            raise ValidationError(f"backbone needs four positive stage widths, got {widths}")
        self.in_channels = int(in_channels)
        self.widths = tuple(int(w) for w in widths)
        self.seed = int(seed)
        self.kernel = kernel
        self.stride = stride
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xBAC4]))
        self.params: dict[str, np.ndarray] = {}
        c_in = self.in_channels
        for i, c_out in enumerate(self.widths):
            fan_in = c_in * kernel * kernel
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel))
            b = rng.uniform(-0.1, 0.1, size=c_out)
            self.params[f"stage{i}.w"] = w.astype(np.float32)
            self.params[f"stage{i}.b"] = b.astype(np.float32)
            c_in = c_out
        for v in self.params.values():
            v.setflags(write=False)

    @property
    def feature_width(self) -> int:
        return sum(self.widths)

    def config(self) -> dict[str, Any]:
        return {"in_channels": self.in_channels, "widths": list(self.widths), "seed": self.seed,
                "kernel": self.kernel, "stride": self.stride}

    def _stage(self, x: np.ndarray, i: int) -> np.ndarray:
        k, s = self.kernel, self.stride
        pad = k // 2
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        out = np.einsum("nchwij,ocij->nohw", win, self.params[f"stage{i}.w"], optimize=True)
        out += self.params[f"stage{i}.b"][None, :, None, None]
        return np.maximum(out, 0.0)

    def stage_outputs(self, batch: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(batch, dtype=np.float32)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValidationError(
                f"expected (N, {self.in_channels}, H, W) images, got {x.shape}")
        outs = []
        for i in range(4):
            x = self._stage(x, i)
            outs.append(x)
        return outs

    def features(self, batch: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Concatenated per-stage global average pools, shape (N, feature_width)."""
        batch = np.asarray(batch, dtype=np.float32)
        rows = []
        for start in range(0, max(len(batch), 1), chunk):
            outs = self.stage_outputs(batch[start:start + chunk])
            rows.append(np.concatenate([o.mean(axis=(2, 3)) for o in outs], axis=1))
        return np.concatenate(rows, axis=0)


def backbone_features(b: Backbone, batch: np.ndarray) -> np.ndarray:
    return b.features(batch)
