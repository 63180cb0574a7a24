"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"ETNN"            magic
    uint32             format version (1)
    uint32             length of the architecture JSON in bytes
    bytes              architecture JSON, UTF-8
    float32[...]       parameter tensors, in the order listed in the JSON

The JSON holds ``kind`` ("vit", "mlp" or "backbone"), the model ``config``
and ``tensors``: a list of ``[name, shape]`` pairs in construction order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from ..search_space import architecture_from_json
from .backbone import Backbone
from .models import Head, MLPClassifier, Network, VisionTransformer

MAGIC = b"ETNN"
VERSION = 1


def _kind(model) -> str:
    if isinstance(model, VisionTransformer):
        return "vit"
    if isinstance(model, MLPClassifier):
        return "mlp"
    if isinstance(model, Backbone):
        return "backbone"
    raise CheckpointError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model: Network | Backbone, path: str | os.PathLike) -> None:
    header = {
        "kind": _kind(model),
        "config": model.config(),
        "tensors": [[name, list(v.shape)] for name, v in model.params.items()],
    }
    if isinstance(model, Network):
        header["frozen"] = sorted(model.frozen)
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for value in model.params.values():
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def load_checkpoint(path: str | os.PathLike) -> Network | Backbone:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, length = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[12:12 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    kind, cfg = header["kind"], header["config"]
    dummy = np.random.default_rng(0)
    if kind == "vit":
        chromosome, fixed = architecture_from_json(cfg)
        head = Head(**cfg["head"])
        model = VisionTransformer(chromosome, fixed, head, dummy)
    elif kind == "mlp":
        model = MLPClassifier(cfg["in_dim"], tuple(cfg["hidden"]), cfg["head"]["width"], dummy,
                              head_kind=cfg["head"]["kind"])
    elif kind == "backbone":
        model = Backbone(cfg["in_channels"], tuple(cfg["widths"]), cfg["seed"],
                         cfg["kernel"], cfg["stride"])
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")

    offset = 12 + length
    params = {}
    for name, shape in header["tensors"]:
        if name not in model.params or tuple(model.params[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name} {shape} does not fit the architecture")
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {name}")
        params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset = end
    if offset != len(raw) or set(params) != set(model.params):
        raise CheckpointError(f"{path}: tensor payload does not match the header")
    if isinstance(model, Backbone):
        for name, value in params.items():
            if not np.array_equal(value, model.params[name]):
                raise CheckpointError(f"{path}: backbone weights differ from seed {model.seed}")
        return model
    model.params = {k: params[k].astype(np.float32) for k in model.params}
    model.frozen = set(header.get("frozen", []))
    return model
