"""Labeled image tensors, a synthetic generator, and the on-disk format.

Directory layout::

    manifest.json    {format_version, n, channels, height, width, target_kind,
                      label_width, class_names, checksum}
    images.f32le     N*C*H*W little-endian float32, row-major
    targets.u16le    N little-endian uint16 ("single" and "binary")
    targets.bits     N rows of ceil(label_width / 8) bytes ("multilabel");
                     bit j of a row is bit (7 - j % 8) of byte j // 8

``checksum`` is the hex CRC-32 of ``images.f32le`` followed by the targets
file.  For ``single`` targets ``label_width`` is the class count.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import (ChecksumError, DatasetValidationError, ManifestError, TruncatedFileError,
                     ValidationError)

TargetKind = Literal["single", "binary", "multilabel"]
FORMAT_VERSION = 1
_MANIFEST_KEYS = ("format_version", "n", "channels", "height", "width", "target_kind",
                  "label_width", "class_names", "checksum")


@dataclass(frozen=True, eq=False)
class TensorDataset:
    images: np.ndarray
    targets: np.ndarray
    target_kind: TargetKind = "single"
    label_width: int = 0
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        if images.ndim != 4:
            raise ValidationError(f"images must be N x C x H x W, got shape {images.shape}")
        if self.target_kind not in ("single", "binary", "multilabel"):
            raise ValidationError(f"unknown target kind {self.target_kind!r}")
        targets = np.asarray(self.targets)
        if self.target_kind == "multilabel":
            targets = np.ascontiguousarray(targets, dtype=np.uint8)
            if targets.ndim != 2:
                raise ValidationError("multi-label targets must be a 2-D 0/1 matrix")
            width = targets.shape[1]
            if self.label_width and self.label_width != width:
                raise ValidationError(f"label_width {self.label_width} != target width {width}")
            if targets.size and targets.max() > 1:
                raise ValidationError("multi-label targets must be 0/1")
        else:
            targets = np.ascontiguousarray(targets, dtype=np.int64).reshape(-1)
            if targets.size and targets.min() < 0:
                raise ValidationError("class ids must be non-negative")
            if self.target_kind == "binary":
                if targets.size and targets.max() > 1:
                    raise ValidationError("binary targets must be 0/1")
                width = 1
            else:
                top = int(targets.max()) + 1 if targets.size else 0
                width = self.label_width or max(top, len(self.class_names))
                if top > width:
                    raise DatasetValidationError(
                        f"class count {width} is smaller than label maximum {top - 1} + 1")
        if len(targets) != len(images):
            raise ValidationError(f"{len(images)} images but {len(targets)} targets")
        if images.size and (np.isnan(images).any() or images.min() < 0 or images.max() > 1):
            raise ValidationError("image values must lie in [0, 1]")
        names = tuple(str(s) for s in self.class_names)
        expected_names = 2 if self.target_kind == "binary" else width
        if names and len(names) != expected_names:
            raise DatasetValidationError(f"{len(names)} class names for {expected_names} labels")
        images.setflags(write=False)
        targets.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "label_width", int(width))
        object.__setattr__(self, "class_names", names)

    def __len__(self) -> int:
        return len(self.images)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorDataset):
            return NotImplemented
        return (self.target_kind == other.target_kind and self.label_width == other.label_width
                and self.class_names == other.class_names
                and self.images.shape == other.images.shape
                and self.images.tobytes() == other.images.tobytes()
                and self.targets.shape == other.targets.shape
                and np.array_equal(self.targets, other.targets))

    @property
    def num_classes(self) -> int:
        return 2 if self.target_kind == "binary" else self.label_width

    def subset(self, indices: Sequence[int]) -> TensorDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return TensorDataset(self.images[idx], self.targets[idx], self.target_kind,
                             self.label_width, self.class_names)

    def strata(self) -> np.ndarray:
        """One class id per item, for stratified splitting."""
        if self.target_kind == "multilabel":
            from .metrics import multilabel_strata
            return multilabel_strata(self.targets)
        return self.targets

    def class_name(self, k: int) -> str:
        return self.class_names[k] if self.class_names else f"class_{k}"


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 6
    items_per_class: int | tuple[int, ...] = 60
    image_size: int = 32
    channels: int = 3
    noise_level: float = 0.1
    seed: int = 0
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.classes < 2:
            raise ValidationError("need at least two classes")
        counts = self.counts()
        if len(counts) != self.classes or min(counts) < 1:
            raise ValidationError(f"need one positive item count per class, got {counts}")
        if self.image_size < 4 or self.channels < 1:
            raise ValidationError("image_size must be >= 4 and channels >= 1")
        if not 0.0 <= self.noise_level < 1.0:
            raise ValidationError("noise_level must lie in [0, 1)")
        if self.class_names and len(self.class_names) != self.classes:
            raise ValidationError("class_names must have one entry per class")

    def counts(self) -> tuple[int, ...]:
        if isinstance(self.items_per_class, (int, np.integer)):
            return (int(self.items_per_class),) * self.classes
        return tuple(int(c) for c in self.items_per_class)


def _render(k: int, n_classes: int, size: int, channels: int, noise: float,
            rng: np.random.Generator) -> np.ndarray:
    """One image of class ``k``.

    Class families differ in base intensity (rising with ``k``), stripe
    frequency (``1 + k`` cycles, orientation alternating with ``k``), blob
    count (``1 + k % 3``) and channel tint.  Per-item variation comes from
    stripe phase, blob placement and a small brightness jitter.
    """
    yy, xx = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
    base = 0.2 + 0.45 * k / (n_classes - 1)
    coord = xx if k % 2 == 0 else yy
    stripes = 0.12 * np.sin(2 * np.pi * (1 + k) * coord + rng.uniform(0, 2 * np.pi))
    blobs = np.zeros((size, size))
    for _ in range(1 + k % 3):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        blobs += 0.15 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.08 ** 2))
    plane = base + stripes + blobs + rng.uniform(-0.02, 0.02)
    tint = 1.0 + 0.15 * np.cos(2 * np.pi * (k / n_classes + np.arange(channels) / max(channels, 1)))
    img = plane[None, :, :] * tint[:, None, None]
    img = img + noise * rng.standard_normal((channels, size, size))
    return np.clip(img, 0.0, 1.0)


def synth_generate(spec: SynthSpec) -> TensorDataset:
    """Procedural class-conditional textures; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFF,
                                                        spec.seed >> 32, 0x5A17]))
    images, labels = [], []
    for k, count in enumerate(spec.counts()):
        for _ in range(count):
            images.append(_render(k, spec.classes, spec.image_size, spec.channels,
                                  spec.noise_level, rng))
            labels.append(k)
    names = spec.class_names or tuple(f"class_{k}" for k in range(spec.classes))
    return TensorDataset(np.stack(images).astype(np.float32), np.array(labels), "single",
                         spec.classes, names)


def _target_bytes(data: TensorDataset) -> tuple[str, bytes]:
    if data.target_kind == "multilabel":
        packed = np.packbits(data.targets.astype(np.uint8), axis=1, bitorder="big")
        return "targets.bits", packed.tobytes()
    if data.targets.size and data.targets.max() > 0xFFFF:
        raise ValidationError("class ids above 65535 do not fit the u16 format")
    return "targets.u16le", data.targets.astype("<u2").tobytes()


def save(data: TensorDataset, directory: str | os.PathLike) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    image_bytes = data.images.astype("<f4").tobytes()
    target_name, target_bytes = _target_bytes(data)
    checksum = zlib.crc32(target_bytes, zlib.crc32(image_bytes)) & 0xFFFFFFFF
    n, c, h, w = data.images.shape
    manifest = {
        "format_version": FORMAT_VERSION,
        "n": n, "channels": c, "height": h, "width": w,
        "target_kind": data.target_kind,
        "label_width": data.label_width,
        "class_names": list(data.class_names),
        "checksum": f"{checksum:08x}",
    }
    (out / "images.f32le").write_bytes(image_bytes)
    (out / target_name).write_bytes(target_bytes)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _read_manifest(path: Path) -> dict:
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"{path} does not exist") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(manifest, dict):
        raise ManifestError(f"{path} must hold a JSON object")
    missing = [k for k in _MANIFEST_KEYS if k not in manifest]
    extra = [k for k in manifest if k not in _MANIFEST_KEYS]
    if missing or extra:
        raise ManifestError(f"{path}: missing keys {missing}, unexpected keys {extra}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise ManifestError(f"unsupported format_version {manifest['format_version']}")
    for key in ("n", "channels", "height", "width", "label_width"):
        value = manifest[key]
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ManifestError(f"manifest field {key} must be a non-negative integer")
    if manifest["target_kind"] not in ("single", "binary", "multilabel"):
        raise ManifestError(f"unknown target_kind {manifest['target_kind']!r}")
    if not isinstance(manifest["class_names"], list):
        raise ManifestError("class_names must be a list")
    if not isinstance(manifest["checksum"], str):
        raise ManifestError("checksum must be a hex string")
    return manifest


def _read_payload(path: Path, expected: int) -> bytes:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise TruncatedFileError(f"{path} is missing") from None
    if len(raw) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return raw


def load(directory: str | os.PathLike) -> TensorDataset:
    root = Path(directory)
    m = _read_manifest(root / "manifest.json")
    n, c, h, w = m["n"], m["channels"], m["height"], m["width"]
    image_bytes = _read_payload(root / "images.f32le", 4 * n * c * h * w)
    if m["target_kind"] == "multilabel":
        row = math.ceil(m["label_width"] / 8)
        target_bytes = _read_payload(root / "targets.bits", n * row)
    else:
        target_bytes = _read_payload(root / "targets.u16le", 2 * n)
    checksum = zlib.crc32(target_bytes, zlib.crc32(image_bytes)) & 0xFFFFFFFF
    if f"{checksum:08x}" != m["checksum"].lower():
        raise ChecksumError(f"checksum mismatch: manifest {m['checksum']}, data {checksum:08x}")

    images = np.frombuffer(image_bytes, dtype="<f4").reshape(n, c, h, w)
    if m["target_kind"] == "multilabel":
        packed = np.frombuffer(target_bytes, dtype=np.uint8).reshape(n, row)
        targets = np.unpackbits(packed, axis=1, count=m["label_width"], bitorder="big")
    else:
        targets = np.frombuffer(target_bytes, dtype="<u2").astype(np.int64)
        if m["target_kind"] == "single" and n:
            top = int(targets.max())
            declared = m["label_width"]
            if top >= declared:
                raise DatasetValidationError(
                    f"manifest declares {declared} classes but the label maximum is {top}")
    names = m["class_names"]
    if names and m["target_kind"] == "single" and len(names) != m["label_width"]:
        raise DatasetValidationError(
            f"manifest lists {len(names)} class names for {m['label_width']} classes")
    return TensorDataset(images.astype(np.float32), targets, m["target_kind"],
                         m["label_width"], tuple(names))


def save_image(image: np.ndarray, path: str | os.PathLike) -> None:
    """Write one C x H x W image as raw little-endian float32."""
    Path(path).write_bytes(np.ascontiguousarray(image, dtype="<f4").tobytes())


def load_image(path: str | os.PathLike, shape: tuple[int, int, int]) -> np.ndarray:
    raw = Path(path).read_bytes()
    expected = 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes for shape {shape}, "
                                 f"found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def split_dataset(data: TensorDataset, fractions: Sequence[float],
                  seed: int) -> list[TensorDataset]:
    """Stratified split into parts of the given relative sizes.

    Each class is shuffled and cut by largest-remainder rounding, so every part
    gets its proportional share of every class (within one item).
    """
    w = np.asarray(fractions, dtype=np.float64)
    if len(w) < 2 or (w <= 0).any():
        raise ValidationError("need at least two positive split fractions")
    w = w / w.sum()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF,
                                                        int(seed) >> 32, 0x5B117]))
    strata = data.strata()
    parts: list[list[np.ndarray]] = [[] for _ in w]
    for cls in np.unique(strata):
        members = rng.permutation(np.flatnonzero(strata == cls))
        raw = len(members) * w
        sizes = np.floor(raw).astype(np.int64)
        sizes[np.argsort(-(raw - sizes), kind="stable")[:len(members) - sizes.sum()]] += 1
        for j, chunk in enumerate(np.split(members, np.cumsum(sizes)[:-1])):
            parts[j].append(chunk)
    return [data.subset(np.sort(np.concatenate(p))) for p in parts]
