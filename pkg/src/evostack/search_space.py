"""Genetic representation of transformer architectures.

A :class:`Chromosome` is a variable-length tuple of :class:`LayerGene`
entries, one per transformer block.  :class:`SearchSpace` holds the legal
values for every gene field plus the fixed (non-evolved) model dimensions.

Canonical keys have the grammar::

    "L" <len> ( "|h" <heads> ",m" <mlp_dim> ",d" <dropout:.3f> ( "," <k> "=" <v> )* ){len}

with extras sorted by key.  Keys double as fitness-cache keys.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from .errors import ContractViolation, ValidationError

Scalar = int | float
Extras = tuple[tuple[str, Scalar], ...]

_EXTRA_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_RESERVED_KEYS = {"h", "m", "d"}


def _as_extras(extra: Mapping[str, Scalar] | Extras | None) -> Extras:
    if not extra:
        return ()
    items = extra.items() if isinstance(extra, Mapping) else extra
    out = []
    for key, value in items:
        if not isinstance(key, str) or not _EXTRA_KEY.match(key) or key in _RESERVED_KEYS:
            raise ValidationError(f"illegal extra gene key {key!r}")
        if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
            raise ValidationError(f"extra gene {key!r} must be a scalar, got {value!r}")
        value = int(value) if isinstance(value, (int, np.integer)) else float(value)
        out.append((key, value))
    out.sort(key=lambda kv: kv[0])
    if len({k for k, _ in out}) != len(out):
        raise ValidationError("duplicate extra gene key")
    return tuple(out)


def quantize_dropout(value: float) -> float:
    """Snap a dropout rate onto the 0.001 grid used by the canonical encoding."""
    return round(float(value) * 1000) / 1000


@dataclass(frozen=True)
class LayerGene:
    heads: int
    mlp_dim: int
    dropout: float
    extra: Extras = ()

    def __post_init__(self):
        object.__setattr__(self, "heads", int(self.heads))
        object.__setattr__(self, "mlp_dim", int(self.mlp_dim))
        object.__setattr__(self, "dropout", quantize_dropout(self.dropout))
        object.__setattr__(self, "extra", _as_extras(self.extra))

    @property
    def extra_dict(self) -> dict[str, Scalar]:
        return dict(self.extra)

    def fields(self) -> tuple[tuple[str, Scalar], ...]:
        """All gene fields in canonical order (core fields, then extras)."""
        return (("heads", self.heads), ("mlp_dim", self.mlp_dim),
                ("dropout", self.dropout)) + self.extra

    def replace(self, name: str, value: Scalar) -> LayerGene:
        if name in ("heads", "mlp_dim", "dropout"):
            kwargs = {"heads": self.heads, "mlp_dim": self.mlp_dim,
                      "dropout": self.dropout, "extra": self.extra}
            kwargs[name] = value
            return LayerGene(**kwargs)
        extra = dict(self.extra)
        if name not in extra:
            raise KeyError(name)
        extra[name] = value
        return LayerGene(self.heads, self.mlp_dim, self.dropout, _as_extras(extra))

    def to_json(self) -> dict[str, Any]:
        return {"heads": self.heads, "mlp_dim": self.mlp_dim,
                "dropout": self.dropout, "extra": dict(self.extra)}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> LayerGene:
        unknown = set(obj) - {"heads", "mlp_dim", "dropout", "extra"}
        if unknown:
            raise ValidationError(f"unknown layer fields {sorted(unknown)}")
        try:
            return cls(obj["heads"], obj["mlp_dim"], obj["dropout"], _as_extras(obj.get("extra")))
        except KeyError as exc:
            raise ValidationError(f"layer is missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class Chromosome:
    layers: tuple[LayerGene, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValidationError("a chromosome needs at least one layer")

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[LayerGene]:
        return iter(self.layers)

    def __getitem__(self, idx):
        return self.layers[idx]

    @classmethod
    def from_tuples(cls, tuples: Sequence[Sequence[Scalar]]) -> Chromosome:
        """Build from ``(heads, mlp_dim, dropout)`` triples."""
        return cls(tuple(LayerGene(*t) for t in tuples))

    @property
    def key(self) -> str:
        return canonical_encode(self)


@dataclass(frozen=True)
class FixedHyperparams:
    hidden_dim: int = 512
    embed_dim: int = 768
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3

    def __post_init__(self):
        for name in ("hidden_dim", "embed_dim", "image_size", "patch_size", "channels"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise ValidationError(
                f"patch_size {self.patch_size} does not divide image_size {self.image_size}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_json(self) -> dict[str, int]:
        return {"hidden_dim": self.hidden_dim, "embed_dim": self.embed_dim,
                "image_size": self.image_size, "patch_size": self.patch_size,
                "channels": self.channels}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> FixedHyperparams:
        unknown = set(obj) - {"hidden_dim", "embed_dim", "image_size", "patch_size", "channels"}
        if unknown:
            raise ValidationError(f"unknown fixed hyperparameters {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class SearchSpace:
    head_choices: tuple[int, ...] = (8, 16)
    mlp_dim_choices: tuple[int, ...] = (2048, 3072, 4096)
    dropout_range: tuple[float, float] = (0.1, 0.3)
    layer_count_range: tuple[int, int] = (6, 12)
    fixed: FixedHyperparams = field(default_factory=FixedHyperparams)
    dropout_step: float = 0.001
    # Declared extra gene dimensions: name -> legal values.
    extra_choices: tuple[tuple[str, tuple[Scalar, ...]], ...] = ()

    def __post_init__(self):
        heads = tuple(sorted({int(h) for h in self.head_choices}))
        mlps = tuple(sorted({int(m) for m in self.mlp_dim_choices}))
        if not heads or not mlps:
            raise ValidationError("choice sets must be non-empty")
        if heads[0] < 1 or mlps[0] < 1:
            raise ValidationError("head and mlp_dim choices must be positive")
        lo, hi = (quantize_dropout(v) for v in self.dropout_range)
        if not 0.0 <= lo <= hi < 1.0:
            raise ValidationError(f"invalid dropout range {self.dropout_range}")
        lmin, lmax = (int(v) for v in self.layer_count_range)
        if lmin < 1 or lmin > lmax:
            raise ValidationError(f"invalid layer count range {self.layer_count_range}")
        step = round(float(self.dropout_step) * 1000)
        if step < 1 or not math.isclose(step / 1000, self.dropout_step):
            raise ValidationError("dropout_step must be a positive multiple of 0.001")
        for h in heads:
            if self.fixed.embed_dim % h:
                raise ValidationError(
                    f"embed_dim {self.fixed.embed_dim} is not divisible by head count {h}")
        extras = dict(self.extra_choices)
        cleaned = []
        for name in sorted(extras):
            _as_extras({name: 0})  # key legality
            values = tuple(sorted(set(_as_extras({name: v})[0][1] for v in extras[name])))
            if not values:
                raise ValidationError(f"extra gene {name!r} has no legal values")
            cleaned.append((name, values))
        object.__setattr__(self, "head_choices", heads)
        object.__setattr__(self, "mlp_dim_choices", mlps)
        object.__setattr__(self, "dropout_range", (lo, hi))
        object.__setattr__(self, "layer_count_range", (lmin, lmax))
        object.__setattr__(self, "extra_choices", tuple(cleaned))

    @property
    def min_layers(self) -> int:
        return self.layer_count_range[0]

    @property
    def max_layers(self) -> int:
        return self.layer_count_range[1]

    def dropout_grid(self) -> np.ndarray:
        """All representable dropout values, in thousandths."""
        lo, hi = (round(v * 1000) for v in self.dropout_range)
        step = round(self.dropout_step * 1000)
        return np.arange(lo, hi + 1, step, dtype=np.int64)

    def field_domain(self, name: str) -> tuple[Scalar, ...]:
        if name == "heads":
            return self.head_choices
        if name == "mlp_dim":
            return self.mlp_dim_choices
        if name == "dropout":
            return tuple(int(v) / 1000 for v in self.dropout_grid())
        return dict(self.extra_choices)[name]

    def field_names(self) -> tuple[str, ...]:
        return ("heads", "mlp_dim", "dropout") + tuple(n for n, _ in self.extra_choices)

    def gene_count(self) -> int:
        """Number of distinct layer genes in this space."""
        return math.prod(len(self.field_domain(n)) for n in self.field_names())

    def gene_violations(self, gene: LayerGene) -> list[str]:
        problems = []
        if gene.heads not in self.head_choices:
            problems.append(f"heads {gene.heads} not in {self.head_choices}")
        if gene.mlp_dim not in self.mlp_dim_choices:
            problems.append(f"mlp_dim {gene.mlp_dim} not in {self.mlp_dim_choices}")
        lo, hi = self.dropout_range
        if not lo <= gene.dropout <= hi:
            problems.append(f"dropout {gene.dropout} outside [{lo}, {hi}]")
        declared = dict(self.extra_choices)
        got = dict(gene.extra)
        if set(got) != set(declared):
            problems.append(f"extra keys {sorted(got)} != declared {sorted(declared)}")
        else:
            for name, value in got.items():
                if value not in declared[name]:
                    problems.append(f"extra {name}={value} not in {declared[name]}")
        return problems

    def violations(self, c: Chromosome) -> list[str]:
        problems = []
        if not self.min_layers <= len(c) <= self.max_layers:
            problems.append(f"length {len(c)} outside {self.layer_count_range}")
        for i, gene in enumerate(c.layers):
            problems.extend(f"layer {i}: {p}" for p in self.gene_violations(gene))
        return problems

    def contains(self, c: Chromosome) -> bool:
        return not self.violations(c)

    def validate(self, c: Chromosome) -> Chromosome:
        problems = self.violations(c)
        if problems:
            raise ContractViolation("chromosome outside search space: " + "; ".join(problems))
        return c

    def to_json(self) -> dict[str, Any]:
        return {
            "head_choices": list(self.head_choices),
            "mlp_dim_choices": list(self.mlp_dim_choices),
            "dropout_range": list(self.dropout_range),
            "layer_count_range": list(self.layer_count_range),
            "dropout_step": self.dropout_step,
            "extra_choices": {n: list(v) for n, v in self.extra_choices},
            "fixed": self.fixed.to_json(),
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> SearchSpace:
        allowed = {"head_choices", "mlp_dim_choices", "dropout_range", "layer_count_range",
                   "dropout_step", "extra_choices", "fixed"}
        unknown = set(obj) - allowed
        if unknown:
            raise ValidationError(f"unknown search space keys {sorted(unknown)}")
        kwargs = dict(obj)
        if "fixed" in kwargs:
            kwargs["fixed"] = FixedHyperparams.from_json(kwargs["fixed"])
        for name in ("head_choices", "mlp_dim_choices", "dropout_range", "layer_count_range"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        if "extra_choices" in kwargs:
            kwargs["extra_choices"] = tuple(
                (n, tuple(v)) for n, v in dict(kwargs["extra_choices"]).items())
        return cls(**kwargs)


@dataclass(frozen=True)
class Individual:
    chromosome: Chromosome
    fitness: float | None = None

    def __post_init__(self):
        if self.fitness is not None:
            f = float(self.fitness)
            if not 0.0 <= f <= 1.0:
                raise ContractViolation(f"fitness {f} outside [0, 1]")
            object.__setattr__(self, "fitness", f)

    @property
    def key(self) -> str:
        return canonical_encode(self.chromosome)

    def with_fitness(self, fitness: float) -> Individual:
        return Individual(self.chromosome, fitness)


def random_gene(space: SearchSpace, rng: np.random.Generator) -> LayerGene:
    heads = space.head_choices[rng.integers(len(space.head_choices))]
    mlp = space.mlp_dim_choices[rng.integers(len(space.mlp_dim_choices))]
    grid = space.dropout_grid()
    dropout = int(grid[rng.integers(len(grid))]) / 1000
    extra = tuple((name, values[rng.integers(len(values))])
                  for name, values in space.extra_choices)
    return LayerGene(heads, mlp, dropout, extra)


def random_chromosome(space: SearchSpace, rng: np.random.Generator) -> Chromosome:
    n = int(rng.integers(space.min_layers, space.max_layers + 1))
    return Chromosome(tuple(random_gene(space, rng) for _ in range(n)))


def _format_scalar(value: Scalar) -> str:
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def _parse_scalar(text: str) -> Scalar:
    if re.fullmatch(r"-?\d+", text):
        return int(text)
    return float(text)


def canonical_encode(c: Chromosome) -> str:
    parts = [f"L{len(c.layers)}"]
    for gene in c.layers:
        token = f"h{gene.heads},m{gene.mlp_dim},d{gene.dropout:.3f}"
        for key, value in gene.extra:
            token += f",{key}={_format_scalar(value)}"
        parts.append(token)
    return "|".join(parts)


_GENE = re.compile(r"^h(\d+),m(\d+),d(\d+\.\d{3})((?:,[A-Za-z_][A-Za-z0-9_]*=[^,|=]+)*)$")


def canonical_decode(key: str) -> Chromosome:
    """Inverse of :func:`canonical_encode`."""
    parts = key.split("|")
    head = parts[0]
    if not re.fullmatch(r"L\d+", head):
        raise ValidationError(f"malformed architecture key {key!r}")
    n = int(head[1:])
    if n != len(parts) - 1:
        raise ValidationError(f"key declares {n} layers but has {len(parts) - 1}")
    layers = []
    for token in parts[1:]:
        m = _GENE.match(token)
        if not m:
            raise ValidationError(f"malformed gene token {token!r}")
        extra = []
        if m.group(4):
            for item in m.group(4)[1:].split(","):
                k, v = item.split("=")
                extra.append((k, _parse_scalar(v)))
        layers.append(LayerGene(int(m.group(1)), int(m.group(2)), float(m.group(3)), tuple(extra)))
    return Chromosome(tuple(layers))


def architecture_to_json(c: Chromosome, fixed: FixedHyperparams) -> dict[str, Any]:
    return {"layers": [g.to_json() for g in c.layers], "fixed": fixed.to_json()}


def architecture_from_json(obj: Mapping[str, Any]) -> tuple[Chromosome, FixedHyperparams]:
    if not isinstance(obj, Mapping) or "layers" not in obj or "fixed" not in obj:
        raise ValidationError("architecture JSON needs 'layers' and 'fixed'")
    layers = tuple(LayerGene.from_json(layer) for layer in obj["layers"])
    return Chromosome(layers), FixedHyperparams.from_json(obj["fixed"])


def save_architecture(path, c: Chromosome, fixed: FixedHyperparams) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(architecture_to_json(c, fixed), fh, indent=2)
        fh.write("\n")


def load_architecture(path) -> tuple[Chromosome, FixedHyperparams]:
    with open(path, encoding="utf-8") as fh:
        return architecture_from_json(json.load(fh))


def enumerate_chromosomes(space: SearchSpace) -> Iterator[Chromosome]:
    """Every chromosome in ``space``; only sensible for tiny spaces."""
    import itertools

    names = space.field_names()
    domains = [space.field_domain(n) for n in names]
    genes = []
    for values in itertools.product(*domains):
        extra = tuple(zip(names[3:], values[3:]))
        genes.append(LayerGene(values[0], values[1], values[2], extra))
    for n in range(space.min_layers, space.max_layers + 1):
        for combo in itertools.product(genes, repeat=n):
            yield Chromosome(combo)
