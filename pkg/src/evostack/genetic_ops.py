"""Selection, crossover, mutation, and elitism over chromosomes."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation, ValidationError
from .search_space import Chromosome, Individual, SearchSpace, random_gene


class MutationKind(enum.Enum):
    ADD = "add"
    REMOVE = "remove"
    MODIFY = "modify"


@dataclass(frozen=True)
class OperatorConfig:
    p_cross: float = 0.8
    p_mutate: float = 0.2
    # Probabilities of (add, remove, modify).
    mutation_type_probs: tuple[float, float, float] = (0.7, 0.2, 0.1)
    tournament_size: int = 2

    def __post_init__(self):
        for name in ("p_cross", "p_mutate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")
        probs = tuple(float(p) for p in self.mutation_type_probs)
        if len(probs) != 3 or any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValidationError(f"mutation_type_probs must be 3 probabilities, got {probs}")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValidationError(f"mutation_type_probs must sum to 1, got {sum(probs)}")
        if int(self.tournament_size) < 2:
            raise ValidationError("tournament_size must be at least 2")
        object.__setattr__(self, "mutation_type_probs", probs)


def _fitness_of(ind: Individual) -> float:
    if ind.fitness is None:
        raise ContractViolation(f"individual {ind.key} has no fitness")
    return ind.fitness


def tournament_select(population: Sequence[Individual], cfg: OperatorConfig,
                      rng: np.random.Generator) -> Individual:
    """Best of ``tournament_size`` distinct uniform draws.

    Ties go to the contestant drawn first, which keeps selection uniform over
    an equal-fitness population.
    """
    if not population:
        raise ContractViolation("tournament over an empty population")
    fitness = [_fitness_of(ind) for ind in population]
    if cfg.tournament_size > len(population):
        raise ContractViolation(
            f"tournament_size {cfg.tournament_size} exceeds population {len(population)}")
    drawn = rng.choice(len(population), size=cfg.tournament_size, replace=False)
    winner = int(drawn[0])
    for idx in drawn[1:]:
        if fitness[idx] > fitness[winner]:
            winner = int(idx)
    return population[winner]


def feasible_cuts(len1: int, len2: int, space: SearchSpace) -> list[tuple[int, int]]:
    """Cut pairs whose offspring lengths both stay within the space."""
    lo, hi = space.layer_count_range
    cuts = []
    for k1 in range(1, len1):
        for k2 in range(1, len2):
            if lo <= k1 + len2 - k2 <= hi and lo <= k2 + len1 - k1 <= hi:
                cuts.append((k1, k2))
    return cuts


def crossover_at(p1: Chromosome, p2: Chromosome, k1: int, k2: int) -> tuple[Chromosome, Chromosome]:
    return (Chromosome(p1.layers[:k1] + p2.layers[k2:]),
            Chromosome(p2.layers[:k2] + p1.layers[k1:]))


def single_point_crossover(p1: Chromosome, p2: Chromosome, space: SearchSpace,
                           rng: np.random.Generator) -> tuple[Chromosome, Chromosome]:
    cuts = feasible_cuts(len(p1), len(p2), space)
    if not cuts:
        return p1, p2
    k1, k2 = cuts[int(rng.integers(len(cuts)))]
    return crossover_at(p1, p2, k1, k2)


def _modify(c: Chromosome, space: SearchSpace, rng: np.random.Generator) -> Chromosome:
    pos = int(rng.integers(len(c)))
    gene = c.layers[pos]
    mutable = [n for n in space.field_names() if len(space.field_domain(n)) > 1]
    if not mutable:
        return c
    name = mutable[int(rng.integers(len(mutable)))]
    current = dict(gene.fields())[name]
    # Sampling from the domain minus the current value is the limit of
    # resample-until-changed, without a retry cap.
    options = [v for v in space.field_domain(name) if v != current]
    value = options[int(rng.integers(len(options)))]
    layers = list(c.layers)
    layers[pos] = gene.replace(name, value)
    return Chromosome(tuple(layers))


def mutate_with_kind(c: Chromosome, space: SearchSpace, cfg: OperatorConfig,
                     rng: np.random.Generator) -> tuple[Chromosome, MutationKind]:
    """Apply one edit; returns the edit actually performed."""
    draw = rng.choice(3, p=cfg.mutation_type_probs)
    kind = (MutationKind.ADD, MutationKind.REMOVE, MutationKind.MODIFY)[int(draw)]
    if kind is MutationKind.ADD and len(c) >= space.max_layers:
        kind = MutationKind.MODIFY
    elif kind is MutationKind.REMOVE and len(c) <= space.min_layers:
        kind = MutationKind.MODIFY

    if kind is MutationKind.ADD:
        pos = int(rng.integers(len(c) + 1))
        layers = c.layers[:pos] + (random_gene(space, rng),) + c.layers[pos:]
        return Chromosome(layers), kind
    if kind is MutationKind.REMOVE:
        pos = int(rng.integers(len(c)))
        return Chromosome(c.layers[:pos] + c.layers[pos + 1:]), kind
    return _modify(c, space, rng), kind


def mutate(c: Chromosome, space: SearchSpace, cfg: OperatorConfig,
           rng: np.random.Generator) -> Chromosome:
    return mutate_with_kind(c, space, cfg, rng)[0]


def roulette_select(pool: Sequence[Individual], n: int,
                    rng: np.random.Generator) -> list[Individual]:
    """Fitness-proportional sampling with replacement (uniform if all zero)."""
    if not pool:
        raise ContractViolation("roulette selection over an empty pool")
    if n < 1:
        raise ContractViolation("must select at least one individual")
    fitness = np.array([_fitness_of(ind) for ind in pool], dtype=np.float64)
    if (fitness < 0).any():
        raise ContractViolation("roulette selection needs non-negative fitness")
    total = math.fsum(fitness)
    probs = fitness / total if total > 0 else np.full(len(pool), 1.0 / len(pool))
    picks = rng.choice(len(pool), size=n, replace=True, p=probs)
    return [pool[int(i)] for i in picks]


def apply_elitism(next_gen: Sequence[Individual], best: Individual) -> list[Individual]:
    """Make sure ``best`` survives by displacing the weakest individual."""
    if not next_gen:
        raise ContractViolation("elitism over an empty generation")
    _fitness_of(best)
    out = list(next_gen)
    best_key = best.key
    if any(ind.key == best_key for ind in out):
        return out
    fitness = [_fitness_of(ind) for ind in out]
    worst = min(range(len(out)), key=lambda i: (fitness[i], -i))
    out[worst] = best
    return out
