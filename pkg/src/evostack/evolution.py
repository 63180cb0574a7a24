"""The generational loop: init, offspring, cached evaluation, selection, elitism."""

from __future__ import annotations

import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable, Sequence

from ._random import derive_rng
from .errors import EvaluationError, ValidationError
from .genetic_ops import (OperatorConfig, apply_elitism, mutate, roulette_select,
                          single_point_crossover, tournament_select)
from .search_space import (Chromosome, Individual, SearchSpace, architecture_to_json,
                           canonical_encode, random_chromosome)

if TYPE_CHECKING:
    from .fitness import FitnessEvaluator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvolutionConfig:
    max_gens: int = 20
    pop_size: int = 6
    operator_config: OperatorConfig = field(default_factory=OperatorConfig)
    seed: int = 0
    parallel_evaluations: int = 1

    def __post_init__(self):
        if int(self.max_gens) < 1:
            raise ValidationError(f"max_gens must be at least 1, got {self.max_gens}")
        if int(self.pop_size) < 2:
            raise ValidationError(f"pop_size must be at least 2, got {self.pop_size}")
        if int(self.parallel_evaluations) < 1:
            raise ValidationError("parallel_evaluations must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        if self.operator_config.tournament_size > self.pop_size:
            raise ValidationError("tournament_size exceeds pop_size")

    def to_json(self) -> dict:
        return {"max_gens": self.max_gens, "pop_size": self.pop_size,
                "operator_config": {
                    "p_cross": self.operator_config.p_cross,
                    "p_mutate": self.operator_config.p_mutate,
                    "mutation_type_probs": list(self.operator_config.mutation_type_probs),
                    "tournament_size": self.operator_config.tournament_size},
                "seed": self.seed, "parallel_evaluations": self.parallel_evaluations}


class FitnessCache:
    """Thread-safe map from canonical key to fitness, with hit/miss counters."""

    def __init__(self, entries: dict[str, float] | None = None):
        self._entries: dict[str, float] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        for key, value in (entries or {}).items():
            self.put(key, value)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        with self._lock:
            return key in self._entries

    @property
    def entries(self) -> dict[str, float]:
        with self._lock:
            return dict(self._entries)

    def lookup(self, key: str) -> float | None:
        """Counted lookup: every call increments exactly one of hits/misses."""
        with self._lock:
            value = self._entries.get(key)
            if value is None:
                self.misses += 1
            else:
                self.hits += 1
            return value

    def record_hit(self) -> None:
        with self._lock:
            self.hits += 1

    def put(self, key: str, value: float) -> None:
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"cached fitness {value} outside [0, 1] for {key}")
        with self._lock:
            self._entries[key] = value

    def save(self, path: str | os.PathLike) -> None:
        with self._lock:
            data = dict(sorted(self._entries.items()))
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(json.dumps(data, indent=0) + "\n", encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> FitnessCache:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: cache file must hold a JSON object")
        return cls({str(k): float(v) for k, v in data.items()})


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    best_fitness: float
    mean_fitness: float
    evaluations_run: int
    cache_hits: int
    best_key: str

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=True)


def evaluate_population(pop: Sequence[Individual | Chromosome], evaluator: FitnessEvaluator,
                        cache: FitnessCache, *, workers: int = 1) -> list[Individual]:
    """Attach fitness to every individual, calling the evaluator once per new key.

    Repeated chromosomes inside ``pop`` count as cache hits after their first
    occurrence.  With ``workers > 1`` distinct misses are evaluated on a thread
    pool; results do not depend on scheduling as long as the evaluator derives
    its randomness from the chromosome.
    """
    chromosomes = [p.chromosome if isinstance(p, Individual) else p for p in pop]
    keys = [canonical_encode(c) for c in chromosomes]
    known: dict[str, float] = {}
    pending: dict[str, Chromosome] = {}
    for key, chrom in zip(keys, chromosomes):
        if key in known or key in pending:
            cache.record_hit()
            continue
        value = cache.lookup(key)
        if value is None:
            pending[key] = chrom
        else:
            known[key] = value

    def run(item: tuple[str, Chromosome]) -> tuple[str, float]:
        key, chrom = item
        try:
            value = float(evaluator.evaluate(chrom))
        except Exception as exc:
            raise EvaluationError(key, exc) from exc
        if not (math.isfinite(value) and 0.0 <= value <= 1.0):
            raise EvaluationError(key, ValueError(f"fitness {value} outside [0, 1]"))
        return key, value

    items = list(pending.items())
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(item) for item in items]
    for key, value in results:
        cache.put(key, value)
        known[key] = value
    return [Individual(c, known[k]) for c, k in zip(chromosomes, keys)]


def best_individual(pop: Iterable[Individual]) -> Individual:
    """Highest fitness; ties go to the lexicographically smaller key."""
    return min(pop, key=lambda ind: (-ind.fitness, ind.key))


def _record(generation: int, pop: Sequence[Individual], evals: int, hits: int) -> GenerationRecord:
    best = best_individual(pop)
    mean = math.fsum(ind.fitness for ind in pop) / len(pop)
    return GenerationRecord(generation, best.fitness, mean, evals, hits, best.key)


class RunWriter:
    """Persists a run directory: history, best architecture, cache, config."""

    def __init__(self, run_dir: str | os.PathLike, space: SearchSpace,
                 snapshot: dict | None = None):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.space = space
        self.history_path = self.dir / "history.jsonl"
        self.history_path.write_text("", encoding="utf-8")
        if snapshot is not None:
            (self.dir / "config.snapshot.json").write_text(
                json.dumps(snapshot, indent=2) + "\n", encoding="utf-8")

    def generation_done(self, record: GenerationRecord, best: Individual,
                        cache: FitnessCache) -> None:
        with open(self.history_path, "a", encoding="utf-8") as fh:
            fh.write(record.to_json_line() + "\n")
        arch = architecture_to_json(best.chromosome, self.space.fixed)
        (self.dir / "best.arch.json").write_text(json.dumps(arch, indent=2) + "\n",
                                                  encoding="utf-8")
        cache.save(self.dir / "cache.json")


def evolve(cfg: EvolutionConfig, space: SearchSpace, evaluator: FitnessEvaluator, *,
           cache: FitnessCache | None = None,
           on_generation: Callable[[GenerationRecord, Individual, FitnessCache], None] | None = None,
           ) -> tuple[Individual, list[GenerationRecord]]:
    """Run the evolutionary search and return the best individual and history.

    History has ``max_gens + 1`` records; record 0 describes the random initial
    population.
    """
    cache = FitnessCache() if cache is None else cache
    rng = derive_rng(cfg.seed, "evolve")
    ops = cfg.operator_config
    workers = cfg.parallel_evaluations

    def evaluate(pop):
        hits0, misses0 = cache.hits, cache.misses
        out = evaluate_population(pop, evaluator, cache, workers=workers)
        return out, cache.misses - misses0, cache.hits - hits0

    population = [random_chromosome(space, rng) for _ in range(cfg.pop_size)]
    population, evals, hits = evaluate(population)
    best = best_individual(population)
    history = [_record(0, population, evals, hits)]
    if on_generation:
        on_generation(history[-1], best, cache)
    logger.info("gen 0 best=%.4f key=%s", best.fitness, best.key)

    n_pairs = math.ceil(cfg.pop_size / 2)
    for gen in range(1, cfg.max_gens + 1):
        offspring: list[Chromosome] = []
        for _ in range(n_pairs):
            p1 = tournament_select(population, ops, rng).chromosome
            p2 = tournament_select(population, ops, rng).chromosome
            if rng.random() < ops.p_cross:
                c1, c2 = single_point_crossover(p1, p2, space, rng)
            else:
                c1, c2 = p1, p2
            if rng.random() < ops.p_mutate:
                c1 = mutate(c1, space, ops, rng)
                c2 = mutate(c2, space, ops, rng)
            offspring.extend((c1, c2))
        offspring = offspring[:cfg.pop_size]
        evaluated, evals, hits = evaluate(offspring)

        combined = population + evaluated
        gen_best = best_individual(combined)
        survivors = roulette_select(combined, cfg.pop_size, rng)
        population = apply_elitism(survivors, gen_best)
        best = best_individual([best, gen_best])

        history.append(_record(gen, population, evals, hits))
        if on_generation:
            on_generation(history[-1], best, cache)
        logger.info("gen %d best=%.4f mean=%.4f evals=%d hits=%d", gen,
                    history[-1].best_fitness, history[-1].mean_fitness, evals, hits)
    return best, history


def run_to_directory(run_dir: str | os.PathLike, cfg: EvolutionConfig, space: SearchSpace,
                     evaluator: FitnessEvaluator, *, cache: FitnessCache | None = None,
                     snapshot: dict | None = None) -> tuple[Individual, list[GenerationRecord]]:
    """:func:`evolve` with the run directory updated after every generation."""
    writer = RunWriter(run_dir, space, snapshot)
    return evolve(cfg, space, evaluator, cache=cache, on_generation=writer.generation_done)
