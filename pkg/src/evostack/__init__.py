"""Evolutionary transformer architecture search with a stacked one-vs-rest ensemble."""

from .errors import (ContractViolation, DatasetError, EvaluationError, EvostackError,
                     TrainingDivergence, ValidationError)
from .evolution import EvolutionConfig, FitnessCache, GenerationRecord, evolve
from .fitness import CvEvaluator, CvTrainConfig, SyntheticEvaluator, SyntheticLandscape
from .genetic_ops import OperatorConfig
from .search_space import (Chromosome, FixedHyperparams, Individual, LayerGene, SearchSpace,
                           canonical_decode, canonical_encode)

__all__ = [
    "Chromosome", "ContractViolation", "CvEvaluator", "CvTrainConfig", "DatasetError",
    "EvaluationError", "EvolutionConfig", "EvostackError", "FitnessCache", "FixedHyperparams",
    "GenerationRecord", "Individual", "LayerGene", "OperatorConfig", "SearchSpace",
    "SyntheticEvaluator", "SyntheticLandscape", "TrainingDivergence", "ValidationError",
    "canonical_decode", "canonical_encode", "evolve",
]

__version__ = "0.1.0"
