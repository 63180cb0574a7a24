import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evostack.errors import ContractViolation, ValidationError
from evostack.search_space import (Chromosome, FixedHyperparams, Individual, LayerGene,
                                   SearchSpace, architecture_from_json, architecture_to_json,
                                   canonical_decode, canonical_encode, enumerate_chromosomes,
                                   load_architecture, random_chromosome, save_architecture)

from conftest import reduced_space


def test_default_space_draws_respect_domains():
    space = SearchSpace()
    assert space.layer_count_range == (6, 12)
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = random_chromosome(space, rng)
        assert 6 <= len(c) <= 12
        for g in c:
            assert g.heads in (8, 16)
            assert g.mlp_dim in (2048, 3072, 4096)
            assert 0.1 <= g.dropout <= 0.3
        assert space.contains(c)


def test_singleton_space_gives_unique_chromosome():
    space = SearchSpace((4,), (16,), (0.2, 0.2), (3, 3), FixedHyperparams(embed_dim=64))
    expected = Chromosome.from_tuples([(4, 16, 0.2)] * 3)
    for seed in range(5):
        assert random_chromosome(space, np.random.default_rng(seed)) == expected


def test_reduced_space_has_84_architectures_and_sampler_covers_them():
    space = reduced_space()
    # brute-force oracle: sum over lengths of 4 ** length
    assert sum(4 ** n for n in (1, 2, 3)) == 84
    all_keys = {canonical_encode(c) for c in enumerate_chromosomes(space)}
    assert len(all_keys) == 84
    rng = np.random.default_rng(7)
    seen = {canonical_encode(random_chromosome(space, rng)) for _ in range(10_000)}
    assert seen == all_keys


def test_initial_architecture_key():
    c = Chromosome.from_tuples([(8, 2048, 0.2), (8, 2048, 0.2), (16, 3072, 0.1)])
    assert canonical_encode(c) == "L3|h8,m2048,d0.200|h8,m2048,d0.200|h16,m3072,d0.100"
    assert c.key == canonical_encode(c)


def test_empty_extras_add_no_tokens():
    a = LayerGene(8, 2048, 0.2)
    b = LayerGene(8, 2048, 0.2, {})
    assert canonical_encode(Chromosome((a,))) == canonical_encode(Chromosome((b,)))


def test_extras_are_encoded_sorted():
    g = LayerGene(8, 2048, 0.2, {"qkv_bias": 1, "act": 2})
    key = canonical_encode(Chromosome((g,)))
    assert key == "L1|h8,m2048,d0.200,act=2,qkv_bias=1"
    assert canonical_decode(key) == Chromosome((g,))


genes = st.builds(LayerGene, st.sampled_from([2, 4, 8, 16]), st.sampled_from([8, 2048, 3072]),
                  st.integers(0, 999).map(lambda t: t / 1000),
                  st.dictionaries(st.sampled_from(["act", "norm"]), st.integers(0, 5), max_size=2))


@settings(max_examples=300, deadline=None)
@given(st.lists(genes, min_size=1, max_size=12))
def test_encode_decode_round_trip(layers):
    c = Chromosome(tuple(layers))
    assert canonical_decode(canonical_encode(c)) == c


def test_round_trip_over_1000_random_chromosomes():
    space = SearchSpace()
    rng = np.random.default_rng(11)
    for _ in range(1000):
        c = random_chromosome(space, rng)
        assert canonical_decode(canonical_encode(c)) == c


@pytest.mark.parametrize("key", ["", "L2|h8,m2048,d0.200", "X1|h8,m8,d0.100", "L1|h8,m8,d0.1"])
def test_decode_rejects_malformed_keys(key):
    with pytest.raises(ValidationError):
        canonical_decode(key)


def test_dropout_is_quantized():
    assert LayerGene(8, 8, 0.1000000001) == LayerGene(8, 8, 0.1)
    assert LayerGene(8, 8, 0.1 + 0.2).dropout == 0.3


def test_validate_reports_violations(space):
    bad = Chromosome.from_tuples([(3, 8, 0.1)] * 4)
    problems = space.violations(bad)
    assert any("layer" in p for p in problems)
    assert any("heads" in p for p in problems)
    with pytest.raises(ContractViolation):
        space.validate(bad)


def test_space_rejects_heads_not_dividing_embed():
    with pytest.raises(ValidationError):
        SearchSpace((5,), (8,), (0.1, 0.1), (1, 2), FixedHyperparams(embed_dim=64))


def test_fixed_hyperparams_validation():
    assert FixedHyperparams().num_patches == (224 // 16) ** 2
    with pytest.raises(ValidationError):
        FixedHyperparams(image_size=30, patch_size=8)


def test_space_json_round_trip(space):
    again = SearchSpace.from_json(json.loads(json.dumps(space.to_json())))
    assert again == space
    with pytest.raises(ValidationError):
        SearchSpace.from_json({**space.to_json(), "bogus": 1})


def test_architecture_file_round_trip(tmp_path, space):
    c = Chromosome.from_tuples([(2, 8, 0.1), (4, 16, 0.1)])
    save_architecture(tmp_path / "a.json", c, space.fixed)
    assert load_architecture(tmp_path / "a.json") == (c, space.fixed)
    assert architecture_from_json(architecture_to_json(c, space.fixed)) == (c, space.fixed)


def test_individual_fitness_range():
    c = Chromosome.from_tuples([(2, 8, 0.1)])
    assert Individual(c, 0.5).with_fitness(1.0).fitness == 1.0
    with pytest.raises((ValidationError, ContractViolation)):
        Individual(c, 1.5)


def test_empty_chromosome_rejected():
    with pytest.raises((ValidationError, ContractViolation)):
        Chromosome(())
