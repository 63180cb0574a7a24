"""Deterministic derivation of independent random streams."""

from __future__ import annotations

import hashlib

import numpy as np


def _words(token: object) -> list[int]:
    digest = hashlib.sha256(repr(token).encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def derive_seed_sequence(seed: int, *tokens: object) -> np.random.SeedSequence:
    """Seed sequence keyed on ``seed`` plus an arbitrary path of tokens.

    Tokens are hashed through their ``repr`` so the same path always maps to
    the same stream regardless of call order or worker scheduling.
    """
    entropy = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for token in tokens:
        entropy.extend(_words(token))
    return np.random.SeedSequence(entropy)


def derive_rng(seed: int, *tokens: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(seed, *tokens))
