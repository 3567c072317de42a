"""Root-seed derivation: every RNG stream is the root seed entangled with
a stable component tag (crc32), so one config seed reproduces the run."""

from __future__ import annotations

import zlib

import numpy as np


def seed_sequence(root_seed: int, tag: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root_seed), zlib.crc32(tag.encode())])


def rng_for(root_seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root_seed, tag))


def child_seed(root_seed: int, tag: str) -> int:
    return int(seed_sequence(root_seed, tag).generate_state(1)[0])
