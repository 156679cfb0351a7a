"""Deterministic random-stream derivation.

All randomness in the package flows from 64-bit integer seeds through
Philox, a counter-based bit generator, so every component can be replayed
in isolation and no result depends on execution order.  Substreams are
derived by feeding an integer path ``(seed, tag, index, ...)`` into
``numpy.random.SeedSequence`` as its entropy; distinct paths give
statistically independent streams.

Stream tags used across the package:

===  ==========================================================
tag  purpose
===  ==========================================================
1    dataset generation for one simulation replicate
2    detection seed handed to one simulation replicate
3    critical-value draws for one detection step
4    one sampling block inside a quantile estimate
===  ==========================================================
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError

TAG_REPLICATE = 1
TAG_DETECTION = 2
TAG_STEP = 3
TAG_BLOCK = 4

_SEED_BOUND = 2**64


def validate_seed(seed: int) -> int:
    """Check that ``seed`` is an integer representable in 64 bits."""
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise ConfigurationError(f"seed must be an integer, got {seed!r}")
    seed = int(seed)
    if not 0 <= seed < _SEED_BOUND:
        raise ConfigurationError(f"seed must lie in [0, 2**64), got {seed}")
    return seed


def seed_sequence(seed: int, *path: int) -> np.random.SeedSequence:
    """SeedSequence for the stream identified by ``(seed, *path)``."""
    return np.random.SeedSequence((validate_seed(seed),) + tuple(int(p) for p in path))


def generator(seed: int, *path: int) -> np.random.Generator:
    """Philox generator for the stream identified by ``(seed, *path)``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *path)))


def child_seed(seed: int, *path: int) -> int:
    """Derive an independent 64-bit seed for a nested component.

    Used where a configuration object carries a plain integer seed (for
    example the per-replicate detection seed inside the simulation
    harness): the child is the first 64-bit word hashed out of the
    seed-path, so it can be stored, logged, and replayed on its own.
    """
    return int(seed_sequence(seed, *path).generate_state(1, np.uint64)[0])
