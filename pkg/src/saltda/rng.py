"""Deterministic random streams keyed by integer tuples.

Every consumer of randomness derives its own counter-based stream from
(experiment seed, purpose tag, particle/member id, window index, ...), so
results never depend on scheduling or worker count.
"""

from __future__ import annotations

import enum

import numpy as np


class Tag(enum.IntEnum):
    PATH = 1        # forecast Brownian paths
    JITTER = 2      # proposal paths inside MCMC moves
    OBSERVE = 3     # observation noise
    INIT = 4        # initial-ensemble draws
    PRIOR = 5       # no-assimilation companion ensemble paths
    TRUTH = 6       # truth-trajectory driving noise
    RESAMPLE = 7    # systematic-resampling offsets
    FORECAST = 8    # forecast-reliability paths
    RANK = 9        # rank bookkeeping (tie breaks, member dressing)


RngKey = tuple[int, ...]


def stream(*key: int) -> np.random.Generator:
    """Counter-based generator for an integer key tuple."""
    flat = tuple(int(k) for k in key)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(flat)))


def float_bits(x: float) -> int:
    """Stable nonnegative integer identifying a float64 value."""
    return int(np.float64(x).view(np.uint64))


def station_stream(base: RngKey, x: float, y: float) -> np.random.Generator:
    """Stream tied to a station location, shared across nested station sets."""
    return stream(*base, float_bits(x), float_bits(y))
