"""Named, independent random streams derived from one scenario seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = (
    "field",
    "actuation-day",
    "actuation-night",
    "lidar-noise-day",
    "lidar-noise-night",
    "anomalies",
)


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for sub-stream ``name`` of ``seed``.

    The mapping is stable across processes and machines (crc32, not ``hash``).
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
