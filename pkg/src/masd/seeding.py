"""Named random streams split from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(root: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; the same (root, name) always yields the same stream."""
    return np.random.default_rng([int(root), zlib.crc32(name.encode())])
