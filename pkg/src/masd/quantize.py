"""Nearest-code lookup with the straight-through estimator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from masd.nn import Tensor, frozen, stop_gradient
from masd.nn import ops as T


def sq_distances(z: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of ``z`` (G, D) and ``table`` (k, D)."""
    diff = z[:, None, :] - table[None, :, :]
    return (diff * diff).sum(axis=-1)


def nearest(z: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of the closest code for each row; ties go to the lowest index."""
    if z.ndim != 2 or table.ndim != 2 or z.shape[1] != table.shape[1]:
        raise ValueError(f"nearest: queries {z.shape} do not match codes {table.shape}")
    return np.argmin(sq_distances(z, table), axis=1)


@dataclass
class Quantized:
    index: np.ndarray  # (G,)
    code: Tensor  # selected codes (G, D)
    zq: Tensor  # straight-through output, equals ``code`` in value
    codebook_loss: Tensor  # (G,) ||sg(z) - e||^2
    commitment_loss: Tensor  # (G,) ||z - sg(e)||^2


def straight_through(z: Tensor, table: Tensor) -> Quantized:
    """Snap rows of ``z`` to their nearest rows of ``table``.

    Forward value of ``zq`` is the code; its gradient is copied to ``z``
    unchanged. The code itself only receives gradient through
    ``codebook_loss``.
    """
    idx = frozen(lambda: nearest(z.data, table.data))
    code = T.gather_rows(table, idx)
    codebook_loss = T.sqnorm(T.sub(stop_gradient(z), code), axis=1)
    commitment_loss = T.sqnorm(T.sub(z, stop_gradient(code)), axis=1)
    zq = T.straight_through_value(z, code)
    return Quantized(idx, code, zq, codebook_loss, commitment_loss)


def quantize(z: np.ndarray, table: np.ndarray) -> tuple[int, np.ndarray, float, float]:
    """Single-vector lookup: (index, code, codebook loss, commitment loss)."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    table = np.asarray(table, dtype=np.float64)
    q = straight_through(Tensor(z), Tensor(table))
    return int(q.index[0]), q.code.data[0], float(q.codebook_loss.data[0]), float(q.commitment_loss.data[0])
