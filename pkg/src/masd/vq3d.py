"""Per-size joint codebooks: each code is an m x d stack of single-agent rows.

A subgroup of m agents is encoded row by row (in agent-index order), the
stacked m x d embedding is snapped to the nearest code of the size-m table
and every member decodes its own row of that code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from masd import skillnet as S
from masd.dataset import SegmentBatch
from masd.grouper import Grouper, Partition
from masd.nn import Tensor, uniform_fan_in
from masd.nn import ops as T
from masd.quantize import nearest, straight_through

USAGE_DECAY = 0.99


class ConfigurationError(ValueError):
    pass


def table_name(m: int) -> str:
    return f"E3d/m{m}"


@dataclass
class Codebook3D:
    """Size-indexed code tables (k, m, d) with EMA usage counters."""

    tables: dict[int, np.ndarray]
    usage: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for m, t in self.tables.items():
            if t.ndim != 3 or t.shape[1] != m or t.shape[0] < 1:
                raise ConfigurationError(f"table for size {m} has shape {t.shape}")
            self.usage.setdefault(m, np.zeros(t.shape[0]))

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, k: int, sizes: Sequence[int]) -> "Codebook3D":
        return cls({m: uniform_fan_in(rng, d, (k, m, d)) for m in sizes})

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray]) -> "Codebook3D":
        tables = {}
        for name, arr in tensors.items():
            if name.startswith("E3d/m"):
                tables[int(name[5:])] = np.asarray(arr)
        if not tables:
            raise ConfigurationError("no E3d/m* tensors present")
        usage = {m: np.asarray(tensors[f"usage/{table_name(m)}"]) for m in tables if f"usage/{table_name(m)}" in tensors}
        return cls(tables, usage)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(sorted(self.tables))

    @property
    def d(self) -> int:
        return next(iter(self.tables.values())).shape[2]

    def tensors(self) -> dict[str, np.ndarray]:
        return {table_name(m): t for m, t in self.tables.items()}

    def record_usage(self, m: int, index) -> None:
        counts = np.bincount(np.atleast_1d(index), minlength=len(self.tables[m]))
        self.usage[m] = USAGE_DECAY * self.usage[m] + (1.0 - USAGE_DECAY) * counts


@dataclass
class QuantizationResult:
    index: int
    rows: np.ndarray  # (m, d) chosen code, one row per member
    codebook_loss: float
    commitment_loss: float


def quantize_subgroup(z_joint: np.ndarray, codebook: Codebook3D, m: int) -> QuantizationResult:
    """Nearest size-m code in squared Frobenius distance; ties go to the lowest index."""
    if m not in codebook.tables:
        raise ConfigurationError(f"subgroup size {m} is not enabled (enabled: {codebook.sizes})")
    z_joint = np.asarray(z_joint, dtype=np.float64)
    table = codebook.tables[m]
    if z_joint.shape != table.shape[1:]:
        raise ConfigurationError(f"joint embedding {z_joint.shape} does not match codes {table.shape[1:]}")
    q = straight_through(Tensor(z_joint.reshape(1, -1)), Tensor(table.reshape(len(table), -1)))
    idx = int(q.index[0])
    codebook.record_usage(m, idx)
    return QuantizationResult(idx, table[idx].copy(), float(q.codebook_loss.data[0]), float(q.commitment_loss.data[0]))


def nearest_joint(z_joint: np.ndarray, table: np.ndarray) -> int:
    """Pure lookup without touching usage counters."""
    return int(nearest(np.asarray(z_joint).reshape(1, -1), table.reshape(len(table), -1))[0])


# ---------------------------------------------------------------- differentiable model

def init_params(rng: np.random.Generator, cfg: S.DiscoveryConfig) -> dict[str, np.ndarray]:
    params = S.init_encoder_decoder(rng, cfg)
    params |= Codebook3D.init(rng, cfg.d, cfg.k, cfg.sizes).tensors()
    return params


@dataclass
class Forward:
    total: Tensor  # mean over batches of the per-batch loss
    nll: Tensor  # per decoder row, negative masked log-likelihood
    codebook: Tensor  # per vq term
    commitment: Tensor
    term_batch: np.ndarray  # owning batch of each vq term
    logp_all: Tensor
    usage: dict[str, np.ndarray]
    recent: dict[str, np.ndarray]


def forward(p, packed: S.Packed, cfg: S.DiscoveryConfig) -> Forward:
    z = S.encode(p, Tensor(packed.enc_in))
    d = z.shape[1]
    by_size: dict[int, list[int]] = {}
    for g, rows in enumerate(packed.groups):
        by_size.setdefault(len(rows), []).append(g)
    order, parts, cb, cm, owner = [], [], [], [], []
    usage, recent = {}, {}
    for m in sorted(by_size):
        name = table_name(m)
        if name not in p:
            raise ConfigurationError(f"subgroup size {m} is not enabled (enabled: {cfg.sizes})")
        gids = by_size[m]
        rows = np.stack([packed.groups[g] for g in gids])  # (G_m, m)
        zj = T.reshape(T.gather_rows(z, rows.ravel()), (len(gids), m * d))
        table = p[name]
        q = straight_through(zj, T.reshape(table, (table.shape[0], m * d)))
        parts.append(T.reshape(q.zq, (len(gids) * m, d)))
        order.append(rows.ravel())
        cb.append(q.codebook_loss)
        cm.append(q.commitment_loss)
        owner.append(packed.group_batch[gids])
        usage[name] = q.index
        recent[name] = zj.data.reshape(len(gids), m, d)
    order_all = np.concatenate(order)
    inverse = np.empty_like(order_all)
    inverse[order_all] = np.arange(len(order_all))
    zq = T.gather_rows(T.concat(parts, axis=0), inverse)
    logp, logp_all = S.reconstruction(p, packed, zq)
    nll = T.scale(logp, -1.0)
    cb_t, cm_t = T.concat(cb, axis=0), T.concat(cm, axis=0)
    total = T.scale(
        T.total([T.sum_(nll), T.sum_(cb_t), T.scale(T.sum_(cm_t), cfg.beta)]), 1.0 / packed.n_batches
    )
    return Forward(total, nll, cb_t, cm_t, np.concatenate(owner), logp_all, usage, recent)


def breakdown(fw: Forward, packed: S.Packed, beta: float) -> S.LossBreakdown:
    n = packed.n_batches
    step_batch = packed.row_batch[packed.step_rows()]
    nll = S.per_batch_sum(fw.nll.data, step_batch, n)
    cb = S.per_batch_sum(fw.codebook.data, fw.term_batch, n)
    cm = S.per_batch_sum(fw.commitment.data, fw.term_batch, n)
    correct, counted = S.accuracy_counts(packed, fw.logp_all.data)
    return S.LossBreakdown(nll + cb + beta * cm, nll, cb, cm, fw.usage, fw.recent, correct, counted)


def loss_3d(params: Mapping[str, np.ndarray], codebooks: Codebook3D | Mapping[str, np.ndarray] | None,
            batch: SegmentBatch, partition: Partition, cfg: S.DiscoveryConfig | None = None) -> tuple[float, S.LossBreakdown]:
    """Loss of one batch under ``partition`` with its per-term breakdown."""
    merged = dict(params)
    if codebooks is not None:
        merged |= codebooks.tensors() if isinstance(codebooks, Codebook3D) else dict(codebooks)
    if cfg is None:
        sizes = tuple(int(k[5:]) for k in merged if k.startswith("E3d/m"))
        cfg = S.DiscoveryConfig(method="3d", H=batch.horizon, sizes=sizes)
    packed = S.pack([batch], [partition], batch.horizon)
    fw = forward({k: Tensor(v) for k, v in merged.items()}, packed, cfg)
    return float(fw.total.data), breakdown(fw, packed, cfg.beta)


def train_3d(episodes, config: S.DiscoveryConfig, grouper: Grouper | None = None, **kwargs):
    from masd.discovery import train

    if config.method != "3d":
        raise ValueError("train_3d needs method '3d'")
    return train(episodes, config, grouper=grouper, **kwargs)
