"""Segment encoder, code-conditioned decoder and minibatch packing shared by both schemes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from masd import env as E
from masd.dataset import SegmentBatch, SkillSegment
from masd.grouper import Partition, validate_partition
from masd.nn import ShapeError, Tensor, init_mlp, mlp, mlp_numpy
from masd.nn import ops as T

METHODS = ("3d", "hier", "single")


@dataclass
class DiscoveryConfig:
    method: str = "3d"
    d: int = 8
    k: int = 8  # codes per table (every 3D size, bottom and top tables)
    H: int = 5
    beta: float = 0.25
    lr: float = 1e-3
    epochs: int = 200
    minibatch: int = 32
    interleave: int = 10  # autoencoder steps per grouper phase
    grouper_batches: int = 64
    sizes: tuple[int, ...] = tuple(range(1, E.N_MAX + 1))
    hidden: int = 64
    d_top: int = 8
    heads: int = 2
    attn_width: int = 16
    grouper_mode: str = "state"
    max_grad_norm: float | None = 10.0
    seed: int = 0

    def __post_init__(self):
        self.sizes = tuple(sorted(set(int(s) for s in self.sizes)))
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.beta <= 0 or self.d < 1 or self.k < 1 or self.H < 1:
            raise ValueError("beta must be positive; d, k and H at least 1")
        if not self.sizes or 1 not in self.sizes or not all(1 <= s <= E.N_MAX for s in self.sizes):
            raise ValueError(f"enabled sizes must include 1 and lie in [1, {E.N_MAX}], got {self.sizes}")
        if self.attn_width % self.heads:
            raise ValueError("attention heads must divide the attention width")

    @property
    def encoder_input(self) -> int:
        return self.H * (E.OBS_DIM + E.N_ACTIONS)

    @property
    def decoder_input(self) -> int:
        if self.method == "3d":
            return E.OBS_DIM + self.d
        if self.method == "single":
            return E.OBS_DIM + self.d
        return E.OBS_DIM + self.d + self.d_top


def init_encoder_decoder(rng: np.random.Generator, cfg: DiscoveryConfig) -> dict[str, np.ndarray]:
    params = init_mlp(rng, "enc/", [cfg.encoder_input, cfg.hidden, cfg.hidden, cfg.d], out_bias=False)
    params |= init_mlp(rng, "dec/", [cfg.decoder_input, cfg.hidden, cfg.hidden, E.N_ACTIONS])
    return params


def flatten_segment(obs: np.ndarray, acts: np.ndarray) -> np.ndarray:
    """(…, H, OBS_DIM) observations and (…, H) actions -> (…, H*(OBS_DIM+6))."""
    onehot = np.eye(E.N_ACTIONS)[acts]
    both = np.concatenate([obs, onehot], axis=-1)
    return both.reshape(*both.shape[:-2], -1)


def encode(p, x: Tensor) -> Tensor:
    return mlp(p, "enc/", x)


def encode_segment(params, segment: SkillSegment, H: int) -> np.ndarray:
    if segment.obs.shape[0] != H or segment.acts.shape[0] != H:
        raise ShapeError(f"segment has {segment.obs.shape[0]} steps, expected {H}")
    return mlp_numpy(params, "enc/", flatten_segment(segment.obs, segment.acts)[None, :])[0]


def decode_logp(p, obs: Tensor, *codes: Tensor) -> Tensor:
    return T.log_softmax(mlp(p, "dec/", T.concat([obs, *codes], axis=1)))


def decode_step(params, obs: np.ndarray, *code_rows: np.ndarray) -> np.ndarray:
    """Action log-probabilities for one observation and its code row(s)."""
    x = np.concatenate([np.asarray(obs, dtype=np.float64), *[np.asarray(c, dtype=np.float64) for c in code_rows]])[None, :]
    logits = mlp_numpy(params, "dec/", x)
    logits = logits - logits.max(axis=1, keepdims=True)
    return (logits - np.log(np.exp(logits).sum(axis=1, keepdims=True)))[0]


@dataclass
class Packed:
    """A minibatch of SegmentBatches flattened to agent rows.

    Row ``r`` is agent ``row_agent[r]`` of batch ``row_batch[r]``; decoder
    rows are row-major over (agent row, step).
    """

    n_batches: int
    H: int
    enc_in: np.ndarray
    dec_obs: np.ndarray
    acts: np.ndarray
    step_mask: np.ndarray
    alive: np.ndarray
    row_batch: np.ndarray
    row_agent: np.ndarray
    groups: list[np.ndarray]  # global row ids per subgroup, index-ordered
    group_batch: np.ndarray
    partitions: list[Partition] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return len(self.row_batch)

    def step_rows(self) -> np.ndarray:
        """Agent row of each decoder row."""
        return np.repeat(np.arange(self.n_rows), self.H)

    def group_of_row(self) -> np.ndarray:
        out = np.empty(self.n_rows, dtype=np.int64)
        for g, rows in enumerate(self.groups):
            out[rows] = g
        return out


def pack(batches: Sequence[SegmentBatch], partitions: Sequence[Partition], H: int) -> Packed:
    if len(batches) != len(partitions):
        raise ShapeError("one partition per batch is required")
    enc, obs, acts, mask, alive, rb, ra, groups, gb = [], [], [], [], [], [], [], [], []
    offset = 0
    for b, (batch, part) in enumerate(zip(batches, partitions)):
        if batch.horizon != H:
            raise ShapeError(f"batch horizon {batch.horizon} != {H}")
        validate_partition(part, batch.n_agents)
        enc.append(flatten_segment(batch.obs, batch.acts))
        obs.append(batch.obs.reshape(-1, E.OBS_DIM))
        acts.append(batch.acts.reshape(-1))
        mask.append(batch.mask.reshape(-1))
        alive.append(batch.alive.reshape(-1))
        rb.append(np.full(batch.n_agents, b))
        ra.append(np.arange(batch.n_agents))
        for sub in part:
            groups.append(offset + np.asarray(sub, dtype=np.int64))
            gb.append(b)
        offset += batch.n_agents
    return Packed(
        len(batches), H, np.concatenate(enc), np.concatenate(obs), np.concatenate(acts),
        np.concatenate(mask), np.concatenate(alive), np.concatenate(rb), np.concatenate(ra),
        groups, np.asarray(gb, dtype=np.int64), list(partitions),
    )


def reconstruction(p, packed: Packed, *code_rows: Tensor) -> tuple[Tensor, Tensor]:
    """Masked per-step log-likelihood of the recorded actions.

    ``code_rows`` are (n_rows, ·) tensors, one row per agent; each is repeated
    over the H steps. Returns (masked log-probs per decoder row, log-prob table).
    """
    rep = packed.step_rows()
    logp_all = decode_logp(p, Tensor(packed.dec_obs), *[T.gather_rows(c, rep) for c in code_rows])
    logp = T.mul(T.pick(logp_all, packed.acts), Tensor(packed.step_mask))
    return logp, logp_all


def per_batch_sum(values: np.ndarray, owner: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(owner, weights=values, minlength=n)


@dataclass
class LossBreakdown:
    total: np.ndarray  # (n_batches,)
    nll: np.ndarray
    codebook: np.ndarray
    commitment: np.ndarray
    usage: dict[str, np.ndarray] = field(default_factory=dict)  # table name -> chosen code ids
    recent: dict[str, np.ndarray] = field(default_factory=dict)  # table name -> recent pre-quantization rows
    correct: float = 0.0
    counted: float = 0.0


def accuracy_counts(packed: Packed, logp_all: np.ndarray) -> tuple[float, float]:
    """Argmax hits over real steps of living agents."""
    keep = (packed.step_mask > 0) & packed.alive
    hits = (np.argmax(logp_all, axis=1) == packed.acts) & keep
    return float(hits.sum()), float(keep.sum())
