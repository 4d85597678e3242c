"""Two-level codebooks: a bottom code per agent and a top code per subgroup.

Bottom codes are looked up from each agent's own segment embedding. The
top embedding of a subgroup is an attention pooling of its members' bottom
embeddings, so it does not depend on member order. The decoder sees
(obs, bottom code, top code). With ``single`` the top level is dropped
entirely and every agent is autoencoded on its own.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from masd import skillnet as S
from masd.dataset import SegmentBatch
from masd.grouper import Grouper, Partition
from masd.nn import ShapeError, Tensor, uniform_fan_in
from masd.nn import ops as T
from masd.quantize import quantize, straight_through  # noqa: F401  (single-vector lookup re-exported)

BTM = "Ehier/btm"
TOP = "Ehier/top"
DECODER_ORDER = "obs,q_btm,q_top"


def init_aggregator(rng: np.random.Generator, d: int, width: int, d_top: int) -> dict[str, np.ndarray]:
    return {
        "agg/Wk": uniform_fan_in(rng, d, (d, width)),
        "agg/Wv": uniform_fan_in(rng, d, (d, width)),
        "agg/query": uniform_fan_in(rng, width, (width,)),
        "agg/Wo": uniform_fan_in(rng, width, (width, d_top)),
        "agg/bo": np.zeros(d_top),
    }


def init_params(rng: np.random.Generator, cfg: S.DiscoveryConfig) -> dict[str, np.ndarray]:
    params = S.init_encoder_decoder(rng, cfg)
    params[BTM] = uniform_fan_in(rng, cfg.d, (cfg.k, cfg.d))
    if cfg.method == "hier":
        params |= init_aggregator(rng, cfg.d, cfg.attn_width, cfg.d_top)
        params[TOP] = uniform_fan_in(rng, cfg.d_top, (cfg.k, cfg.d_top))
    return params


def pool_groups(p, z: Tensor, groups: Sequence[np.ndarray], heads: int) -> Tensor:
    """Attention-pool rows of ``z`` per group -> (G, d_top)."""
    if any(len(g) == 0 for g in groups):
        raise ShapeError("aggregate_top: empty member list")
    width = max(len(g) for g in groups)
    idx = np.zeros((len(groups), width), dtype=np.int64)
    mask = np.zeros((len(groups), width), dtype=bool)
    for r, g in enumerate(groups):
        idx[r, :len(g)] = g
        mask[r, :len(g)] = True
    members = T.gather_rows(z, idx.ravel())
    P = p["agg/query"].shape[0]
    keys = T.reshape(T.affine(members, p["agg/Wk"]), (len(groups), width, P))
    values = T.reshape(T.affine(members, p["agg/Wv"]), (len(groups), width, P))
    pooled = T.masked_attention(p["agg/query"], keys, values, mask, heads)
    return T.affine(pooled, p["agg/Wo"], p["agg/bo"])


def aggregate_top(agg: Mapping[str, np.ndarray], members: Sequence[np.ndarray], heads: int = 2) -> np.ndarray:
    """Top embedding of one subgroup from its members' bottom embeddings."""
    members = [np.asarray(m, dtype=np.float64) for m in members]
    if not members:
        raise ShapeError("aggregate_top: empty member list")
    z = Tensor(np.stack(members))
    p = {k: Tensor(v) for k, v in agg.items()}
    return pool_groups(p, z, [np.arange(len(members))], heads).data[0]


@dataclass
class Forward:
    total: Tensor
    nll: Tensor
    codebook: Tensor
    commitment: Tensor
    term_batch: np.ndarray
    logp_all: Tensor
    usage: dict[str, np.ndarray]
    recent: dict[str, np.ndarray]
    z_btm: Tensor
    q_btm: Tensor
    q_top: Tensor | None  # per agent row


def forward(p, packed: S.Packed, cfg: S.DiscoveryConfig) -> Forward:
    z = S.encode(p, Tensor(packed.enc_in))
    btm = straight_through(z, p[BTM])
    cb, cm = [btm.codebook_loss], [btm.commitment_loss]
    owner = [packed.row_batch]
    usage, recent = {BTM: btm.index}, {BTM: z.data}
    codes = [btm.zq]
    q_top_rows = None
    if cfg.method == "hier":
        z_top = pool_groups(p, z, packed.groups, cfg.heads)
        top = straight_through(z_top, p[TOP])
        member_of = packed.group_of_row()
        # top terms are charged once per member so larger subgroups weigh in proportion
        cb.append(T.gather_rows(top.codebook_loss, member_of))
        cm.append(T.gather_rows(top.commitment_loss, member_of))
        owner.append(packed.row_batch)
        q_top_rows = T.gather_rows(top.zq, member_of)
        codes.append(q_top_rows)
        usage[TOP] = top.index
        recent[TOP] = z_top.data
    logp, logp_all = S.reconstruction(p, packed, *codes)
    nll = T.scale(logp, -1.0)
    cb_t, cm_t = T.concat(cb, axis=0), T.concat(cm, axis=0)
    total = T.scale(
        T.total([T.sum_(nll), T.sum_(cb_t), T.scale(T.sum_(cm_t), cfg.beta)]), 1.0 / packed.n_batches
    )
    return Forward(total, nll, cb_t, cm_t, np.concatenate(owner), logp_all, usage, recent, z, btm.zq, q_top_rows)


def breakdown(fw: Forward, packed: S.Packed, beta: float) -> S.LossBreakdown:
    n = packed.n_batches
    step_batch = packed.row_batch[packed.step_rows()]
    nll = S.per_batch_sum(fw.nll.data, step_batch, n)
    cb = S.per_batch_sum(fw.codebook.data, fw.term_batch, n)
    cm = S.per_batch_sum(fw.commitment.data, fw.term_batch, n)
    correct, counted = S.accuracy_counts(packed, fw.logp_all.data)
    return S.LossBreakdown(nll + cb + beta * cm, nll, cb, cm, fw.usage, fw.recent, correct, counted)


def member_nll(params: Mapping[str, np.ndarray], packed: S.Packed, q_btm: np.ndarray, q_top: np.ndarray | None) -> np.ndarray:
    """Per-agent-row NLL of the decoder given explicit code rows."""
    p = {k: Tensor(v) for k, v in params.items()}
    codes = [Tensor(q_btm)] + ([] if q_top is None else [Tensor(q_top)])
    logp, _ = S.reconstruction(p, packed, *codes)
    return -np.bincount(packed.step_rows(), weights=logp.data, minlength=packed.n_rows)


def loss_hier(params: Mapping[str, np.ndarray], codebooks: Mapping[str, np.ndarray] | None,
              batch: SegmentBatch, partition: Partition, cfg: S.DiscoveryConfig | None = None) -> tuple[float, S.LossBreakdown]:
    merged = dict(params) | dict(codebooks or {})
    if cfg is None:
        cfg = S.DiscoveryConfig(method="hier" if TOP in merged else "single", H=batch.horizon)
    packed = S.pack([batch], [partition], batch.horizon)
    fw = forward({k: Tensor(v) for k, v in merged.items()}, packed, cfg)
    return float(fw.total.data), breakdown(fw, packed, cfg.beta)


def train_hier(episodes, config: S.DiscoveryConfig, grouper: Grouper | None = None, single_agent_only: bool = False, **kwargs):
    from dataclasses import replace

    from masd.discovery import train

    if single_agent_only:
        config = replace(config, method="single")
    if config.method not in ("hier", "single"):
        raise ValueError("train_hier needs method 'hier' or 'single'")
    return train(episodes, config, grouper=grouper, **kwargs)
