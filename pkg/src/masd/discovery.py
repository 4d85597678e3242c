"""Shared skill-discovery trainer for the joint and two-level schemes.

Autoencoder steps (grouper frozen) alternate with grouper PPO phases
(autoencoder frozen), the grouper being rewarded with the negated
per-batch loss. Codes whose usage fades are re-seeded from recent encoder
outputs at phase ends.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from masd import skillnet as S
from masd import vq3d, vqhier
from masd.dataset import EpisodeRecord, SegmentBatch, sample_minibatch, segment
from masd.grouper import Grouper, GrouperConfig, Partition
from masd.mappo import MetricsWriter
from masd.nn import AdamState, NumericError, ParameterSet, Tensor, adam_step, checkpoint, clip_global_norm, evaluate_with_gradients
from masd.seeding import stream

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "step", "loss", "nll", "codebook", "commitment", "accuracy", "grouper_loss", "reseeded")
EVAL_CHUNK = 256


class DivergenceError(RuntimeError):
    """Raised on a non-finite loss; ``tensors``/``meta`` hold the last good checkpoint."""

    def __init__(self, message: str, tensors: dict[str, np.ndarray], meta: dict):
        super().__init__(message)
        self.tensors = tensors
        self.meta = meta


def scheme(method: str):
    return vq3d if method == "3d" else vqhier


def restrict(partition: Partition, sizes: Sequence[int]) -> Partition:
    """Split every subgroup whose size is not enabled into singletons."""
    allowed = set(sizes)
    out: list[tuple[int, ...]] = []
    for sub in partition:
        if len(sub) in allowed:
            out.append(tuple(sub))
        else:
            out.extend((i,) for i in sub)
    return tuple(sorted(out))


@dataclass
class DiscoveryResult:
    config: S.DiscoveryConfig
    params: ParameterSet
    grouper: Grouper
    usage: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    final_accuracy: float = float("nan")

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.params.items())
        if self.config.method != "single":
            out |= dict(self.grouper.params.items())
        out |= {f"usage/{k}": v for k, v in self.usage.items()}
        return out

    def meta(self) -> dict:
        cfg = asdict(self.config)
        cfg["sizes"] = list(self.config.sizes)
        meta = {"kind": "skills", "config": cfg}
        if self.config.method != "3d":
            meta["decoder_order"] = vqhier.DECODER_ORDER if self.config.method == "hier" else "obs,q_btm"
        meta |= {"initial_loss": self.initial_loss, "final_loss": self.final_loss, "final_accuracy": self.final_accuracy}
        return meta

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, self.tensors(), self.meta())


def config_from_meta(meta: Mapping) -> S.DiscoveryConfig:
    if meta.get("kind") != "skills":
        raise checkpoint.CheckpointError("not a skills checkpoint")
    cfg = dict(meta["config"])
    cfg["sizes"] = tuple(cfg["sizes"])
    return S.DiscoveryConfig(**cfg)


def evaluate(params: Mapping[str, np.ndarray], batches: Sequence[SegmentBatch], partitions: Sequence[Partition],
             cfg: S.DiscoveryConfig) -> S.LossBreakdown:
    """Forward-only loss breakdown over many batches (chunked)."""
    sch = scheme(cfg.method)
    p = {k: Tensor(v) for k, v in params.items()}
    parts = []
    correct = counted = 0.0
    for start in range(0, len(batches), EVAL_CHUNK):
        packed = S.pack(batches[start:start + EVAL_CHUNK], partitions[start:start + EVAL_CHUNK], cfg.H)
        bd = sch.breakdown(sch.forward(p, packed, cfg), packed, cfg.beta)
        parts.append(bd)
        correct += bd.correct
        counted += bd.counted
    cat = lambda name: np.concatenate([getattr(b, name) for b in parts]) if parts else np.zeros(0)  # noqa: E731
    return S.LossBreakdown(cat("total"), cat("nll"), cat("codebook"), cat("commitment"), correct=correct, counted=counted)


class _Usage:
    """Per-table EMA of assignment fractions plus counts since the last phase end."""

    def __init__(self, tables: Mapping[str, int], decay: float = vq3d.USAGE_DECAY):
        self.decay = decay
        self.ema = {name: np.full(k, 1.0 / k) for name, k in tables.items()}
        self.phase = {name: np.zeros(k) for name, k in tables.items()}

    def record(self, name: str, index: np.ndarray) -> None:
        k = len(self.ema[name])
        counts = np.bincount(np.asarray(index).ravel(), minlength=k).astype(np.float64)
        self.phase[name] += counts
        if counts.sum() > 0:
            self.ema[name] = self.decay * self.ema[name] + (1.0 - self.decay) * counts / counts.sum()

    def dead(self, name: str) -> np.ndarray:
        k = len(self.ema[name])
        if self.phase[name].sum() < k:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero((self.ema[name] < 0.01 / k) & (self.phase[name] == 0))

    def end_phase(self) -> None:
        for name in self.phase:
            self.phase[name][:] = 0.0


def _tables(params: Mapping[str, np.ndarray]) -> dict[str, int]:
    return {k: params[k].shape[0] for k in params if k.startswith("E3d/") or k.startswith("Ehier/")}


def train(
    episodes: Sequence[EpisodeRecord],
    config: S.DiscoveryConfig,
    grouper: Grouper | None = None,
    loss_csv: str | Path | None = None,
    progress: bool = False,
) -> DiscoveryResult:
    if not episodes:
        raise ValueError("discovery needs a non-empty dataset")
    for ep in episodes:
        ep.validate()
    cfg = config
    sch = scheme(cfg.method)
    rng_sample = stream(cfg.seed, "sampling")
    rng_grouper = stream(cfg.seed, "grouper")
    rng_reseed = stream(cfg.seed, "reseed")
    params = ParameterSet(sch.init_params(stream(cfg.seed, "init"), cfg))
    if grouper is None:
        grouper = Grouper(GrouperConfig(mode=cfg.grouper_mode), stream(cfg.seed, "grouper_init"))
    opt = AdamState(lr=cfg.lr)
    usage = _Usage(_tables(params))
    batches = segment(episodes, cfg.H, drop_incomplete=False)
    trains_grouper = cfg.method != "single" and max(cfg.sizes) > 1 and any(b.n_agents > 1 for b in batches)
    writer = MetricsWriter(loss_csv, LOSS_COLUMNS)

    def partitions_for(bs: Sequence[SegmentBatch], rng=None, greedy: bool = False) -> list[Partition]:
        if cfg.method == "single":
            return [tuple((i,) for i in range(b.n_agents)) for b in bs]
        return [restrict(p, cfg.sizes) for p in grouper.partitions(bs, rng, greedy)]

    def result(history) -> DiscoveryResult:
        return DiscoveryResult(cfg, params, grouper, {k: v.copy() for k, v in usage.ema.items()}, list(history))

    def phase_loss(bs, parts):
        return evaluate(params, bs, [restrict(p, cfg.sizes) for p in parts], cfg).total

    history: list[dict] = []

    def snapshot():
        r = result(history)
        return r.tensors(), r.meta()

    last_good = snapshot()

    def full_eval(when: str) -> S.LossBreakdown:
        try:
            return evaluate(params, batches, partitions_for(batches, greedy=True), cfg)
        except NumericError as exc:
            raise DivergenceError(f"discovery diverged {when}: {exc}", *last_good) from None

    init_eval = full_eval("at initialization")
    step = 0
    for epoch in range(cfg.epochs):
        order = rng_sample.permutation(len(batches))
        sums = np.zeros(4)
        correct = counted = 0.0
        n_seen = 0
        g_losses: list[float] = []
        reseeded = 0
        for start in range(0, len(batches), cfg.minibatch):
            mb = [batches[i] for i in order[start:start + cfg.minibatch]]
            packed = S.pack(mb, partitions_for(mb, rng_sample), cfg.H)
            captured = {}

            def graph(p):
                fw = sch.forward(p, packed, cfg)
                captured["fw"] = fw
                return fw.total

            try:
                _, grads = evaluate_with_gradients(params, graph)
            except NumericError as exc:
                raise DivergenceError(f"discovery diverged at step {step}: {exc}", *last_good) from None
            fw = captured["fw"]
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"discovery diverged at step {step}: non-finite gradient", *last_good)
            bd = sch.breakdown(fw, packed, cfg.beta)
            sums += [bd.total.sum(), bd.nll.sum(), bd.codebook.sum(), bd.commitment.sum()]
            correct += bd.correct
            counted += bd.counted
            n_seen += len(mb)
            for name, idx in fw.usage.items():
                usage.record(name, idx)
            params, opt = adam_step(params, clip_global_norm(grads, cfg.max_grad_norm), opt)
            step += 1

            if step % cfg.interleave == 0:
                if trains_grouper:
                    size = min(cfg.grouper_batches, len(batches))
                    try:
                        stats = grouper.ppo_phase(sample_minibatch(batches, size, rng_grouper), phase_loss, rng_grouper)
                    except NumericError as exc:
                        raise DivergenceError(f"grouper diverged at step {step}: {exc}", *last_good) from None
                    g_losses.append(stats["mean_loss"])
                updates, n_new = _reseed(params, usage, fw.recent, rng_reseed)
                params = params.replace(updates)
                reseeded += n_new
                usage.end_phase()
                last_good = snapshot()

        row = {
            "epoch": epoch, "step": step, "loss": float(sums[0] / n_seen), "nll": float(sums[1] / n_seen),
            "codebook": float(sums[2] / n_seen), "commitment": float(sums[3] / n_seen),
            "accuracy": correct / max(counted, 1.0),
            "grouper_loss": float(np.mean(g_losses)) if g_losses else float("nan"), "reseeded": reseeded,
        }
        history.append(row)
        writer.write(**row)
        if progress:
            log.info("epoch %d loss %.4f acc %.3f", epoch, row["loss"], row["accuracy"])

    final = full_eval("in the final evaluation")
    out = result(history)
    out.initial_loss = float(init_eval.total.mean())
    out.final_loss = float(final.total.mean())
    out.final_accuracy = final.correct / max(final.counted, 1.0)
    return out


def _reseed(params: ParameterSet, usage: _Usage, recent: Mapping[str, np.ndarray],
            rng: np.random.Generator) -> tuple[dict[str, np.ndarray], int]:
    """Replacement tables for dead codes and how many codes were re-seeded."""
    updates: dict[str, np.ndarray] = {}
    n = 0
    for name in sorted(usage.ema):
        dead = usage.dead(name)
        pool = recent.get(name)
        if len(dead) == 0 or pool is None or len(pool) == 0:
            continue
        table = params[name].copy()
        picks = rng.integers(0, len(pool), size=len(dead))
        for code, r in zip(dead, picks):
            table[code] = pool[r].reshape(table.shape[1:])
            usage.ema[name][code] = 1.0 / len(table)
        updates[name] = table
        n += len(dead)
    return updates, n


def partitions_greedy(result: DiscoveryResult, batches: Sequence[SegmentBatch]) -> list[Partition]:
    if result.config.method == "single":
        return [tuple((i,) for i in range(b.n_agents)) for b in batches]
    return [restrict(p, result.config.sizes) for p in result.grouper.partitions(batches, greedy=True)]
