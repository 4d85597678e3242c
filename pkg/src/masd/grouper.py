"""Dynamic grouping function and its PPO training against the discovery loss.

Agents pick a group id one after another; each choice sees the context
(global state or the agent's own observation), the one-hot choices of the
agents before it and its own index. Group ids and agent indices are 0-based.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np

from masd import env as E
from masd.dataset import SegmentBatch
from masd.mappo import DiscreteHead, PPOConfig, PPOLearner, RolloutBuffer, gae, ppo_update
from masd.nn import ParameterSet, init_mlp, mlp_numpy

log = logging.getLogger(__name__)

Partition = tuple[tuple[int, ...], ...]
HISTORY_DIM = (E.N_MAX - 1) * E.N_MAX

# loss_fn(batches, partitions) -> per-batch discovery loss
LossFn = Callable[[Sequence[SegmentBatch], Sequence[Partition]], np.ndarray]


class PartitionError(ValueError):
    pass


def partition_of(groups) -> Partition:
    """Merge agents with equal group ids; subgroups ordered by smallest member."""
    groups = [int(g) for g in groups]
    n = len(groups)
    for g in groups:
        if not 0 <= g < n:
            raise PartitionError(f"group id {g} outside [0, {n})")
    members: dict[int, list[int]] = {}
    for i, g in enumerate(groups):
        members.setdefault(g, []).append(i)
    return tuple(sorted(tuple(m) for m in members.values()))


def validate_partition(partition: Partition, n: int) -> None:
    seen: list[int] = []
    for sub in partition:
        if not sub or list(sub) != sorted(sub):
            raise PartitionError(f"subgroup {sub} is empty or not ascending")
        seen.extend(sub)
    if sorted(seen) != list(range(n)) or len(seen) != n:
        raise PartitionError(f"{partition} is not a disjoint cover of {n} agents")
    if [s[0] for s in partition] != sorted(s[0] for s in partition):
        raise PartitionError(f"{partition} subgroups not ordered by smallest member")


def singletons(n: int) -> Partition:
    return tuple((i,) for i in range(n))


@dataclass
class GrouperConfig:
    mode: str = "state"
    hidden: int = 64
    ppo: PPOConfig = field(default_factory=lambda: PPOConfig(gamma=1.0, lam=0.95, epochs=4, minibatch_size=256, actor_lr=1e-3, critic_lr=1e-3))

    def __post_init__(self):
        if self.mode not in ("state", "obs"):
            raise ValueError(f"grouper mode must be 'state' or 'obs', got {self.mode!r}")

    @property
    def context_dim(self) -> int:
        return E.STATE_DIM if self.mode == "state" else E.OBS_DIM


class RunningNorm:
    """Running mean/std (parallel Welford merge)."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.size == 0:
            return
        n_b, mean_b, var_b = x.size, float(x.mean()), float(x.var())
        total = self.count + n_b
        delta = mean_b - self.mean
        self.mean += delta * n_b / total
        self.m2 += var_b * n_b + delta * delta * self.count * n_b / total
        self.count = total

    @property
    def std(self) -> float:
        return float(np.sqrt(self.m2 / self.count)) if self.count > 1 else 1.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) / max(self.std, 1e-8)


def init_grouper_params(rng: np.random.Generator, config: GrouperConfig) -> tuple[ParameterSet, ParameterSet]:
    in_dim = config.context_dim + HISTORY_DIM + E.N_MAX
    critic_in = E.STATE_DIM + HISTORY_DIM + E.N_MAX
    actor = ParameterSet(init_mlp(rng, "grouper/pi/", [in_dim, config.hidden, config.hidden, E.N_MAX]), "grouper")
    critic = ParameterSet(init_mlp(rng, "grouper/v/", [critic_in, config.hidden, config.hidden, 1]), "grouper_critic")
    return actor, critic


@dataclass
class GroupingRollout:
    """One record per decision; network inputs are rebuilt on demand."""

    groups: list[np.ndarray]
    contexts: Sequence[np.ndarray]
    states: np.ndarray  # (B, STATE_DIM)
    actions: np.ndarray
    logp: np.ndarray
    episode: np.ndarray  # which context each decision belongs to
    step: np.ndarray

    @cached_property
    def history(self) -> np.ndarray:
        hist = np.zeros((len(self.actions), HISTORY_DIM + E.N_MAX))
        choices = np.zeros((len(self.groups), E.N_MAX), dtype=np.int64)
        for b, g in enumerate(self.groups):
            choices[b, :len(g)] = g
        rows = np.arange(len(self.actions))
        for j in range(E.N_MAX - 1):
            sel = self.step > j
            hist[rows[sel], j * E.N_MAX + choices[self.episode[sel], j]] = 1.0
        hist[rows, HISTORY_DIM + self.step] = 1.0
        return hist

    @cached_property
    def actor_inputs(self) -> np.ndarray:
        ctx = np.array([self.contexts[b][i] for b, i in zip(self.episode, self.step)]).reshape(len(self.actions), -1)
        return np.concatenate([ctx, self.history], axis=1)

    @cached_property
    def critic_inputs(self) -> np.ndarray:
        return np.concatenate([self.states[self.episode], self.history], axis=1)

    @property
    def masks(self) -> np.ndarray:
        sizes = np.array([len(g) for g in self.groups], dtype=np.int64)
        return np.arange(E.N_MAX)[None, :] < sizes[self.episode, None]


def rollout_groups(
    actor: Mapping,
    contexts: Sequence[np.ndarray],
    states: Sequence[np.ndarray],
    rng: np.random.Generator | None = None,
    greedy: bool = False,
) -> GroupingRollout:
    """Autoregressive group choices for many episodes at once.

    ``contexts[b]`` is (n_b, context_dim); ``states[b]`` the shared global state
    fed to the critic.
    """
    if not greedy and rng is None:
        raise ValueError("sampling requires a random generator")
    ns = np.array([len(c) for c in contexts], dtype=np.int64)
    B = len(contexts)
    hist = np.zeros((B, HISTORY_DIM + E.N_MAX))  # one-hot choices so far, then the agent one-hot
    states = np.asarray(states, dtype=np.float64).reshape(B, -1)
    choices = np.zeros((B, E.N_MAX), dtype=np.int64)
    rec_act, rec_logp, rec_ep, rec_step = [], [], [], []
    for i in range(int(ns.max(initial=0))):
        active = np.flatnonzero(ns > i)
        hist[:, HISTORY_DIM:] = 0.0
        hist[:, HISTORY_DIM + i] = 1.0
        x = np.concatenate([np.array([contexts[b][i] for b in active]), hist[active]], axis=1)
        mask = np.arange(E.N_MAX)[None, :] < ns[active, None]
        logits = np.where(mask, mlp_numpy(actor, "grouper/pi/", x), -np.inf)
        logits = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        if greedy:
            act = np.argmax(logits, axis=1)
        else:
            u = rng.random(len(active))
            act = np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), ns[active] - 1)
        choices[active, i] = act
        if i < E.N_MAX - 1:
            hist[active, i * E.N_MAX + act] = 1.0
        rec_act.append(act)
        rec_logp.append(np.log(probs[np.arange(len(active)), act]))
        rec_ep.append(active)
        rec_step.append(np.full(len(active), i))
    cat = lambda parts, dtype: np.concatenate(parts) if parts else np.zeros(0, dtype=dtype)  # noqa: E731
    return GroupingRollout(
        [choices[b, :ns[b]].copy() for b in range(B)], contexts, states,
        cat(rec_act, np.int64), cat(rec_logp, np.float64), cat(rec_ep, np.int64), cat(rec_step, np.int64),
    )


def choose_groups(
    actor: Mapping, context: np.ndarray, mode: str = "state", rng: np.random.Generator | None = None,
    greedy: bool = False, n_agents: int | None = None,
) -> np.ndarray:
    """Group ids for one team.

    In ``state`` mode ``context`` is the global state vector (``n_agents``
    required); in ``obs`` mode it is the (n, OBS_DIM) observation matrix.
    """
    if mode == "state":
        if context.shape != (E.STATE_DIM,) or n_agents is None:
            raise ValueError("state mode needs a STATE_DIM vector and n_agents")
        contexts = np.tile(context, (n_agents, 1))
        state = context
    elif mode == "obs":
        if context.ndim != 2 or context.shape[1] != E.OBS_DIM:
            raise ValueError("obs mode needs an (n, OBS_DIM) observation matrix")
        contexts = context
        state = np.zeros(E.STATE_DIM)
    else:
        raise ValueError(f"unknown grouper mode {mode!r}")
    return rollout_groups(actor, [contexts], [state], rng, greedy).groups[0]


class Grouper:
    """Grouping policy with its centralized critic and PPO state."""

    def __init__(self, config: GrouperConfig, rng: np.random.Generator):
        self.config = config
        actor, critic = init_grouper_params(rng, config)
        self.learner = PPOLearner(actor, critic, DiscreteHead("grouper/pi/"), "grouper/v/", config.ppo)
        self.reward_norm = RunningNorm()
        self.skipped = 0

    @property
    def params(self) -> ParameterSet:
        return self.learner.actor.merged(self.learner.critic)

    def load(self, tensors: Mapping[str, np.ndarray]) -> None:
        self.learner.actor = self.learner.actor.replace({k: tensors[k] for k in self.learner.actor})
        self.learner.critic = self.learner.critic.replace({k: tensors[k] for k in self.learner.critic})

    def contexts(self, batches: Sequence[SegmentBatch]) -> list[np.ndarray]:
        if self.config.mode == "state":
            return [np.tile(b.start_state, (b.n_agents, 1)) for b in batches]
        return [b.start_obs for b in batches]

    def partitions(self, batches: Sequence[SegmentBatch], rng: np.random.Generator | None = None, greedy: bool = False) -> list[Partition]:
        ro = rollout_groups(self.learner.actor, self.contexts(batches), [b.start_state for b in batches], rng, greedy)
        return [partition_of(g) for g in ro.groups]

    def ppo_phase(self, batches: Sequence[SegmentBatch], loss_fn: LossFn, rng: np.random.Generator) -> dict[str, float]:
        """One grouping episode per batch, terminal reward ``-loss``, then a PPO update."""
        ro = rollout_groups(self.learner.actor, self.contexts(batches), [b.start_state for b in batches], rng)
        partitions = [partition_of(g) for g in ro.groups]
        losses = np.asarray(loss_fn(batches, partitions), dtype=np.float64)
        finite = np.isfinite(losses)
        if not finite.all():
            self.skipped += int((~finite).sum())
            log.warning("grouper phase: skipping %d batches with non-finite loss", int((~finite).sum()))
        rewards = -losses[finite]
        self.reward_norm.update(rewards)
        scaled = np.zeros(len(batches))
        scaled[finite] = self.reward_norm(rewards)

        keep = finite[ro.episode]
        values = self.learner.values(ro.critic_inputs)
        adv = np.zeros(len(ro.actions))
        ret = np.zeros(len(ro.actions))
        for b in np.flatnonzero(finite):
            idx = np.flatnonzero(ro.episode == b)
            idx = idx[np.argsort(ro.step[idx])]
            r = np.zeros(len(idx))
            r[-1] = scaled[b]
            d = np.zeros(len(idx), dtype=bool)
            d[-1] = True
            a, rt = gae(r, values[idx], d, self.config.ppo.gamma, self.config.ppo.lam)
            adv[idx], ret[idx] = a, rt
        buf = RolloutBuffer(
            ro.actor_inputs[keep], ro.actions[keep], ro.logp[keep], adv[keep], ret[keep],
            ro.critic_inputs[keep], values[keep], ro.masks[keep],
        )
        if len(buf) == 0:
            return {"mean_loss": float("nan")}
        stats = ppo_update(self.learner, buf, rng)
        stats["mean_loss"] = float(losses[finite].mean())
        return stats

